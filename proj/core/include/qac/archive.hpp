#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "qac/corpus.hpp"
#include "qac/model.hpp"

namespace qac {

// Single-file model archive (little-endian, float32 tensors):
//   "QACMODEL" | u32 format version
//   config: u32 variant, u32 e, u32 h, u32 m, u32 r, u32 vocab, f64 ln_epsilon,
//           u32 float_width, u8 layer_norm, u8 factor_bias_adaptation
//   vocabulary: u32 n, n x u32 code point (ids 3..)
//   u32 n_tensors, n x (u32 name_len, name, u32 rank, rank x u64 dim, f32 data column-major)
//     names: E W b V Z_L Z_R ln_gain ln_bias P p_bias, then U (k x m, one row per user)
//   u32 crc32 of everything above
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelArchive {
    Model<float> model;
    UserEmbeddings<float> users;
    Vocabulary vocab;
};

void save_model(std::ostream& out, const Model<float>& model, const UserEmbeddings<float>& users,
                const Vocabulary& vocab);
void save_model(const std::filesystem::path& path, const Model<float>& model, const UserEmbeddings<float>& users,
                const Vocabulary& vocab);

// Throws VersionError, ChecksumError or FormatError on bad input.
ModelArchive load_model(std::istream& in);
ModelArchive load_model(const std::filesystem::path& path);

}  // namespace qac
