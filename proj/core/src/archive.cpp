#include "qac/archive.hpp"

#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "qac/errors.hpp"

namespace qac {

namespace {

constexpr std::string_view kMagic = "QACMODEL";

void write_tensor(detail::ByteWriter& w, std::string_view name, std::span<const float> data,
                  const std::vector<std::size_t>& shape) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.u64(d);
    for (float v : data) w.f32(v);
}

struct RawTensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

}  // namespace

void save_model(std::ostream& out, const Model<float>& model, const UserEmbeddings<float>& users,
                const Vocabulary& vocab) {
    const auto& cfg = model.config;
    if (vocab.size() != cfg.vocab_size) throw DimensionError("vocabulary does not match the model");
    detail::ByteWriter w;
    w.bytes(kMagic);
    w.u32(kModelFormatVersion);
    w.u32(static_cast<std::uint32_t>(cfg.variant));
    w.u32(static_cast<std::uint32_t>(cfg.char_embedding));
    w.u32(static_cast<std::uint32_t>(cfg.hidden));
    w.u32(static_cast<std::uint32_t>(cfg.user_embedding));
    w.u32(static_cast<std::uint32_t>(cfg.rank));
    w.u32(static_cast<std::uint32_t>(cfg.vocab_size));
    w.f64(cfg.ln_epsilon);
    w.u32(static_cast<std::uint32_t>(cfg.float_width));
    w.u8(cfg.layer_norm ? 1 : 0);
    w.u8(cfg.factor_bias_adaptation ? 1 : 0);

    w.u32(static_cast<std::uint32_t>(vocab.characters().size()));
    for (char32_t cp : vocab.characters()) w.u32(static_cast<std::uint32_t>(cp));

    const auto views = tensors(model.params);
    w.u32(static_cast<std::uint32_t>(views.size() + 1));
    for (const auto& t : views) write_tensor(w, t.name, t.data, t.shape);

    std::vector<float> rows;
    rows.reserve(users.size() * users.dim());
    for (UserId id = 1; id <= users.size(); ++id) {
        const auto& row = users.row(id);
        rows.insert(rows.end(), row.data(), row.data() + row.size());
    }
    write_tensor(w, "U", rows, {users.size(), users.dim()});
    w.seal();
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw IoError("failed to write model archive");
}

void save_model(const std::filesystem::path& path, const Model<float>& model, const UserEmbeddings<float>& users,
                const Vocabulary& vocab) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    save_model(out, model, users, vocab);
}

ModelArchive load_model(std::istream& in) {
    const auto raw = detail::read_all(in);
    if (raw.size() < kMagic.size() + 4 || std::string_view(raw).substr(0, kMagic.size()) != kMagic) {
        throw FormatError("not a model archive (bad magic)");
    }
    {
        detail::ByteReader header(std::string_view(raw).substr(kMagic.size(), 4));
        const auto version = header.u32();
        if (version != kModelFormatVersion) {
            throw VersionError("model archive format version " + std::to_string(version) +
                               " is incompatible with this build (expected " +
                               std::to_string(kModelFormatVersion) + ")");
        }
    }
    detail::ByteReader r(detail::unseal(raw));
    r.bytes(kMagic.size());
    r.u32();

    ModelConfig cfg;
    const auto variant = r.u32();
    if (variant > static_cast<std::uint32_t>(Variant::kFactor)) throw FormatError("unknown variant tag");
    cfg.variant = static_cast<Variant>(variant);
    cfg.char_embedding = r.u32();
    cfg.hidden = r.u32();
    cfg.user_embedding = r.u32();
    cfg.rank = r.u32();
    cfg.vocab_size = r.u32();
    cfg.ln_epsilon = r.f64();
    cfg.float_width = static_cast<int>(r.u32());
    cfg.layer_norm = r.u8() != 0;
    cfg.factor_bias_adaptation = r.u8() != 0;
    cfg.validate();

    const auto n_chars = r.u32();
    if (n_chars > r.remaining() / 4) throw FormatError("implausible vocabulary size");
    std::vector<char32_t> chars;
    for (std::uint32_t i = 0; i < n_chars; ++i) chars.push_back(static_cast<char32_t>(r.u32()));
    ModelArchive archive;
    archive.vocab = Vocabulary(std::move(chars));
    if (archive.vocab.size() != cfg.vocab_size) throw FormatError("vocabulary size disagrees with config");

    std::map<std::string, RawTensor, std::less<>> found;
    const auto n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        auto name = r.str();
        RawTensor t;
        const auto rank = r.u32();
        if (rank > 8) throw FormatError("implausible tensor rank");
        std::size_t count = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape.push_back(r.u64());
            count *= t.shape.back();
        }
        if (count > r.remaining() / 4) throw FormatError("tensor " + name + " exceeds file size");
        t.data.resize(count);
        for (auto& v : t.data) v = r.f32();
        found.emplace(std::move(name), std::move(t));
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes in model archive");

    // Allocate the expected shapes, then fill by name.
    auto model = init_parameters<float>(cfg, 1, 0).first;
    for (auto& t : tensors(model.params)) {
        const auto it = found.find(t.name);
        if (it == found.end()) throw FormatError("archive is missing tensor " + std::string(t.name));
        if (it->second.shape != t.shape) throw FormatError("tensor " + std::string(t.name) + " has the wrong shape");
        std::copy(it->second.data.begin(), it->second.data.end(), t.data.begin());
        found.erase(it);
    }
    const auto u = found.find("U");
    if (u == found.end() || u->second.shape.size() != 2 || u->second.shape[1] != cfg.user_embedding ||
        u->second.shape[0] < 1) {
        throw FormatError("archive is missing a valid user embedding table");
    }
    const auto k = u->second.shape[0];
    const auto m = u->second.shape[1];
    archive.users = UserEmbeddings<float>(k, m);
    for (std::size_t row = 0; row < k; ++row) {
        auto& dst = archive.users.row(static_cast<UserId>(row + 1));
        std::copy_n(u->second.data.begin() + static_cast<std::ptrdiff_t>(row * m), m, dst.data());
    }
    found.erase(u);
    if (!found.empty()) throw FormatError("archive has unexpected tensor " + found.begin()->first);
    archive.model = std::move(model);
    return archive;
}

ModelArchive load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return load_model(in);
}

}  // namespace qac
