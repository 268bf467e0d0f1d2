#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qac/corpus.hpp"

namespace qac::cli {

namespace fs = std::filesystem;

// A prepared data directory holds train.tsv, valid.tsv and test.tsv, each
// with `user_id \t timestamp \t query` lines.
struct DataDir {
    fs::path root;
    fs::path train() const { return root / "train.tsv"; }
    fs::path valid() const { return root / "valid.tsv"; }
    fs::path test() const { return root / "test.tsv"; }
};

struct SplitOptions {
    fs::path log;
    fs::path out;
    LogSchema schema;
    SplitConfig split;
};

struct TrainOptions {
    fs::path config;
    fs::path data;
    fs::path out;
};

struct CompleteOptions {
    fs::path model;
    std::string user = "new";
    std::string prefix;
    std::size_t top = 10;
    std::size_t beam_width = 100;
    std::size_t branching = 4;
    std::size_t max_chars = 100;
};

struct MpcBuildOptions {
    fs::path data;
    fs::path out;
    std::size_t min_count = 3;
};

struct MpcCompleteOptions {
    fs::path index;
    std::string prefix;
    std::size_t top = 10;
};

struct EvalCliOptions {
    fs::path model;
    fs::path data;
    std::string variant;
    fs::path out;
    std::optional<fs::path> baseline;
    double online_lr = 1.0;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::size_t beam_width = 100;
    std::size_t branching = 4;
    std::size_t rare_threshold = 15;
    std::size_t curve_window = 9;
    std::vector<std::string> probes;
    std::size_t case_study_pool = 1500;
};

struct ServeOptions {
    fs::path model;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t defer_updates = 0;
    double online_lr = 1.0;
    std::optional<fs::path> ui_dir;
};

int run_split(const SplitOptions& opt, std::ostream& out);
int run_train(const TrainOptions& opt, std::ostream& out);
int run_complete(const CompleteOptions& opt, std::ostream& out);
int run_mpc_build(const MpcBuildOptions& opt, std::ostream& out);
int run_mpc_complete(const MpcCompleteOptions& opt, std::ostream& out);
int run_eval(const EvalCliOptions& opt, std::ostream& out);
int run_serve(const ServeOptions& opt, std::ostream& out);

}  // namespace qac::cli
