#pragma once

#include <cstddef>
#include <filesystem>

#include "json.hpp"
#include "qac/beam_search.hpp"
#include "qac/eval.hpp"
#include "qac/model.hpp"
#include "qac/train.hpp"

namespace qac::cli {

// Training job description read from the --config file:
//   {"model": {...ModelConfig}, "train": {...TrainConfig},
//    "rare_threshold": 15, "max_vocab": 79}
// Missing keys keep their defaults; unknown keys are rejected.
struct JobConfig {
    ModelConfig model;
    TrainConfig train;
    std::size_t rare_threshold = 15;
    std::size_t max_vocab = 79;
};

JobConfig load_job_config(const std::filesystem::path& path);
JobConfig parse_job_config(const nlohmann::json& doc);

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const EpochMetrics& metrics);
nlohmann::json to_json(const EvalResult& result);

}  // namespace qac::cli
