#include "config_json.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "qac/errors.hpp"

namespace qac::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

ModelConfig parse_model(const json& obj) {
    reject_unknown(obj,
                   {"variant", "char_embedding", "hidden", "user_embedding", "rank", "vocab_size",
                    "ln_epsilon", "float_width", "layer_norm", "factor_bias_adaptation"},
                   "model");
    ModelConfig cfg;
    if (obj.contains("variant")) cfg.variant = parse_variant(obj.at("variant").get<std::string>());
    read(obj, "char_embedding", cfg.char_embedding);
    read(obj, "hidden", cfg.hidden);
    read(obj, "user_embedding", cfg.user_embedding);
    read(obj, "rank", cfg.rank);
    read(obj, "vocab_size", cfg.vocab_size);
    read(obj, "ln_epsilon", cfg.ln_epsilon);
    read(obj, "float_width", cfg.float_width);
    read(obj, "layer_norm", cfg.layer_norm);
    read(obj, "factor_bias_adaptation", cfg.factor_bias_adaptation);
    return cfg;
}

TrainConfig parse_train(const json& obj) {
    reject_unknown(obj,
                   {"epochs", "adam_lr", "adam_beta1", "adam_beta2", "adam_epsilon", "batch_size",
                    "max_train_chars", "seed", "gradient_clip"},
                   "train");
    TrainConfig cfg;
    read(obj, "epochs", cfg.epochs);
    read(obj, "adam_lr", cfg.adam_lr);
    read(obj, "adam_beta1", cfg.adam_beta1);
    read(obj, "adam_beta2", cfg.adam_beta2);
    read(obj, "adam_epsilon", cfg.adam_epsilon);
    read(obj, "batch_size", cfg.batch_size);
    read(obj, "seed", cfg.seed);
    if (obj.contains("max_train_chars")) {
        const auto& v = obj.at("max_train_chars");
        cfg.max_train_chars = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
    }
    if (obj.contains("gradient_clip")) {
        const auto& v = obj.at("gradient_clip");
        cfg.gradient_clip = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    return cfg;
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

JobConfig parse_job_config(const json& doc) {
    reject_unknown(doc, {"model", "train", "rare_threshold", "max_vocab"}, "config");
    JobConfig job;
    if (doc.contains("model")) job.model = parse_model(doc.at("model"));
    if (doc.contains("train")) job.train = parse_train(doc.at("train"));
    read(doc, "rare_threshold", job.rare_threshold);
    read(doc, "max_vocab", job.max_vocab);
    if (job.max_vocab < 1) throw ConfigError("max_vocab must be positive");
    job.train.validate();
    return job;
}

JobConfig load_job_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_job_config(doc);
}

json to_json(const ModelConfig& c) {
    return {{"variant", std::string(to_string(c.variant))},
            {"char_embedding", c.char_embedding},
            {"hidden", c.hidden},
            {"user_embedding", c.user_embedding},
            {"rank", c.rank},
            {"vocab_size", c.vocab_size},
            {"ln_epsilon", c.ln_epsilon},
            {"float_width", c.float_width},
            {"layer_norm", c.layer_norm},
            {"factor_bias_adaptation", c.factor_bias_adaptation}};
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"adam_lr", c.adam_lr},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"batch_size", c.batch_size},
            {"max_train_chars", c.max_train_chars ? json(*c.max_train_chars) : json(nullptr)},
            {"seed", c.seed},
            {"gradient_clip", c.gradient_clip ? json(*c.gradient_clip) : json(nullptr)}};
}

json to_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch}, {"train_nll", nullable(m.train_nll)},
            {"valid_perplexity", nullable(m.valid_perplexity)}};
}

json to_json(const EvalResult& r) {
    return {{"mrr_seen", r.mrr_seen}, {"mrr_unseen", r.mrr_unseen}, {"mrr_all", r.mrr_all},
            {"n_seen", r.n_seen},     {"n_unseen", r.n_unseen}};
}

}  // namespace qac::cli
