#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "qac/model.hpp"

namespace qac {

struct TrainConfig {
    std::size_t epochs = 6;
    double adam_lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t batch_size = 64;
    std::optional<std::size_t> max_train_chars = 40;
    std::uint64_t seed = 0;
    std::optional<double> gradient_clip;  // global L2 norm

    void validate() const;
};

// Gradients shaped like Parameters plus the rows of U touched by a batch.
template <typename T>
struct GradientSet {
    Parameters<T> params;
    std::map<UserId, Vector<T>> users;
};

template <typename T>
struct GradientResult {
    GradientSet<T> grads;
    double mean_nll = 0.0;
    std::size_t steps = 0;
};

// Adds d(scale * NLL)/d(theta) into `param_grads` (if non-null) and
// d(scale * NLL)/du into `user_grad` (if non-null). Returns the summed NLL.
template <typename T>
double sequence_gradient(const Model<T>& model, const Vector<T>& u, std::span<const TokenId> tokens,
                         Parameters<T>* param_grads, Vector<T>* user_grad, T scale = T(1));

// Exact gradients of the mean per-step NLL over the batch.
template <typename T>
GradientResult<T> compute_gradients(const Model<T>& model, const UserEmbeddings<T>& users,
                                    std::span<const EncodedQuery> batch);

template <typename T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    Parameters<T> first;
    Parameters<T> second;
    // Per-row moments for U; rows are only touched when they receive a gradient.
    std::map<UserId, std::pair<Vector<T>, Vector<T>>> user_moments;

    static AdamState for_model(const Parameters<T>& params, double beta1 = 0.9, double beta2 = 0.999,
                               double epsilon = 1e-8);
};

// Bias-corrected Adam. Throws NumericError (and leaves everything untouched)
// when any gradient is non-finite.
template <typename T>
void adam_step(AdamState<T>& adam, Parameters<T>& params, UserEmbeddings<T>& users,
               const GradientSet<T>& grads, double lr);

struct OnlineConfig {
    double online_lr = 1.0;
    double rho = 0.95;
    double epsilon = 1e-6;
};

template <typename T>
struct AdadeltaRow {
    Vector<T> sq_grad;
    Vector<T> sq_update;

    static AdadeltaRow zeros(std::size_t dim) {
        return {Vector<T>::Zero(static_cast<Eigen::Index>(dim)),
                Vector<T>::Zero(static_cast<Eigen::Index>(dim))};
    }
};

template <typename T>
struct AdadeltaState {
    OnlineConfig config;
    std::map<UserId, AdadeltaRow<T>> rows;
};

// Appends a copy of u_1 and allocates its Adadelta accumulators.
template <typename T>
UserId spawn_user(UserEmbeddings<T>& users, AdadeltaState<T>& ada);

// One Adadelta step on NLL(query) with respect to `u` only.
template <typename T>
void online_update(const Model<T>& model, Vector<T>& u, AdadeltaRow<T>& accumulators,
                   const OnlineConfig& config, std::span<const TokenId> tokens);

template <typename T>
void online_update(const Model<T>& model, UserEmbeddings<T>& users, AdadeltaState<T>& ada, UserId user,
                   std::span<const TokenId> tokens);

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_nll = 0.0;         // mean per-step
    double valid_perplexity = 0.0;  // NaN when no validation data
};

template <typename T>
struct TrainResult {
    Model<T> model;
    UserEmbeddings<T> users;
    double initial_valid_perplexity = 0.0;
    std::vector<EpochMetrics> epochs;
};

// `train` queries should already be truncated per config.max_train_chars
// (see encode_records). Deterministic for a fixed seed.
template <typename T>
TrainResult<T> train(const TrainConfig& config, const ModelConfig& model_config,
                     std::span<const EncodedQuery> train_set, std::span<const EncodedQuery> valid_set,
                     std::size_t user_count, const std::function<void(const EpochMetrics&)>& on_epoch = {});

// Encodes records with user ids from `table`; users missing from the table map to u_1.
std::vector<EncodedQuery> encode_records(const Vocabulary& vocab, const UserTable& table,
                                         std::span<const QueryRecord> records,
                                         std::optional<std::size_t> max_chars);

struct OnlineLrTuning {
    double best_lr = 0.0;
    std::vector<std::pair<double, double>> perplexities;  // (lr, perplexity)
};

// Each inner vector is one unseen user's chronological queries. Users start
// from u_1; every query is scored before the update it triggers.
template <typename T>
OnlineLrTuning tune_online_lr(const Model<T>& model, const UserEmbeddings<T>& users,
                              std::span<const double> candidates,
                              std::span<const std::vector<std::vector<TokenId>>> tuning_users,
                              OnlineConfig base = {});

}  // namespace qac
