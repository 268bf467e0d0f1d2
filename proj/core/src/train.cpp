#include "qac/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "lstm_cell.hpp"
#include "qac/errors.hpp"

namespace qac {

namespace {

template <typename T>
bool all_finite(const GradientSet<T>& grads) {
    for (const auto& t : tensors(grads.params)) {
        for (T v : t.data) {
            if (!std::isfinite(v)) return false;
        }
    }
    for (const auto& [_, g] : grads.users) {
        if (!g.allFinite()) return false;
    }
    return true;
}

template <typename T>
void clip_global_norm(GradientSet<T>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& t : tensors(std::as_const(grads.params))) {
        for (T v : t.data) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    for (const auto& [_, g] : grads.users) sq += g.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& t : tensors(grads.params)) {
        for (T& v : t.data) v *= factor;
    }
    for (auto& [_, g] : grads.users) g *= factor;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(adam_lr > 0.0)) throw ConfigError("adam_lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (gradient_clip && !(*gradient_clip > 0.0)) throw ConfigError("gradient_clip must be positive");
}

template <typename T>
double sequence_gradient(const Model<T>& model, const Vector<T>& u, std::span<const TokenId> tokens,
                         Parameters<T>* param_grads, Vector<T>* user_grad, T scale) {
    if (tokens.size() < 2 || tokens.front() != Vocabulary::kStart || tokens.back() != Vocabulary::kStop) {
        throw ArgumentError("token sequence must start with START and end with STOP");
    }
    const auto& cfg = model.config;
    const auto& p = model.params;
    const auto e = static_cast<Eigen::Index>(cfg.char_embedding);
    const auto h = static_cast<Eigen::Index>(cfg.hidden);
    const auto g = static_cast<Eigen::Index>(cfg.gate_width());
    const auto steps = static_cast<Eigen::Index>(tokens.size() - 1);
    const auto weights = adapted_recurrent_weights(model, u);

    std::vector<detail::StepCache<T>> caches(static_cast<std::size_t>(steps));
    std::vector<Eigen::VectorXd> log_probs(static_cast<std::size_t>(steps));
    double nll = 0.0;
    {
        Vector<T> h_prev = Vector<T>::Zero(h);
        Vector<T> c_prev = Vector<T>::Zero(h);
        for (Eigen::Index t = 0; t < steps; ++t) {
            const auto token = tokens[static_cast<std::size_t>(t)];
            if (token < 0 || token >= p.char_embedding.rows()) throw LookupError("token id out of range");
            auto& cache = caches[static_cast<std::size_t>(t)];
            detail::cell_forward(model, weights, Vector<T>(p.char_embedding.row(token).transpose()), h_prev,
                                 c_prev, cache);
            h_prev = cache.h;
            c_prev = cache.c;
            auto& lp = log_probs[static_cast<std::size_t>(t)];
            lp = log_softmax(p.output.transpose() * cache.h + p.output_bias);
            nll -= lp(tokens[static_cast<std::size_t>(t) + 1]);
        }
    }

    Matrix<T> inputs(e + h, steps);  // column t = z_t
    Matrix<T> deltas(g, steps);      // column t = dL/da_t
    Vector<T> dh_next = Vector<T>::Zero(h);
    Vector<T> dc_next = Vector<T>::Zero(h);
    Vector<T> dy(g);
    for (Eigen::Index t = steps - 1; t >= 0; --t) {
        const auto& cache = caches[static_cast<std::size_t>(t)];
        Vector<T> dlogits = log_probs[static_cast<std::size_t>(t)].array().exp().template cast<T>();
        dlogits(tokens[static_cast<std::size_t>(t) + 1]) -= T(1);
        dlogits *= scale;
        if (param_grads) {
            param_grads->output.noalias() += cache.h * dlogits.transpose();
            param_grads->output_bias += dlogits;
        }
        const Vector<T> dh = p.output * dlogits + dh_next;
        const auto& ig = cache.input_gate.array();
        const auto& og = cache.output_gate.array();
        const auto& cand = cache.candidate.array();
        const auto& tc = cache.tanh_c.array();
        const Vector<T> dc = (dh.array() * og * (T(1) - tc.square()) + dc_next.array()).matrix();
        const auto d_in = (dc.array() * (cand - cache.c_prev.array())).eval();
        const auto d_out = (dh.array() * tc).eval();
        const auto d_cand = (dc.array() * ig).eval();
        dc_next = (dc.array() * (T(1) - ig)).matrix();
        dy.segment(0, h) = (d_in * ig * (T(1) - ig)).matrix();
        dy.segment(h, h) = (d_out * og * (T(1) - og)).matrix();
        dy.segment(2 * h, h) = (d_cand * (T(1) - cand.square())).matrix();

        auto da = deltas.col(t);
        if (cfg.layer_norm) {
            if (param_grads) {
                param_grads->ln_gain += dy.cwiseProduct(cache.normalized);
                param_grads->ln_bias += dy;
            }
            const Vector<T> dn = dy.cwiseProduct(p.ln_gain);
            for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(kGateBlocks); ++k) {
                const auto dnk = dn.segment(k * h, h).array();
                const auto nk = cache.normalized.segment(k * h, h).array();
                const T mean_dn = dnk.mean();
                const T mean_dn_n = (dnk * nk).mean();
                da.segment(k * h, h) = (cache.inv_std(k) * (dnk - mean_dn - nk * mean_dn_n)).matrix();
            }
        } else {
            da = dy;
        }
        inputs.col(t) = cache.z;
        const Vector<T> dz = weights.weight * da;
        if (param_grads) {
            param_grads->char_embedding.row(tokens[static_cast<std::size_t>(t)]) += dz.head(e).transpose();
        }
        dh_next = dz.tail(h);
    }

    const bool need_weight_grad = param_grads || (user_grad && cfg.has_low_rank_adaptation());
    Matrix<T> d_weight;
    if (need_weight_grad) d_weight.noalias() = inputs * deltas.transpose();
    const Vector<T> d_bias = deltas.rowwise().sum();
    if (param_grads) {
        param_grads->recurrent += d_weight;
        param_grads->recurrent_bias += d_bias;
    }
    if (cfg.has_bias_adaptation()) {
        if (param_grads) param_grads->bias_adaptation.noalias() += u * d_bias.transpose();
        if (user_grad) user_grad->noalias() += p.bias_adaptation * d_bias;
    }
    if (cfg.has_low_rank_adaptation()) {
        const auto m = static_cast<Eigen::Index>(cfg.user_embedding);
        const auto r = static_cast<Eigen::Index>(cfg.rank);
        Matrix<T> left = Matrix<T>::Zero(e + h, r);
        Matrix<T> right = Matrix<T>::Zero(r, g);
        for (Eigen::Index i = 0; i < m; ++i) {
            left.noalias() += u(i) * p.left_bases.middleCols(i * r, r);
            right.noalias() += u(i) * p.right_bases.middleCols(i * g, g);
        }
        const Matrix<T> d_left = d_weight * right.transpose();
        const Matrix<T> d_right = left.transpose() * d_weight;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (param_grads) {
                param_grads->left_bases.middleCols(i * r, r) += u(i) * d_left;
                param_grads->right_bases.middleCols(i * g, g) += u(i) * d_right;
            }
            if (user_grad) {
                (*user_grad)(i) += p.left_bases.middleCols(i * r, r).cwiseProduct(d_left).sum() +
                                   p.right_bases.middleCols(i * g, g).cwiseProduct(d_right).sum();
            }
        }
    }
    return nll;
}

template <typename T>
GradientResult<T> compute_gradients(const Model<T>& model, const UserEmbeddings<T>& users,
                                    std::span<const EncodedQuery> batch) {
    if (batch.empty()) throw ArgumentError("compute_gradients on an empty batch");
    GradientResult<T> result;
    result.grads.params = model.params.zeros_like();
    double total = 0.0;
    for (const auto& q : batch) {
        const auto& u = users.row(q.user);
        auto [it, _] = result.grads.users.try_emplace(q.user, Vector<T>::Zero(u.size()));
        total += sequence_gradient(model, u, q.tokens, &result.grads.params, &it->second);
        result.steps += q.tokens.size() - 1;
    }
    const T inv = T(1) / static_cast<T>(result.steps);
    for (auto& t : tensors(result.grads.params)) {
        for (T& v : t.data) v *= inv;
    }
    for (auto& [_, g] : result.grads.users) g *= inv;
    result.mean_nll = total / static_cast<double>(result.steps);
    return result;
}

template <typename T>
AdamState<T> AdamState<T>::for_model(const Parameters<T>& params, double beta1, double beta2,
                                     double epsilon) {
    AdamState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.epsilon = epsilon;
    s.first = params.zeros_like();
    s.second = params.zeros_like();
    return s;
}

template <typename T>
void adam_step(AdamState<T>& adam, Parameters<T>& params, UserEmbeddings<T>& users,
               const GradientSet<T>& grads, double lr) {
    if (!all_finite(grads)) throw NumericError("non-finite gradient; Adam update rejected");
    auto p = tensors(params);
    auto g = tensors(grads.params);
    auto m = tensors(adam.first);
    auto v = tensors(adam.second);
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
        throw DimensionError("Adam state does not match parameters");
    }
    for (const auto& [id, _] : grads.users) {
        if (!users.contains(id)) throw LookupError("gradient for unknown user " + std::to_string(id));
    }
    ++adam.step;
    const double b1 = adam.beta1;
    const double b2 = adam.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(adam.step));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(adam.step));
    auto update = [&](std::span<T> param, std::span<const T> grad, std::span<T> first, std::span<T> second) {
        if (param.size() != grad.size()) throw DimensionError("gradient shape mismatch");
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double gi = grad[i];
            const double mi = b1 * first[i] + (1.0 - b1) * gi;
            const double vi = b2 * second[i] + (1.0 - b2) * gi * gi;
            first[i] = static_cast<T>(mi);
            second[i] = static_cast<T>(vi);
            const double step = lr * (mi / correction1) / (std::sqrt(vi / correction2) + adam.epsilon);
            param[i] = static_cast<T>(param[i] - step);
        }
    };
    for (std::size_t k = 0; k < p.size(); ++k) {
        update(p[k].data, std::span<const T>(g[k].data), m[k].data, v[k].data);
    }
    for (const auto& [id, grad] : grads.users) {
        auto& row = users.row(id);
        auto [it, _] = adam.user_moments.try_emplace(
            id, Vector<T>::Zero(row.size()), Vector<T>::Zero(row.size()));
        update(std::span<T>(row.data(), static_cast<std::size_t>(row.size())),
               std::span<const T>(grad.data(), static_cast<std::size_t>(grad.size())),
               std::span<T>(it->second.first.data(), static_cast<std::size_t>(row.size())),
               std::span<T>(it->second.second.data(), static_cast<std::size_t>(row.size())));
    }
}

template <typename T>
UserId spawn_user(UserEmbeddings<T>& users, AdadeltaState<T>& ada) {
    const UserId id = users.append(users.row(kRareUser));
    ada.rows.insert_or_assign(id, AdadeltaRow<T>::zeros(users.dim()));
    return id;
}

template <typename T>
void online_update(const Model<T>& model, Vector<T>& u, AdadeltaRow<T>& acc, const OnlineConfig& config,
                   std::span<const TokenId> tokens) {
    if (tokens.size() <= 2) throw ArgumentError("online_update needs a non-empty query");
    if (config.online_lr == 0.0 || model.config.variant == Variant::kUnadapted) return;
    Vector<T> grad = Vector<T>::Zero(u.size());
    sequence_gradient<T>(model, u, tokens, nullptr, &grad);
    if (!grad.allFinite()) throw NumericError("non-finite gradient in online update");
    if (acc.sq_grad.size() != u.size()) acc = AdadeltaRow<T>::zeros(static_cast<std::size_t>(u.size()));
    const T rho = static_cast<T>(config.rho);
    const T eps = static_cast<T>(config.epsilon);
    acc.sq_grad = rho * acc.sq_grad + (T(1) - rho) * grad.cwiseAbs2();
    const Vector<T> delta = ((acc.sq_update.array() + eps).sqrt() / (acc.sq_grad.array() + eps).sqrt() *
                             grad.array())
                                .matrix();
    acc.sq_update = rho * acc.sq_update + (T(1) - rho) * delta.cwiseAbs2();
    u -= static_cast<T>(config.online_lr) * delta;
    if (!u.allFinite()) throw NumericError("online update produced a non-finite embedding");
}

template <typename T>
void online_update(const Model<T>& model, UserEmbeddings<T>& users, AdadeltaState<T>& ada, UserId user,
                   std::span<const TokenId> tokens) {
    auto& row = users.row(user);
    auto [it, _] = ada.rows.try_emplace(user, AdadeltaRow<T>::zeros(users.dim()));
    online_update(model, row, it->second, ada.config, tokens);
}

std::vector<EncodedQuery> encode_records(const Vocabulary& vocab, const UserTable& table,
                                         std::span<const QueryRecord> records,
                                         std::optional<std::size_t> max_chars) {
    std::vector<EncodedQuery> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        const auto it = table.ids.find(r.user_key);
        out.push_back(EncodedQuery{it == table.ids.end() ? kRareUser : it->second,
                                   encode_query(vocab, r.text, max_chars)});
    }
    return out;
}

template <typename T>
TrainResult<T> train(const TrainConfig& config, const ModelConfig& model_config,
                     std::span<const EncodedQuery> train_set, std::span<const EncodedQuery> valid_set,
                     std::size_t user_count, const std::function<void(const EpochMetrics&)>& on_epoch) {
    config.validate();
    if (train_set.empty()) throw EmptyCorpusError("no training queries");
    auto [model, users] = init_parameters<T>(model_config, user_count, config.seed);
    for (const auto& q : train_set) {
        if (!users.contains(q.user)) throw LookupError("training query for unknown user");
    }
    auto adam = AdamState<T>::for_model(model.params, config.adam_beta1, config.adam_beta2,
                                        config.adam_epsilon);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    TrainResult<T> result{{}, {}, valid_set.empty() ? nan : perplexity(model, users, valid_set), {}};

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<EncodedQuery> batch;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::mt19937_64 rng(config.seed * 1000003ULL + epoch);
        std::shuffle(order.begin(), order.end(), rng);
        double nll_sum = 0.0;
        std::size_t step_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const auto end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);
            auto grads = compute_gradients(model, users, std::span<const EncodedQuery>(batch));
            if (config.gradient_clip) clip_global_norm(grads.grads, *config.gradient_clip);
            adam_step(adam, model.params, users, grads.grads, config.adam_lr);
            nll_sum += grads.mean_nll * static_cast<double>(grads.steps);
            step_sum += grads.steps;
        }
        EpochMetrics metrics{epoch, nll_sum / static_cast<double>(step_sum),
                             valid_set.empty() ? nan : perplexity(model, users, valid_set)};
        result.epochs.push_back(metrics);
        if (on_epoch) on_epoch(metrics);
    }
    result.model = std::move(model);
    result.users = std::move(users);
    return result;
}

template <typename T>
OnlineLrTuning tune_online_lr(const Model<T>& model, const UserEmbeddings<T>& users,
                              std::span<const double> candidates,
                              std::span<const std::vector<std::vector<TokenId>>> tuning_users,
                              OnlineConfig base) {
    if (candidates.empty()) throw ArgumentError("no candidate learning rates");
    std::size_t total_queries = 0;
    for (const auto& u : tuning_users) total_queries += u.size();
    if (total_queries == 0) throw EmptyCorpusError("empty tuning set");

    OnlineLrTuning result;
    double best = std::numeric_limits<double>::infinity();
    for (double lr : candidates) {
        OnlineConfig cfg = base;
        cfg.online_lr = lr;
        double nll = 0.0;
        std::size_t steps = 0;
        for (const auto& queries : tuning_users) {
            Vector<T> u = users.row(kRareUser);
            auto acc = AdadeltaRow<T>::zeros(users.dim());
            for (const auto& tokens : queries) {
                nll += sequence_nll(model, u, std::span<const TokenId>(tokens));
                steps += tokens.size() - 1;
                if (tokens.size() > 2) online_update(model, u, acc, cfg, std::span<const TokenId>(tokens));
            }
        }
        const double ppl = std::exp(nll / static_cast<double>(steps));
        result.perplexities.emplace_back(lr, ppl);
        const bool better = ppl < best - 1e-12;
        const bool tie_smaller = std::abs(ppl - best) <= 1e-12 && lr < result.best_lr;
        if (better || tie_smaller) {
            best = std::min(best, ppl);
            result.best_lr = lr;
        }
    }
    return result;
}

#define QAC_INSTANTIATE_TRAIN(T)                                                                       \
    template struct AdamState<T>;                                                                      \
    template double sequence_gradient(const Model<T>&, const Vector<T>&, std::span<const TokenId>,     \
                                      Parameters<T>*, Vector<T>*, T);                                   \
    template GradientResult<T> compute_gradients(const Model<T>&, const UserEmbeddings<T>&,            \
                                                 std::span<const EncodedQuery>);                       \
    template void adam_step(AdamState<T>&, Parameters<T>&, UserEmbeddings<T>&, const GradientSet<T>&, \
                            double);                                                                   \
    template UserId spawn_user(UserEmbeddings<T>&, AdadeltaState<T>&);                                 \
    template void online_update(const Model<T>&, Vector<T>&, AdadeltaRow<T>&, const OnlineConfig&,    \
                                std::span<const TokenId>);                                             \
    template void online_update(const Model<T>&, UserEmbeddings<T>&, AdadeltaState<T>&, UserId,       \
                                std::span<const TokenId>);                                             \
    template TrainResult<T> train(const TrainConfig&, const ModelConfig&, std::span<const EncodedQuery>, \
                                  std::span<const EncodedQuery>, std::size_t,                          \
                                  const std::function<void(const EpochMetrics&)>&);                    \
    template OnlineLrTuning tune_online_lr(const Model<T>&, const UserEmbeddings<T>&,                  \
                                           std::span<const double>,                                    \
                                           std::span<const std::vector<std::vector<TokenId>>>,         \
                                           OnlineConfig);

QAC_INSTANTIATE_TRAIN(float)
QAC_INSTANTIATE_TRAIN(double)

}  // namespace qac
