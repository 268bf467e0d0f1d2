#include "qac/model.hpp"

#include <atomic>
#include <random>

#include "lstm_cell.hpp"
#include "qac/errors.hpp"

namespace qac {

namespace {

std::atomic<std::uint64_t> g_adaptations{0};

template <typename T>
void fill_uniform(Eigen::DenseBase<T>& target, double scale, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (Eigen::Index j = 0; j < target.cols(); ++j) {
        for (Eigen::Index i = 0; i < target.rows(); ++i) {
            target(i, j) = static_cast<typename T::Scalar>(dist(rng));
        }
    }
}

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

template <typename T, typename M>
TensorView<T> view(std::string_view name, M& m, std::vector<std::size_t> shape) {
    return TensorView<T>{name, std::span<T>(m.data(), static_cast<std::size_t>(m.size())), std::move(shape)};
}

template <typename T, typename P>
std::vector<TensorView<T>> collect(P& p) {
    std::vector<TensorView<T>> out;
    auto add = [&](std::string_view name, auto& m, std::vector<std::size_t> shape) {
        if (m.size() > 0) out.push_back(view<T>(name, m, std::move(shape)));
    };
    auto dims = [](const auto& m) {
        return std::vector<std::size_t>{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    };
    add("E", p.char_embedding, dims(p.char_embedding));
    add("W", p.recurrent, dims(p.recurrent));
    add("b", p.recurrent_bias, {static_cast<std::size_t>(p.recurrent_bias.size())});
    add("V", p.bias_adaptation, dims(p.bias_adaptation));
    add("Z_L", p.left_bases, dims(p.left_bases));
    add("Z_R", p.right_bases, dims(p.right_bases));
    add("ln_gain", p.ln_gain, {static_cast<std::size_t>(p.ln_gain.size())});
    add("ln_bias", p.ln_bias, {static_cast<std::size_t>(p.ln_bias.size())});
    add("P", p.output, dims(p.output));
    add("p_bias", p.output_bias, {static_cast<std::size_t>(p.output_bias.size())});
    return out;
}

}  // namespace

std::string_view to_string(Variant variant) {
    switch (variant) {
        case Variant::kUnadapted: return "unadapted";
        case Variant::kConcat: return "concat";
        case Variant::kFactor: return "factor";
    }
    return "unknown";
}

Variant parse_variant(std::string_view name) {
    if (name == "unadapted") return Variant::kUnadapted;
    if (name == "concat" || name == "concatcell") return Variant::kConcat;
    if (name == "factor" || name == "factorcell") return Variant::kFactor;
    throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
    if (char_embedding < 1 || hidden < 1 || user_embedding < 1) {
        throw ConfigError("e, h and m must all be >= 1");
    }
    if (vocab_size <= Vocabulary::kSpecialCount) throw ConfigError("vocab_size too small");
    if (!(ln_epsilon > 0.0)) throw ConfigError("ln_epsilon must be positive");
    if (float_width != 32 && float_width != 64) throw ConfigError("float_width must be 32 or 64");
}

template <typename T>
Parameters<T> Parameters<T>::zeros_like() const {
    Parameters z;
    z.char_embedding = Matrix<T>::Zero(char_embedding.rows(), char_embedding.cols());
    z.recurrent = Matrix<T>::Zero(recurrent.rows(), recurrent.cols());
    z.recurrent_bias = Vector<T>::Zero(recurrent_bias.size());
    z.bias_adaptation = Matrix<T>::Zero(bias_adaptation.rows(), bias_adaptation.cols());
    z.left_bases = Matrix<T>::Zero(left_bases.rows(), left_bases.cols());
    z.right_bases = Matrix<T>::Zero(right_bases.rows(), right_bases.cols());
    z.ln_gain = Vector<T>::Zero(ln_gain.size());
    z.ln_bias = Vector<T>::Zero(ln_bias.size());
    z.output = Matrix<T>::Zero(output.rows(), output.cols());
    z.output_bias = Vector<T>::Zero(output_bias.size());
    return z;
}

template <typename T>
std::vector<TensorView<T>> tensors(Parameters<T>& params) {
    return collect<T>(params);
}

template <typename T>
std::vector<TensorView<const T>> tensors(const Parameters<T>& params) {
    return collect<const T>(params);
}

template <typename T>
UserEmbeddings<T>::UserEmbeddings(std::size_t users, std::size_t dim)
    : dim_(dim), rows_(users, Vector<T>::Zero(idx(dim))) {}

template <typename T>
Vector<T>& UserEmbeddings<T>::row(UserId id) {
    if (!contains(id)) throw LookupError("unknown user id " + std::to_string(id));
    return rows_[id - 1];
}

template <typename T>
const Vector<T>& UserEmbeddings<T>::row(UserId id) const {
    if (!contains(id)) throw LookupError("unknown user id " + std::to_string(id));
    return rows_[id - 1];
}

template <typename T>
UserId UserEmbeddings<T>::append(Vector<T> u) {
    if (static_cast<std::size_t>(u.size()) != dim_) throw DimensionError("user embedding size mismatch");
    rows_.push_back(std::move(u));
    return static_cast<UserId>(rows_.size());
}

template <typename T>
bool UserEmbeddings<T>::operator==(const UserEmbeddings& other) const {
    if (dim_ != other.dim_ || rows_.size() != other.rows_.size()) return false;
    for (std::size_t i = 0; i < rows_.size(); ++i) {
        if (rows_[i] != other.rows_[i]) return false;
    }
    return true;
}

template <typename T>
std::pair<Model<T>, UserEmbeddings<T>> init_parameters(const ModelConfig& config,
                                                       std::size_t user_count, std::uint64_t seed) {
    config.validate();
    if (user_count < 1) throw ConfigError("user table needs the rare-user row");
    const auto e = idx(config.char_embedding);
    const auto h = idx(config.hidden);
    const auto m = idx(config.user_embedding);
    const auto r = idx(config.rank);
    const auto v = idx(config.vocab_size);
    const auto in = e + h;
    const auto g = idx(config.gate_width());

    std::mt19937_64 rng(seed);
    Model<T> model{config, {}};
    auto& p = model.params;
    p.char_embedding.resize(v, e);
    fill_uniform(p.char_embedding, 1.0 / std::sqrt(static_cast<double>(v)), rng);
    p.recurrent.resize(in, g);
    fill_uniform(p.recurrent, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    p.recurrent_bias = Vector<T>::Zero(g);
    if (config.has_bias_adaptation()) p.bias_adaptation = Matrix<T>::Zero(m, g);
    if (config.has_low_rank_adaptation()) {
        p.left_bases.resize(in, r * m);
        fill_uniform(p.left_bases, 1.0 / std::sqrt(static_cast<double>(in)), rng);
        p.right_bases = Matrix<T>::Zero(r, g * m);
    }
    p.ln_gain = Vector<T>::Ones(g);
    p.ln_bias = Vector<T>::Zero(g);
    p.output.resize(h, v);
    fill_uniform(p.output, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    p.output_bias = Vector<T>::Zero(v);

    UserEmbeddings<T> users(user_count, config.user_embedding);
    if (config.variant != Variant::kUnadapted) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(m));
        std::uniform_real_distribution<double> dist(-scale, scale);
        for (UserId id = 1; id <= user_count; ++id) {
            auto& row = users.row(id);
            for (Eigen::Index i = 0; i < m; ++i) row(i) = static_cast<T>(dist(rng));
        }
    }
    return {std::move(model), std::move(users)};
}

std::uint64_t adaptation_computations() { return g_adaptations.load(std::memory_order_relaxed); }

template <typename T>
Matrix<T> compute_adaptation(const Vector<T>& u, const Matrix<T>& left_bases,
                             const Matrix<T>& right_bases) {
    const auto m = u.size();
    const auto r = right_bases.rows();
    if (m == 0 || left_bases.cols() != r * m || right_bases.cols() % m != 0) {
        throw DimensionError("bases tensors do not match user embedding size");
    }
    const auto g = right_bases.cols() / m;
    g_adaptations.fetch_add(1, std::memory_order_relaxed);
    Matrix<T> left = Matrix<T>::Zero(left_bases.rows(), r);
    Matrix<T> right = Matrix<T>::Zero(r, g);
    for (Eigen::Index i = 0; i < m; ++i) {
        left.noalias() += u(i) * left_bases.middleCols(i * r, r);
        right.noalias() += u(i) * right_bases.middleCols(i * g, g);
    }
    return left * right;
}

template <typename T>
RecurrentWeights<T> adapted_recurrent_weights(const Model<T>& model, const Vector<T>& u) {
    const auto& cfg = model.config;
    const auto& p = model.params;
    RecurrentWeights<T> out{p.recurrent, p.recurrent_bias};
    if (cfg.variant == Variant::kUnadapted) return out;
    if (static_cast<std::size_t>(u.size()) != cfg.user_embedding) {
        throw DimensionError("user embedding has wrong size");
    }
    if (cfg.has_bias_adaptation()) {
        if (p.bias_adaptation.size() == 0) throw ConfigError("variant requires bias adaptation V");
        out.bias.noalias() += p.bias_adaptation.transpose() * u;
    }
    if (cfg.has_low_rank_adaptation()) {
        if (p.left_bases.size() == 0 || p.right_bases.size() == 0) {
            throw ConfigError("factor variant requires Z_L and Z_R");
        }
        out.weight += compute_adaptation(u, p.left_bases, p.right_bases);
    }
    return out;
}

template <typename T>
LstmState<T> lstm_step(const Model<T>& model, const RecurrentWeights<T>& weights,
                       const LstmState<T>& state, const Vector<T>& x) {
    if (!x.allFinite() || !state.h.allFinite() || !state.c.allFinite()) {
        throw NumericError("non-finite input to lstm_step");
    }
    if (static_cast<std::size_t>(x.size()) != model.config.char_embedding ||
        static_cast<std::size_t>(state.h.size()) != model.config.hidden) {
        throw DimensionError("lstm_step input shapes do not match the model");
    }
    detail::StepCache<T> cache;
    detail::cell_forward(model, weights, x, state.h, state.c, cache);
    return {std::move(cache.h), std::move(cache.c)};
}

template <typename T>
void lstm_step_batch(const Model<T>& model, const RecurrentWeights<T>& weights,
                     const Matrix<T>& inputs, Matrix<T>& h, Matrix<T>& c) {
    const auto n = inputs.rows();
    const auto e = idx(model.config.char_embedding);
    const auto hd = idx(model.config.hidden);
    Matrix<T> z(n, e + hd);
    z.leftCols(e) = inputs;
    z.rightCols(hd) = h;
    Matrix<T> a = z * weights.weight;
    a.rowwise() += weights.bias.transpose();
    if (model.config.layer_norm) {
        const T eps = static_cast<T>(model.config.ln_epsilon);
        for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(kGateBlocks); ++k) {
            auto block = a.middleCols(k * hd, hd);
            const Vector<T> mean = block.rowwise().mean();
            block.colwise() -= mean;
            const Vector<T> inv =
                ((block.array().square().rowwise().sum() / static_cast<T>(hd)) + eps).rsqrt();
            block = inv.asDiagonal() * block;
        }
        a = (a.array().rowwise() * model.params.ln_gain.transpose().array()).matrix();
        a.rowwise() += model.params.ln_bias.transpose();
    }
    const auto i = a.middleCols(0, hd).array().unaryExpr([](T v) { return detail::sigmoid(v); }).eval();
    const auto o = a.middleCols(hd, hd).array().unaryExpr([](T v) { return detail::sigmoid(v); }).eval();
    const auto g = a.middleCols(2 * hd, hd).array().tanh().eval();
    c = ((T(1) - i) * c.array() + i * g).matrix();
    h = (o * c.array().tanh()).matrix();
}

template <typename T>
Matrix<T> forward_logits(const Model<T>& model, const RecurrentWeights<T>& weights,
                         std::span<const TokenId> tokens) {
    if (tokens.size() < 2 || tokens.front() != Vocabulary::kStart || tokens.back() != Vocabulary::kStop) {
        throw ArgumentError("token sequence must start with START and end with STOP");
    }
    const auto& p = model.params;
    const auto steps = idx(tokens.size() - 1);
    Matrix<T> logits(steps, p.output.cols());
    auto state = LstmState<T>::zeros(model.config.hidden);
    detail::StepCache<T> cache;
    for (Eigen::Index t = 0; t < steps; ++t) {
        const auto token = tokens[static_cast<std::size_t>(t)];
        if (token < 0 || token >= p.char_embedding.rows()) throw LookupError("token id out of range");
        detail::cell_forward(model, weights, Vector<T>(p.char_embedding.row(token).transpose()), state.h,
                             state.c, cache);
        state.h = cache.h;
        state.c = cache.c;
        logits.row(t) = (p.output.transpose() * state.h + p.output_bias).transpose();
    }
    return logits;
}

template <typename T>
Matrix<T> forward_logits(const Model<T>& model, const Vector<T>& u, std::span<const TokenId> tokens) {
    return forward_logits(model, adapted_recurrent_weights(model, u), tokens);
}

template <typename T>
Matrix<T> forward_logits(const Model<T>& model, const UserEmbeddings<T>& users, UserId user,
                         std::span<const TokenId> tokens) {
    return forward_logits(model, users.row(user), tokens);
}

template <typename T>
double sequence_nll(const Model<T>& model, const RecurrentWeights<T>& weights,
                    std::span<const TokenId> tokens) {
    const auto logits = forward_logits(model, weights, tokens);
    double nll = 0.0;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const auto target = tokens[static_cast<std::size_t>(t) + 1];
        nll -= log_softmax(logits.row(t).transpose())(target);
    }
    return nll;
}

template <typename T>
double sequence_nll(const Model<T>& model, const Vector<T>& u, std::span<const TokenId> tokens) {
    return sequence_nll(model, adapted_recurrent_weights(model, u), tokens);
}

template <typename T>
double sequence_nll(const Model<T>& model, const UserEmbeddings<T>& users, UserId user,
                    std::span<const TokenId> tokens) {
    return sequence_nll(model, users.row(user), tokens);
}

template <typename T>
double perplexity(const Model<T>& model, const UserEmbeddings<T>& users,
                  std::span<const EncodedQuery> dataset) {
    if (dataset.empty()) throw ArgumentError("perplexity of an empty dataset");
    // Neumaier summation: long datasets otherwise drift by many ulps.
    double total = 0.0;
    double carry = 0.0;
    std::size_t steps = 0;
    for (const auto& q : dataset) {
        const double x = sequence_nll(model, users, q.user, q.tokens);
        const double t = total + x;
        carry += std::abs(total) >= std::abs(x) ? (total - t) + x : (x - t) + total;
        total = t;
        steps += q.tokens.size() - 1;
    }
    return std::exp((total + carry) / static_cast<double>(steps));
}

#define QAC_INSTANTIATE_MODEL(T)                                                                     \
    template struct Parameters<T>;                                                                   \
    template class UserEmbeddings<T>;                                                                \
    template std::vector<TensorView<T>> tensors(Parameters<T>&);                                     \
    template std::vector<TensorView<const T>> tensors(const Parameters<T>&);                         \
    template std::pair<Model<T>, UserEmbeddings<T>> init_parameters<T>(const ModelConfig&,           \
                                                                       std::size_t, std::uint64_t);  \
    template Matrix<T> compute_adaptation(const Vector<T>&, const Matrix<T>&, const Matrix<T>&);    \
    template RecurrentWeights<T> adapted_recurrent_weights(const Model<T>&, const Vector<T>&);       \
    template LstmState<T> lstm_step(const Model<T>&, const RecurrentWeights<T>&, const LstmState<T>&, \
                                    const Vector<T>&);                                               \
    template void lstm_step_batch(const Model<T>&, const RecurrentWeights<T>&, const Matrix<T>&,     \
                                  Matrix<T>&, Matrix<T>&);                                           \
    template Matrix<T> forward_logits(const Model<T>&, const RecurrentWeights<T>&,                   \
                                      std::span<const TokenId>);                                     \
    template Matrix<T> forward_logits(const Model<T>&, const Vector<T>&, std::span<const TokenId>);  \
    template Matrix<T> forward_logits(const Model<T>&, const UserEmbeddings<T>&, UserId,             \
                                      std::span<const TokenId>);                                     \
    template double sequence_nll(const Model<T>&, const RecurrentWeights<T>&, std::span<const TokenId>); \
    template double sequence_nll(const Model<T>&, const Vector<T>&, std::span<const TokenId>);       \
    template double sequence_nll(const Model<T>&, const UserEmbeddings<T>&, UserId,                  \
                                 std::span<const TokenId>);                                          \
    template double perplexity(const Model<T>&, const UserEmbeddings<T>&, std::span<const EncodedQuery>);

QAC_INSTANTIATE_MODEL(float)
QAC_INSTANTIATE_MODEL(double)

}  // namespace qac
