#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "qac/corpus.hpp"

namespace qac {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// How the recurrent layer is conditioned on the user embedding.
enum class Variant {
    kUnadapted,  // no personalization
    kConcat,     // bias shift b + Vu
    kFactor,     // low-rank weight shift W + A(u), plus Vu
};

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view name);

// Coupled input/forget gates leave three gate blocks: input, output, candidate.
inline constexpr std::size_t kGateBlocks = 3;

struct ModelConfig {
    Variant variant = Variant::kFactor;
    std::size_t char_embedding = 24;  // e
    std::size_t hidden = 300;         // h
    std::size_t user_embedding = 20;  // m
    std::size_t rank = 40;            // r
    std::size_t vocab_size = 79;
    double ln_epsilon = 1e-5;
    int float_width = 32;
    bool layer_norm = true;
    // FactorCell also applies the ConcatCell bias shift Vu when set.
    bool factor_bias_adaptation = true;

    std::size_t input_width() const { return char_embedding + hidden; }
    std::size_t gate_width() const { return kGateBlocks * hidden; }
    bool has_bias_adaptation() const {
        return variant == Variant::kConcat ||
               (variant == Variant::kFactor && factor_bias_adaptation);
    }
    bool has_low_rank_adaptation() const { return variant == Variant::kFactor && rank > 0; }

    // Throws ConfigError.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// All trainable tensors except the user embeddings. Tensors a variant does not
// use are empty.
template <typename T>
struct Parameters {
    Matrix<T> char_embedding;   // E: vocab x e
    Matrix<T> recurrent;        // W: (e+h) x 3h
    Vector<T> recurrent_bias;   // b: 3h
    Matrix<T> bias_adaptation;  // V: m x 3h
    // Z_L stored as (e+h) x (r*m); columns [i*r, (i+1)*r) hold the slice for user dim i.
    Matrix<T> left_bases;
    // Z_R stored as r x (3h*m); columns [i*3h, (i+1)*3h) hold the slice for user dim i.
    Matrix<T> right_bases;
    Vector<T> ln_gain;          // 3h, one h-block per gate
    Vector<T> ln_bias;          // 3h
    Matrix<T> output;           // P: h x vocab
    Vector<T> output_bias;      // vocab

    // Same shapes, all zeros.
    Parameters zeros_like() const;
};

template <typename T>
struct TensorView {
    std::string_view name;
    std::span<T> data;
    std::vector<std::size_t> shape;
};

// Every non-empty tensor in a fixed order: E, W, b, V, Z_L, Z_R, ln_gain, ln_bias, P, p_bias.
template <typename T>
std::vector<TensorView<T>> tensors(Parameters<T>& params);
template <typename T>
std::vector<TensorView<const T>> tensors(const Parameters<T>& params);

template <typename T>
struct Model {
    ModelConfig config;
    Parameters<T> params;
};

// U: one row per user id, 1-based; row 1 is the rare-user / cold-start embedding.
template <typename T>
class UserEmbeddings {
public:
    UserEmbeddings() = default;
    UserEmbeddings(std::size_t users, std::size_t dim);

    std::size_t size() const { return rows_.size(); }
    std::size_t dim() const { return dim_; }
    bool contains(UserId id) const { return id >= 1 && id <= rows_.size(); }

    Vector<T>& row(UserId id);
    const Vector<T>& row(UserId id) const;

    UserId append(Vector<T> u);

    bool operator==(const UserEmbeddings& other) const;

private:
    std::size_t dim_ = 0;
    std::vector<Vector<T>> rows_;
};

template <typename T>
struct LstmState {
    Vector<T> h;
    Vector<T> c;

    static LstmState zeros(std::size_t hidden) {
        return {Vector<T>::Zero(static_cast<Eigen::Index>(hidden)),
                Vector<T>::Zero(static_cast<Eigen::Index>(hidden))};
    }
};

// Effective recurrent weights for one user: W' = W + A(u), b' = b + Vu as the
// variant dictates.
template <typename T>
struct RecurrentWeights {
    Matrix<T> weight;
    Vector<T> bias;
};

// Tokens of one query tagged with the user who issued it.
struct EncodedQuery {
    UserId user = kRareUser;
    std::vector<TokenId> tokens;
};

// Uniform(-1/sqrt(fan_in), +) for E, W, P, U and Z_L; zeros for b, p_bias, V, Z_R;
// LN gain 1, bias 0. A(u) = 0 and Vu = 0 for every user at init.
template <typename T>
std::pair<Model<T>, UserEmbeddings<T>> init_parameters(const ModelConfig& config,
                                                       std::size_t user_count, std::uint64_t seed);

// A = (u x1 Z_L)(Z_R x3 u). Each call bumps adaptation_computations().
template <typename T>
Matrix<T> compute_adaptation(const Vector<T>& u, const Matrix<T>& left_bases,
                             const Matrix<T>& right_bases);

// Process-wide count of compute_adaptation calls (instrumentation).
std::uint64_t adaptation_computations();

template <typename T>
RecurrentWeights<T> adapted_recurrent_weights(const Model<T>& model, const Vector<T>& u);

template <typename T>
LstmState<T> lstm_step(const Model<T>& model, const RecurrentWeights<T>& weights,
                       const LstmState<T>& state, const Vector<T>& x);

// Row-batched step: row k of `inputs`, `h`, `c` is one sequence. `h` and `c`
// are updated in place.
template <typename T>
void lstm_step_batch(const Model<T>& model, const RecurrentWeights<T>& weights,
                     const Matrix<T>& inputs, Matrix<T>& h, Matrix<T>& c);

// (len-1) x vocab; row t predicts tokens[t+1].
template <typename T>
Matrix<T> forward_logits(const Model<T>& model, const RecurrentWeights<T>& weights,
                         std::span<const TokenId> tokens);
template <typename T>
Matrix<T> forward_logits(const Model<T>& model, const Vector<T>& u, std::span<const TokenId> tokens);
template <typename T>
Matrix<T> forward_logits(const Model<T>& model, const UserEmbeddings<T>& users, UserId user,
                         std::span<const TokenId> tokens);

// Summed negative log-likelihood in nats.
template <typename T>
double sequence_nll(const Model<T>& model, const RecurrentWeights<T>& weights,
                    std::span<const TokenId> tokens);
template <typename T>
double sequence_nll(const Model<T>& model, const Vector<T>& u, std::span<const TokenId> tokens);
template <typename T>
double sequence_nll(const Model<T>& model, const UserEmbeddings<T>& users, UserId user,
                    std::span<const TokenId> tokens);

template <typename T>
double perplexity(const Model<T>& model, const UserEmbeddings<T>& users,
                  std::span<const EncodedQuery> dataset);

// log-softmax of one logit row, accumulated in double.
template <typename Derived>
Eigen::VectorXd log_softmax(const Eigen::MatrixBase<Derived>& logits) {
    const Eigen::VectorXd z = logits.template cast<double>();
    const double top = z.maxCoeff();
    const double lse = top + std::log((z.array() - top).exp().sum());
    return z.array() - lse;
}

}  // namespace qac
