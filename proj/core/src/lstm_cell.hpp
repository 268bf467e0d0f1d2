#pragma once

// Single-step LSTM cell shared by inference and backprop.

#include "qac/model.hpp"

namespace qac::detail {

template <typename T>
struct StepCache {
    Vector<T> z;           // [x; h_prev]
    Vector<T> normalized;  // pre-activations after normalization, before gain/bias (3h)
    Eigen::Matrix<T, kGateBlocks, 1> inv_std;
    Vector<T> input_gate;
    Vector<T> output_gate;
    Vector<T> candidate;
    Vector<T> c_prev;
    Vector<T> c;
    Vector<T> tanh_c;
    Vector<T> h;
};

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// Normalizes each h-block of `a` in place; writes the normalized values and
// per-block inverse std. Applies gain/bias afterwards.
template <typename T, typename Derived>
void layer_norm_blocks(const Model<T>& model, Eigen::MatrixBase<Derived>& a, Vector<T>* normalized,
                       Eigen::Matrix<T, kGateBlocks, 1>* inv_std) {
    const auto h = static_cast<Eigen::Index>(model.config.hidden);
    const T eps = static_cast<T>(model.config.ln_epsilon);
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(kGateBlocks); ++k) {
        auto block = a.segment(k * h, h);
        const T mean = block.mean();
        const T var = (block.array() - mean).square().mean();
        const T inv = T(1) / std::sqrt(var + eps);
        block = (block.array() - mean) * inv;
        if (normalized) normalized->segment(k * h, h) = block;
        if (inv_std) (*inv_std)(k) = inv;
    }
    a = a.cwiseProduct(model.params.ln_gain) + model.params.ln_bias;
}

template <typename T>
void cell_forward(const Model<T>& model, const RecurrentWeights<T>& weights, const Vector<T>& x,
                  const Vector<T>& h_prev, const Vector<T>& c_prev, StepCache<T>& cache) {
    const auto e = static_cast<Eigen::Index>(model.config.char_embedding);
    const auto h = static_cast<Eigen::Index>(model.config.hidden);
    cache.z.resize(e + h);
    cache.z.head(e) = x;
    cache.z.tail(h) = h_prev;
    Vector<T> a = weights.weight.transpose() * cache.z + weights.bias;
    if (model.config.layer_norm) {
        cache.normalized.resize(a.size());
        layer_norm_blocks(model, a, &cache.normalized, &cache.inv_std);
    }
    cache.input_gate = a.segment(0, h).unaryExpr([](T v) { return sigmoid(v); });
    cache.output_gate = a.segment(h, h).unaryExpr([](T v) { return sigmoid(v); });
    cache.candidate = a.segment(2 * h, h).array().tanh();
    cache.c_prev = c_prev;
    cache.c = (T(1) - cache.input_gate.array()) * c_prev.array() +
              cache.input_gate.array() * cache.candidate.array();
    cache.tanh_c = cache.c.array().tanh();
    cache.h = cache.output_gate.cwiseProduct(cache.tanh_c);
}

}  // namespace qac::detail
