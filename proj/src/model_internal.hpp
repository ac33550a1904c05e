#pragma once

// Shared forward-pass primitives for inference and training. Internal to
// the model translation units.

#include <cmath>
#include <cstdint>
#include <vector>

#include "prunekit/matrix.hpp"

namespace prunekit::detail {

constexpr float RMS_EPS = 1e-5f;

inline float silu(float x) {
    return x / (1.0f + std::exp(-x));
}

inline float silu_grad(float x) {
    const float s = 1.0f / (1.0f + std::exp(-x));
    return s * (1.0f + x * (1.0f - s));
}

// Sinusoidal position table, rows 0..max_len-1.
DenseMatrix make_position_table(int max_len, int d_model);

// h[t,:] = gain ⊙ x[t,:] * inv_rms[t]; inv_rms is returned for backward.
void rmsnorm_rows(const DenseMatrix & x, const float * gain, DenseMatrix & h,
                  std::vector<float> & inv_rms);

// Causal multi-head attention. q, k, v are [T x d_model] with heads laid
// out contiguously. PAD keys are masked away from non-PAD queries; PAD
// queries attend causally. When probs is non-null it receives the
// [n_heads * T x T] softmax rows for backward.
void attention_rows(const DenseMatrix & q, const DenseMatrix & k, const DenseMatrix & v,
                    int n_heads, const std::vector<uint8_t> & pad, DenseMatrix & out,
                    DenseMatrix * probs);

} // namespace prunekit::detail

namespace prunekit {

struct Checkpoint;

// Test hook: mean next-token NLL of one window (inputs = window minus the
// last id) and, when grads is non-null, the parameter gradients parallel
// to the checkpoint tensor list. Lets tests finite-difference the
// backward pass.
double loss_and_grads_for_test(const Checkpoint & model, const std::vector<int32_t> & window,
                               std::vector<DenseMatrix> * grads);

} // namespace prunekit
