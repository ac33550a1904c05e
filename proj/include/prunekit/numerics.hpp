#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prunekit/matrix.hpp"

namespace prunekit {

enum class PadPolicy {
    include_pads,
    exclude_pads, // default: PAD columns contribute nothing to statistics
};

// Running sum of X * X^T over calibration batches, plus the per-feature
// sum of squared activations (the Gram diagonal, kept as a separate
// running sum with identical summation order). Sums are held in 64-bit;
// matrices handed out are 32-bit.
class GramAccumulator {
public:
    explicit GramAccumulator(int dim);

    // Folds one batch of activations (features x tokens) into the sums.
    // Columns whose pad flag is set are dropped when the policy is
    // exclude_pads. Batches must be fed in a fixed order; entries are
    // updated symmetrically so gram stays exactly symmetric.
    void accumulate(const DenseMatrix & activations, std::span<const uint8_t> pad_mask,
                    PadPolicy policy = PadPolicy::exclude_pads);

    // H = gram + lambda * I with lambda = eps * mean(diag(gram)); when the
    // diagonal is all zero, lambda falls back to eps itself so H is still
    // positive definite.
    DenseMatrix dampen(double eps) const;

    int dim() const { return dim_; }
    uint64_t tokens_seen() const { return tokens_seen_; }
    double gram_at(int i, int j) const { return gram_[static_cast<size_t>(i) * dim_ + j]; }
    std::span<const double> norms_sq() const { return norms_sq_; }

    // Per-feature l2 norms over the kept tokens: sqrt of the running
    // squared sums.
    std::vector<float> feature_norms() const;

private:
    int dim_ = 0;
    std::vector<double> gram_;     // dim x dim, exactly symmetric
    std::vector<double> norms_sq_; // == diag(gram) by construction
    uint64_t tokens_seen_ = 0;
};

// Cholesky factorization A = L * L^T for symmetric positive definite A.
// 64-bit accumulation, 32-bit result. Throws NumericError naming the
// failing pivot when A is not positive definite, ConfigError when A is
// not square or not symmetric within 1e-6 relative.
DenseMatrix cholesky(const DenseMatrix & a);

// A^{-1} for symmetric positive definite A, via the Cholesky factor and
// triangular solves. The result is exactly symmetric by construction.
DenseMatrix spd_inverse(const DenseMatrix & a);

} // namespace prunekit
