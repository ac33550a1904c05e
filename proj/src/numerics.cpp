#include "prunekit/numerics.hpp"

#include <cmath>
#include <string>

namespace prunekit {

GramAccumulator::GramAccumulator(int dim) : dim_(dim) {
    if (dim <= 0) {
        throw ConfigError("GramAccumulator: dim must be positive");
    }
    gram_.assign(static_cast<size_t>(dim) * dim, 0.0);
    norms_sq_.assign(dim, 0.0);
}

void GramAccumulator::accumulate(const DenseMatrix & activations, std::span<const uint8_t> pad_mask,
                                 PadPolicy policy) {
    if (activations.rows != dim_) {
        throw ConfigError("GramAccumulator: activation feature count " +
                          std::to_string(activations.rows) + " does not match dim " +
                          std::to_string(dim_));
    }
    if (static_cast<int>(pad_mask.size()) != activations.cols) {
        throw ConfigError("GramAccumulator: pad mask length " + std::to_string(pad_mask.size()) +
                          " does not match token count " + std::to_string(activations.cols));
    }

    const int n_tokens = activations.cols;
    const bool drop_pads = policy == PadPolicy::exclude_pads;

    std::vector<int> kept;
    kept.reserve(n_tokens);
    for (int t = 0; t < n_tokens; t++) {
        if (!drop_pads || pad_mask[t] == 0) {
            kept.push_back(t);
        }
    }

    // Per-batch contributions are computed once per (i, j) pair and added
    // to both mirror entries; the diagonal contribution is reused for
    // norms_sq so the two sums stay bit-identical.
    for (int i = 0; i < dim_; i++) {
        const float * ri = activations.row(i);
        for (int j = i; j < dim_; j++) {
            const float * rj = activations.row(j);
            double contrib = 0.0;
            for (int t : kept) {
                contrib += static_cast<double>(ri[t]) * static_cast<double>(rj[t]);
            }
            gram_[static_cast<size_t>(i) * dim_ + j] += contrib;
            if (i != j) {
                gram_[static_cast<size_t>(j) * dim_ + i] += contrib;
            } else {
                norms_sq_[i] += contrib;
            }
        }
    }
    tokens_seen_ += kept.size();
}

DenseMatrix GramAccumulator::dampen(double eps) const {
    if (eps <= 0.0) {
        throw ConfigError("dampen: eps must be positive");
    }
    if (tokens_seen_ == 0) {
        throw ConfigError("dampen: no tokens accumulated");
    }
    double mean_diag = 0.0;
    for (int i = 0; i < dim_; i++) {
        mean_diag += gram_[static_cast<size_t>(i) * dim_ + i];
    }
    mean_diag /= dim_;

    const double lambda = mean_diag > 0.0 ? eps * mean_diag : eps;

    DenseMatrix h(dim_, dim_);
    for (int i = 0; i < dim_; i++) {
        for (int j = 0; j < dim_; j++) {
            double v = gram_[static_cast<size_t>(i) * dim_ + j];
            if (i == j) {
                v += lambda;
            }
            h.at(i, j) = static_cast<float>(v);
        }
    }
    return h;
}

std::vector<float> GramAccumulator::feature_norms() const {
    std::vector<float> norms(dim_);
    for (int i = 0; i < dim_; i++) {
        norms[i] = static_cast<float>(std::sqrt(norms_sq_[i]));
    }
    return norms;
}

static void check_square_symmetric(const DenseMatrix & a) {
    if (a.rows != a.cols || a.rows == 0) {
        throw ConfigError("cholesky: matrix must be square and non-empty");
    }
    double max_abs = 0.0;
    for (float v : a.data) {
        max_abs = std::max(max_abs, static_cast<double>(std::fabs(v)));
    }
    const double tol = 1e-6 * std::max(max_abs, 1e-30);
    for (int i = 0; i < a.rows; i++) {
        for (int j = i + 1; j < a.cols; j++) {
            if (std::fabs(static_cast<double>(a.at(i, j)) - static_cast<double>(a.at(j, i))) > tol) {
                throw ConfigError("cholesky: matrix is not symmetric within 1e-6 relative");
            }
        }
    }
}

DenseMatrix cholesky(const DenseMatrix & a) {
    check_square_symmetric(a);
    const int n = a.rows;

    // Cholesky-Banachiewicz over a 64-bit working copy.
    std::vector<double> w(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; i++) {
        for (int j = 0; j <= i; j++) {
            double s = static_cast<double>(a.at(i, j));
            for (int k = 0; k < j; k++) {
                s -= w[static_cast<size_t>(i) * n + k] * w[static_cast<size_t>(j) * n + k];
            }
            if (i == j) {
                if (s <= 0.0) {
                    throw NumericError("cholesky: not positive definite (pivot " +
                                       std::to_string(i) + ")");
                }
                w[static_cast<size_t>(i) * n + j] = std::sqrt(s);
            } else {
                w[static_cast<size_t>(i) * n + j] = s / w[static_cast<size_t>(j) * n + j];
            }
        }
    }

    DenseMatrix l(n, n);
    for (int i = 0; i < n; i++) {
        for (int j = 0; j <= i; j++) {
            l.at(i, j) = static_cast<float>(w[static_cast<size_t>(i) * n + j]);
        }
    }
    return l;
}

DenseMatrix spd_inverse(const DenseMatrix & a) {
    const DenseMatrix l = cholesky(a);
    const int n = a.rows;

    // M = L^{-1} by forward substitution, 64-bit.
    std::vector<double> ld(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; i++) {
        for (int j = 0; j <= i; j++) {
            ld[static_cast<size_t>(i) * n + j] = static_cast<double>(l.at(i, j));
        }
    }
    std::vector<double> m(static_cast<size_t>(n) * n, 0.0);
    for (int col = 0; col < n; col++) {
        for (int i = col; i < n; i++) {
            double s = i == col ? 1.0 : 0.0;
            for (int k = col; k < i; k++) {
                s -= ld[static_cast<size_t>(i) * n + k] * m[static_cast<size_t>(k) * n + col];
            }
            m[static_cast<size_t>(i) * n + col] = s / ld[static_cast<size_t>(i) * n + i];
        }
    }

    // A^{-1} = M^T M; computing the lower half and mirroring keeps the
    // result exactly symmetric.
    DenseMatrix inv(n, n);
    for (int i = 0; i < n; i++) {
        for (int j = 0; j <= i; j++) {
            double s = 0.0;
            for (int k = i; k < n; k++) { // M is lower triangular: M_ki = 0 for k < i
                s += m[static_cast<size_t>(k) * n + i] * m[static_cast<size_t>(k) * n + j];
            }
            const float v = static_cast<float>(s);
            inv.at(i, j) = v;
            inv.at(j, i) = v;
        }
    }
    return inv;
}

} // namespace prunekit
