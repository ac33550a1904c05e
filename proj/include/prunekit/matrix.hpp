#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "prunekit/errors.hpp"

namespace prunekit {

// Row-major dense matrix of 32-bit floats. Carries weights, activations
// and scores throughout the toolkit.
struct DenseMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data; // length rows * cols

    DenseMatrix() = default;

    DenseMatrix(int r, int c, float fill = 0.0f)
        : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
        if (r < 0 || c < 0) {
            throw ConfigError("DenseMatrix: negative dimensions");
        }
    }

    static DenseMatrix identity(int n) {
        DenseMatrix m(n, n);
        for (int i = 0; i < n; i++) {
            m.at(i, i) = 1.0f;
        }
        return m;
    }

    float & at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    const float * row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    float * row(int r) { return data.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return data.size(); }

    bool all_finite() const {
        for (float v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }
};

inline double frobenius_norm(const DenseMatrix & m) {
    double s = 0.0;
    for (float v : m.data) {
        s += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(s);
}

// C = A * B. A is [m x k], B is [k x n], C is [m x n]. 32-bit arithmetic,
// k-middle loop so the inner loop runs contiguously over C and B rows.
void matmul_nn(float * c, const float * a, const float * b, int m, int k, int n);

// C = A * B^T. A is [m x k], B is [n x k], C is [m x n].
void matmul_nt(float * c, const float * a, const float * b, int m, int k, int n);

// C += A^T * B. A is [t x m], B is [t x n], C is [m x n]. Used for weight
// gradients (sum of per-token outer products).
void matmul_tn_acc(float * c, const float * a, const float * b, int t, int m, int n);

} // namespace prunekit
