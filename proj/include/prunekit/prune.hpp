#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prunekit/matrix.hpp"
#include "prunekit/model.hpp"
#include "prunekit/numerics.hpp"
#include "prunekit/tokenizer.hpp"

namespace prunekit {

enum class PruneMethod {
    magnitude,
    wanda,
    sparsegpt,
};

enum class TieRule {
    lowest_index_first, // exact score ties prune the lower column index
};

struct PruneConfig {
    PruneMethod method = PruneMethod::wanda;
    double sparsity = 0.5;        // fraction of weights zeroed, in [0, 1)
    double eps = 0.01;            // Hessian dampening fraction
    int block_size = 128;         // SparseGPT column block width
    TieRule tie_rule = TieRule::lowest_index_first;
    PadPolicy pad_policy = PadPolicy::exclude_pads;
    bool frozen_dense_acts = false; // ablation: keep capturing from the dense model
    uint64_t seed = 0;

    void validate() const;
};

// Per-entry keep flags; each row of an unstructured mask at sparsity p
// has exactly round(p * cols) zeros (round half to even).
struct PruneMask {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> keep;

    PruneMask() = default;
    PruneMask(int r, int c) : rows(r), cols(c), keep(static_cast<size_t>(r) * c, 1) {}

    bool kept(int r, int c) const { return keep[static_cast<size_t>(r) * cols + c] != 0; }
    void prune(int r, int c) { keep[static_cast<size_t>(r) * cols + c] = 0; }
    int zeros_in_row(int r) const;
};

// Number of entries a row of `width` columns loses at sparsity p:
// nearest integer, ties to even.
int row_zero_count(double sparsity, int width);

// Wanda: S_ij = |W_ij| * ||X_j||_2, elementwise in 32-bit.
DenseMatrix wanda_scores(const DenseMatrix & w, std::span<const float> feature_norms);

// SparseGPT: S_ij = W_ij^2 / diag((X X^T + lambda I)^{-1})_j.
DenseMatrix sparsegpt_scores(const DenseMatrix & w, std::span<const float> hessian_inverse_diag);

// Per-row selection of the lowest-scoring entries; ties prune the lower
// column index first.
PruneMask select_mask_per_row(const DenseMatrix & scores, double sparsity,
                              TieRule tie_rule = TieRule::lowest_index_first);

struct PrunedLayer {
    DenseMatrix weights;
    PruneMask mask;
};

// Magnitude baseline: select on |W| and zero, no updates.
PrunedLayer magnitude_prune(const DenseMatrix & w, double sparsity);

// SparseGPT engine: left-to-right column blocks; per block and row the
// round(p * block_width) lowest-scoring entries (scores recomputed from
// the evolving weights) are zeroed one column at a time, and each zeroed
// weight is compensated on the columns to its right with the OBS update
//   w_j <- w_j - (w_q / Hinv_qq) * Hinv_qj.
PrunedLayer sparsegpt_prune_update(const DenseMatrix & w, const DenseMatrix & hessian,
                                   double sparsity, int block_size);

struct LayerReport {
    std::string name;
    double achieved_sparsity = 0.0;
    double reconstruction_error = 0.0; // ||dW X||_F / ||W X||_F over kept calibration tokens
};

struct PruneReport {
    std::vector<LayerReport> layers;
    double global_sparsity = 0.0;
    double wall_seconds = 0.0;
    PruneConfig config;

    std::string to_json() const;
};

struct PruneResult {
    Checkpoint model;
    PruneReport report;
};

// Sequential layer-wise pruning: blocks are processed in order, each
// block's statistics are captured through the already-pruned earlier
// blocks (unless frozen_dense_acts), its linears are pruned and the
// weights installed before the next block is touched.
PruneResult prune_model(const Checkpoint & model, const std::vector<TokenSequence> & calib,
                        const PruneConfig & config);

struct OracleResult {
    std::vector<uint8_t> keep;
    std::vector<float> weights;
    double error = 0.0; // ||X^T (w - w_hat)||_2
};

// Exhaustive reference for one output row: enumerates every mask with
// keep_count kept entries, refits the kept weights by least squares and
// returns the global minimum. Refuses rows longer than 16.
OracleResult oracle_optimal_prune(std::span<const float> w_row, const DenseMatrix & x,
                                  int keep_count);

// Reconstruction error of a pruned row against the original on
// activations X (features x tokens): ||X^T (w - w_hat)||_2.
double row_reconstruction_error(std::span<const float> w, std::span<const float> w_hat,
                                const DenseMatrix & x);

} // namespace prunekit
