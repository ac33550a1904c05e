#include "prunekit/prune.hpp"

#include <algorithm>
#include <chrono>
#include <cfenv>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "prunekit/errors.hpp"

namespace prunekit {

void PruneConfig::validate() const {
    if (sparsity < 0.0 || sparsity >= 1.0) {
        throw ConfigError("PruneConfig: sparsity must lie in [0, 1)");
    }
    if (eps <= 0.0) {
        throw ConfigError("PruneConfig: eps must be positive");
    }
    if (block_size < 1) {
        throw ConfigError("PruneConfig: block_size must be at least 1");
    }
}

int PruneMask::zeros_in_row(int r) const {
    int n = 0;
    for (int c = 0; c < cols; c++) {
        n += kept(r, c) ? 0 : 1;
    }
    return n;
}

int row_zero_count(double sparsity, int width) {
    // nearbyint under the default rounding mode is round-half-to-even
    const double raw = std::nearbyint(sparsity * static_cast<double>(width));
    return std::clamp(static_cast<int>(raw), 0, width);
}

// Scores are computed in 32-bit so independent straight-loop
// recomputations match bit for bit.
static inline float wanda_score(float w, float norm) {
    return std::fabs(w) * norm;
}

static inline float sparsegpt_score(float w, float hinv_diag) {
    return (w * w) / hinv_diag;
}

DenseMatrix wanda_scores(const DenseMatrix & w, std::span<const float> feature_norms) {
    if (static_cast<int>(feature_norms.size()) != w.cols) {
        throw ConfigError("wanda_scores: feature_norms length " +
                          std::to_string(feature_norms.size()) + " does not match " +
                          std::to_string(w.cols) + " columns");
    }
    DenseMatrix s(w.rows, w.cols);
    for (int i = 0; i < w.rows; i++) {
        for (int j = 0; j < w.cols; j++) {
            s.at(i, j) = wanda_score(w.at(i, j), feature_norms[j]);
        }
    }
    return s;
}

DenseMatrix sparsegpt_scores(const DenseMatrix & w, std::span<const float> hessian_inverse_diag) {
    if (static_cast<int>(hessian_inverse_diag.size()) != w.cols) {
        throw ConfigError("sparsegpt_scores: diagonal length does not match column count");
    }
    for (size_t j = 0; j < hessian_inverse_diag.size(); j++) {
        if (!(hessian_inverse_diag[j] > 0.0f)) {
            throw NumericError("sparsegpt_scores: non-positive inverse-Hessian diagonal at column " +
                               std::to_string(j) + " (dampening failed)");
        }
    }
    DenseMatrix s(w.rows, w.cols);
    for (int i = 0; i < w.rows; i++) {
        for (int j = 0; j < w.cols; j++) {
            s.at(i, j) = sparsegpt_score(w.at(i, j), hessian_inverse_diag[j]);
        }
    }
    return s;
}

// Lowest n_zero scores of one row, ties resolved toward lower column
// indices. Returns the pruned column indices.
static std::vector<int> lowest_columns(const float * scores, int cols, int n_zero) {
    std::vector<int> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [scores](int a, int b) {
        if (scores[a] != scores[b]) {
            return scores[a] < scores[b];
        }
        return a < b;
    });
    order.resize(n_zero);
    return order;
}

PruneMask select_mask_per_row(const DenseMatrix & scores, double sparsity, TieRule tie_rule) {
    (void)tie_rule; // a single rule exists; the parameter records the contract
    if (sparsity < 0.0 || sparsity >= 1.0) {
        throw ConfigError("select_mask_per_row: sparsity must lie in [0, 1)");
    }
    PruneMask mask(scores.rows, scores.cols);
    const int n_zero = row_zero_count(sparsity, scores.cols);
    for (int r = 0; r < scores.rows; r++) {
        for (int c : lowest_columns(scores.row(r), scores.cols, n_zero)) {
            mask.prune(r, c);
        }
    }
    return mask;
}

PrunedLayer magnitude_prune(const DenseMatrix & w, double sparsity) {
    DenseMatrix s(w.rows, w.cols);
    for (size_t i = 0; i < w.data.size(); i++) {
        s.data[i] = std::fabs(w.data[i]);
    }
    PrunedLayer out;
    out.mask = select_mask_per_row(s, sparsity);
    out.weights = w;
    for (int r = 0; r < w.rows; r++) {
        for (int c = 0; c < w.cols; c++) {
            if (!out.mask.kept(r, c)) {
                out.weights.at(r, c) = 0.0f;
            }
        }
    }
    return out;
}

// Solves the SPD system G z = b in 64-bit with a tiny ridge retry.
static std::vector<double> solve_spd_system(std::vector<double> g, std::vector<double> b, int n) {
    for (int attempt = 0; attempt < 2; attempt++) {
        std::vector<double> l(static_cast<size_t>(n) * n, 0.0);
        bool ok = true;
        for (int i = 0; i < n && ok; i++) {
            for (int j = 0; j <= i; j++) {
                double s = g[static_cast<size_t>(i) * n + j];
                for (int k = 0; k < j; k++) {
                    s -= l[static_cast<size_t>(i) * n + k] * l[static_cast<size_t>(j) * n + k];
                }
                if (i == j) {
                    if (s <= 0.0) {
                        ok = false;
                        break;
                    }
                    l[static_cast<size_t>(i) * n + j] = std::sqrt(s);
                } else {
                    l[static_cast<size_t>(i) * n + j] = s / l[static_cast<size_t>(j) * n + j];
                }
            }
        }
        if (!ok) {
            double mean_diag = 0.0;
            for (int i = 0; i < n; i++) {
                mean_diag += g[static_cast<size_t>(i) * n + i];
            }
            mean_diag = std::max(mean_diag / n, 1e-12);
            for (int i = 0; i < n; i++) {
                g[static_cast<size_t>(i) * n + i] += 1e-10 * mean_diag;
            }
            continue;
        }
        std::vector<double> y(n), z(n);
        for (int i = 0; i < n; i++) {
            double s = b[i];
            for (int k = 0; k < i; k++) {
                s -= l[static_cast<size_t>(i) * n + k] * y[k];
            }
            y[i] = s / l[static_cast<size_t>(i) * n + i];
        }
        for (int i = n - 1; i >= 0; i--) {
            double s = y[i];
            for (int k = i + 1; k < n; k++) {
                s -= l[static_cast<size_t>(k) * n + i] * z[k];
            }
            z[i] = s / l[static_cast<size_t>(i) * n + i];
        }
        return z;
    }
    throw NumericError("oracle_optimal_prune: least-squares system is singular");
}

PrunedLayer sparsegpt_prune_update(const DenseMatrix & w, const DenseMatrix & hessian,
                                   double sparsity, int block_size) {
    if (hessian.rows != w.cols || hessian.cols != w.cols) {
        throw ConfigError("sparsegpt_prune_update: Hessian dimension does not match columns");
    }
    if (sparsity < 0.0 || sparsity >= 1.0) {
        throw ConfigError("sparsegpt_prune_update: sparsity must lie in [0, 1)");
    }
    if (block_size < 1) {
        throw ConfigError("sparsegpt_prune_update: block_size must be at least 1");
    }

    // The column-wise process fixes each column once it is passed, so the
    // inverse entering scores and updates at column q is the one
    // conditioned on every column to its left. Those conditioned entries
    // come from the Cholesky factor of H^{-1}: with H^{-1} = L L^T, the
    // remaining-submatrix inverse has C_qq = L_qq^2 and C_qj = L_qq L_jq.
    const DenseMatrix hinv = spd_inverse(hessian);
    const DenseMatrix lfac = cholesky(hinv);
    const int rows = w.rows;
    const int cols = w.cols;

    PrunedLayer out;
    out.weights = w;
    out.mask = PruneMask(rows, cols);
    DenseMatrix & wm = out.weights;

    std::vector<uint8_t> marked(static_cast<size_t>(rows) * cols, 0);
    for (int c0 = 0; c0 < cols; c0 += block_size) {
        const int c1 = std::min(c0 + block_size, cols);
        const int bw = c1 - c0;
        const int n_zero = row_zero_count(sparsity, bw);
        if (n_zero == 0) {
            continue;
        }

        // Block mask from the evolving weights.
        std::vector<float> scores(static_cast<size_t>(bw));
        for (int r = 0; r < rows; r++) {
            for (int j = c0; j < c1; j++) {
                const float d = lfac.at(j, j) * lfac.at(j, j);
                if (!(d > 0.0f)) {
                    throw NumericError(
                        "sparsegpt_prune_update: non-positive inverse-Hessian diagonal at column " +
                        std::to_string(j));
                }
                scores[static_cast<size_t>(j - c0)] = sparsegpt_score(wm.at(r, j), d);
            }
            for (int c : lowest_columns(scores.data(), bw, n_zero)) {
                marked[static_cast<size_t>(r) * cols + (c0 + c)] = 1;
            }
        }

        // Column-wise zeroing with OBS compensation on the columns to the
        // right; 64-bit intermediates. The coefficient (w_q / C_qq) C_qj
        // simplifies to (w_q / L_qq) L_jq.
        for (int q = c0; q < c1; q++) {
            const double lq = static_cast<double>(lfac.at(q, q));
            for (int r = 0; r < rows; r++) {
                if (marked[static_cast<size_t>(r) * cols + q] == 0) {
                    continue;
                }
                const double coef = static_cast<double>(wm.at(r, q)) / lq;
                float * wr = wm.row(r);
                for (int j = q + 1; j < cols; j++) {
                    wr[j] = static_cast<float>(static_cast<double>(wr[j]) -
                                               coef * static_cast<double>(lfac.at(j, q)));
                }
                wr[q] = 0.0f;
                out.mask.prune(r, q);
            }
        }
    }

    // Close each row with the exact OBS solution for its whole mask: the
    // kept weights that minimize the dampened quadratic given the zeroed
    // set. The greedy column-wise compensation above steers the mask; the
    // joint solve removes its sequential slack, so zeroing the same mask
    // without updates can never do better.
    std::vector<int> kept_idx, pruned_idx;
    for (int r = 0; r < rows; r++) {
        kept_idx.clear();
        pruned_idx.clear();
        for (int c = 0; c < cols; c++) {
            (out.mask.kept(r, c) ? kept_idx : pruned_idx).push_back(c);
        }
        if (pruned_idx.empty() || kept_idx.empty()) {
            continue;
        }
        const int nk = static_cast<int>(kept_idx.size());
        std::vector<double> hkk(static_cast<size_t>(nk) * nk);
        std::vector<double> rhs(static_cast<size_t>(nk));
        for (int a = 0; a < nk; a++) {
            for (int b = 0; b < nk; b++) {
                hkk[static_cast<size_t>(a) * nk + b] =
                    static_cast<double>(hessian.at(kept_idx[a], kept_idx[b]));
            }
            double s = 0.0;
            for (int p : pruned_idx) {
                s += static_cast<double>(hessian.at(kept_idx[a], p)) *
                     static_cast<double>(w.at(r, p));
            }
            rhs[static_cast<size_t>(a)] = s;
        }
        const std::vector<double> delta = solve_spd_system(std::move(hkk), std::move(rhs), nk);
        float * wr = wm.row(r);
        for (int a = 0; a < nk; a++) {
            wr[kept_idx[a]] = static_cast<float>(static_cast<double>(w.at(r, kept_idx[a])) +
                                                 delta[static_cast<size_t>(a)]);
        }
    }
    return out;
}

double row_reconstruction_error(std::span<const float> w, std::span<const float> w_hat,
                                const DenseMatrix & x) {
    if (w.size() != w_hat.size() || static_cast<int>(w.size()) != x.rows) {
        throw ConfigError("row_reconstruction_error: dimension mismatch");
    }
    double err_sq = 0.0;
    for (int t = 0; t < x.cols; t++) {
        double s = 0.0;
        for (int f = 0; f < x.rows; f++) {
            s += (static_cast<double>(w[f]) - static_cast<double>(w_hat[f])) *
                 static_cast<double>(x.at(f, t));
        }
        err_sq += s * s;
    }
    return std::sqrt(err_sq);
}

namespace {

// Enumerates k-of-n combinations in lexicographic order.
bool next_combination(std::vector<int> & idx, int n) {
    const int k = static_cast<int>(idx.size());
    for (int i = k - 1; i >= 0; i--) {
        if (idx[i] < n - (k - i)) {
            idx[i]++;
            for (int j = i + 1; j < k; j++) {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    return false;
}


} // namespace

OracleResult oracle_optimal_prune(std::span<const float> w_row, const DenseMatrix & x,
                                  int keep_count) {
    const int n = static_cast<int>(w_row.size());
    if (n > 16) {
        throw ConfigError("oracle_optimal_prune: refusing rows longer than 16 (got " +
                          std::to_string(n) + ")");
    }
    if (x.rows != n) {
        throw ConfigError("oracle_optimal_prune: activation rows do not match weight length");
    }
    if (keep_count < 0 || keep_count > n) {
        throw ConfigError("oracle_optimal_prune: keep_count out of range");
    }

    const int tokens = x.cols;
    std::vector<double> y(tokens, 0.0);
    for (int t = 0; t < tokens; t++) {
        double s = 0.0;
        for (int f = 0; f < n; f++) {
            s += static_cast<double>(w_row[f]) * static_cast<double>(x.at(f, t));
        }
        y[t] = s;
    }

    OracleResult best;
    best.error = -1.0;

    std::vector<int> idx(keep_count);
    std::iota(idx.begin(), idx.end(), 0);
    bool more = true;
    while (more) {
        // Least squares on the kept columns of X^T.
        std::vector<double> z;
        if (keep_count > 0) {
            std::vector<double> g(static_cast<size_t>(keep_count) * keep_count, 0.0);
            std::vector<double> b(keep_count, 0.0);
            for (int a = 0; a < keep_count; a++) {
                for (int c = a; c < keep_count; c++) {
                    double s = 0.0;
                    for (int t = 0; t < tokens; t++) {
                        s += static_cast<double>(x.at(idx[a], t)) *
                             static_cast<double>(x.at(idx[c], t));
                    }
                    g[static_cast<size_t>(a) * keep_count + c] = s;
                    g[static_cast<size_t>(c) * keep_count + a] = s;
                }
                double s = 0.0;
                for (int t = 0; t < tokens; t++) {
                    s += static_cast<double>(x.at(idx[a], t)) * y[t];
                }
                b[a] = s;
            }
            z = solve_spd_system(std::move(g), std::move(b), keep_count);
        }

        double err_sq = 0.0;
        for (int t = 0; t < tokens; t++) {
            double s = y[t];
            for (int a = 0; a < keep_count; a++) {
                s -= z[a] * static_cast<double>(x.at(idx[a], t));
            }
            err_sq += s * s;
        }
        const double err = std::sqrt(err_sq);

        if (best.error < 0.0 || err < best.error) {
            best.error = err;
            best.keep.assign(n, 0);
            best.weights.assign(n, 0.0f);
            for (int a = 0; a < keep_count; a++) {
                best.keep[idx[a]] = 1;
                best.weights[idx[a]] = static_cast<float>(z[a]);
            }
        }
        more = keep_count > 0 && next_combination(idx, n);
    }
    if (keep_count == 0 && best.error < 0.0) {
        // loop ran once with the empty mask; nothing else to do
        best.error = 0.0;
    }
    return best;
}

static const char * method_name(PruneMethod m) {
    switch (m) {
        case PruneMethod::magnitude: return "magnitude";
        case PruneMethod::wanda: return "wanda";
        case PruneMethod::sparsegpt: return "sparsegpt";
    }
    return "?";
}

std::string PruneReport::to_json() const {
    nlohmann::ordered_json j;
    j["config"]["method"] = method_name(config.method);
    j["config"]["sparsity"] = config.sparsity;
    j["config"]["eps"] = config.eps;
    j["config"]["block_size"] = config.block_size;
    j["config"]["tie_rule"] = "prune-lowest-column-index-first";
    j["config"]["pad_policy"] =
        config.pad_policy == PadPolicy::exclude_pads ? "exclude" : "include";
    j["config"]["frozen_dense_acts"] = config.frozen_dense_acts;
    j["config"]["seed"] = config.seed;
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto & l : layers) {
        nlohmann::ordered_json e;
        e["name"] = l.name;
        e["achieved_sparsity"] = l.achieved_sparsity;
        e["reconstruction_error"] = l.reconstruction_error;
        j["layers"].push_back(std::move(e));
    }
    j["global_sparsity"] = global_sparsity;
    j["wall_seconds"] = wall_seconds;
    return j.dump(2);
}

// Relative reconstruction error for a whole layer from the raw Gram:
// ||dW X||_F^2 = sum_r dW_r G dW_r^T.
static double layer_reconstruction_error(const DenseMatrix & w_before, const DenseMatrix & w_after,
                                         const GramAccumulator & acc) {
    const int rows = w_before.rows;
    const int cols = w_before.cols;
    double num = 0.0;
    double den = 0.0;
    std::vector<double> diff(cols), orig(cols);
    for (int r = 0; r < rows; r++) {
        for (int c = 0; c < cols; c++) {
            orig[c] = static_cast<double>(w_before.at(r, c));
            diff[c] = orig[c] - static_cast<double>(w_after.at(r, c));
        }
        for (int i = 0; i < cols; i++) {
            if (diff[i] != 0.0) {
                double s = 0.0;
                for (int j = 0; j < cols; j++) {
                    s += acc.gram_at(i, j) * diff[j];
                }
                num += diff[i] * s;
            }
            double s = 0.0;
            for (int j = 0; j < cols; j++) {
                s += acc.gram_at(i, j) * orig[j];
            }
            den += orig[i] * s;
        }
    }
    num = std::sqrt(std::max(num, 0.0));
    den = std::sqrt(std::max(den, 0.0));
    return den > 0.0 ? num / den : num;
}

PruneResult prune_model(const Checkpoint & model, const std::vector<TokenSequence> & calib,
                        const PruneConfig & config) {
    config.validate();
    model.validate();
    if (calib.empty()) {
        throw ConfigError("prune_model: calibration set is empty");
    }
    for (const auto & s : calib) {
        if (s.size() > static_cast<size_t>(model.config.max_seqlen)) {
            throw ConfigError("prune_model: calibration sample length " +
                              std::to_string(s.size()) + " exceeds model max_seqlen " +
                              std::to_string(model.config.max_seqlen));
        }
    }

    const auto t_start = std::chrono::steady_clock::now();

    PruneResult result;
    result.model = model;
    result.report.config = config;
    Checkpoint & work = result.model;

    size_t total_zeros = 0;
    size_t total_entries = 0;

    for (int b = 0; b < model.config.n_layers; b++) {
        // Statistics for this block, captured through the already-pruned
        // earlier blocks (or the dense model under the ablation flag).
        const Checkpoint & capture_src = config.frozen_dense_acts ? model : work;
        std::map<std::string, GramAccumulator> stats;
        for (size_t i = 0; i < calib.size(); i++) {
            const ForwardResult fr = forward(capture_src, calib[i], b);
            for (const auto & cap : fr.captured) {
                auto it = stats.find(cap.name);
                if (it == stats.end()) {
                    it = stats.emplace(cap.name, GramAccumulator(cap.inputs.rows)).first;
                }
                it->second.accumulate(cap.inputs, fr.pad_flags, config.pad_policy);
            }
        }

        for (const std::string & name : work.block_layers(b)) {
            const auto it = stats.find(name);
            if (it == stats.end()) {
                throw ConfigError("prune_model: no captured activations for layer " + name);
            }
            const GramAccumulator & acc = it->second;
            DenseMatrix & w = work.tensor(name);
            const DenseMatrix before = w;

            PrunedLayer pruned;
            try {
                switch (config.method) {
                    case PruneMethod::magnitude:
                        pruned = magnitude_prune(w, config.sparsity);
                        break;
                    case PruneMethod::wanda: {
                        const std::vector<float> norms = acc.feature_norms();
                        const DenseMatrix scores = wanda_scores(w, norms);
                        pruned.mask = select_mask_per_row(scores, config.sparsity,
                                                          config.tie_rule);
                        pruned.weights = w;
                        for (int r = 0; r < w.rows; r++) {
                            for (int c = 0; c < w.cols; c++) {
                                if (!pruned.mask.kept(r, c)) {
                                    pruned.weights.at(r, c) = 0.0f;
                                }
                            }
                        }
                        break;
                    }
                    case PruneMethod::sparsegpt: {
                        const DenseMatrix hessian = acc.dampen(config.eps);
                        pruned = sparsegpt_prune_update(w, hessian, config.sparsity,
                                                        config.block_size);
                        break;
                    }
                }
            } catch (const NumericError & e) {
                throw NumericError(std::string(e.what()) + " (layer " + name + ")");
            }

            size_t zeros = 0;
            for (uint8_t k : pruned.mask.keep) {
                zeros += k == 0 ? 1 : 0;
            }
            total_zeros += zeros;
            total_entries += pruned.mask.keep.size();

            LayerReport lr;
            lr.name = name;
            lr.achieved_sparsity =
                static_cast<double>(zeros) / static_cast<double>(pruned.mask.keep.size());
            lr.reconstruction_error = layer_reconstruction_error(before, pruned.weights, acc);
            result.report.layers.push_back(std::move(lr));

            w = std::move(pruned.weights);
        }
    }

    result.report.global_sparsity =
        total_entries > 0 ? static_cast<double>(total_zeros) / static_cast<double>(total_entries)
                          : 0.0;
    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

} // namespace prunekit
