#include "prunekit/model.hpp"

#include <cmath>
#include <cstring>
#include <list>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/tensor_file.hpp"
#include "model_internal.hpp"

namespace prunekit {

void TransformerConfig::validate() const {
    if (vocab_size < BYTE_VOCAB_SIZE) {
        throw ConfigError("TransformerConfig: vocab_size must be at least 259");
    }
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ff <= 0) {
        throw ConfigError("TransformerConfig: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("TransformerConfig: d_model must be divisible by n_heads");
    }
    if (max_seqlen < 16) {
        throw ConfigError("TransformerConfig: max_seqlen must be at least 16");
    }
}

DenseMatrix & Checkpoint::tensor(const std::string & name) {
    for (auto & [n, m] : tensors) {
        if (n == name) {
            return m;
        }
    }
    throw ConfigError("checkpoint has no tensor '" + name + "'");
}

const DenseMatrix & Checkpoint::tensor(const std::string & name) const {
    for (const auto & [n, m] : tensors) {
        if (n == name) {
            return m;
        }
    }
    throw ConfigError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string & name) const {
    for (const auto & [n, m] : tensors) {
        if (n == name) {
            return true;
        }
    }
    return false;
}

static std::string block_prefix(int b) {
    return "block." + std::to_string(b) + ".";
}

std::vector<std::string> Checkpoint::block_layers(int block) const {
    const std::string p = block_prefix(block);
    return {p + "attn.q", p + "attn.k", p + "attn.v", p + "attn.o", p + "mlp.up", p + "mlp.down"};
}

std::vector<std::string> Checkpoint::prunable_layers() const {
    std::vector<std::string> names;
    for (int b = 0; b < config.n_layers; b++) {
        for (auto & n : block_layers(b)) {
            names.push_back(n);
        }
    }
    return names;
}

// Canonical (name, rows, cols) layout for a config.
static std::vector<std::tuple<std::string, int, int>> canonical_layout(const TransformerConfig & c) {
    std::vector<std::tuple<std::string, int, int>> out;
    out.emplace_back("embed", c.vocab_size, c.d_model);
    for (int b = 0; b < c.n_layers; b++) {
        const std::string p = block_prefix(b);
        out.emplace_back(p + "norm.attn", 1, c.d_model);
        out.emplace_back(p + "attn.q", c.d_model, c.d_model);
        out.emplace_back(p + "attn.k", c.d_model, c.d_model);
        out.emplace_back(p + "attn.v", c.d_model, c.d_model);
        out.emplace_back(p + "attn.o", c.d_model, c.d_model);
        out.emplace_back(p + "norm.mlp", 1, c.d_model);
        out.emplace_back(p + "mlp.up", c.d_ff, c.d_model);
        out.emplace_back(p + "mlp.down", c.d_model, c.d_ff);
    }
    out.emplace_back("norm.final", 1, c.d_model);
    return out;
}

void Checkpoint::validate() const {
    config.validate();
    const auto layout = canonical_layout(config);
    if (layout.size() != tensors.size()) {
        throw ConfigError("checkpoint: expected " + std::to_string(layout.size()) +
                          " tensors, found " + std::to_string(tensors.size()));
    }
    for (size_t i = 0; i < layout.size(); i++) {
        const auto & [name, rows, cols] = layout[i];
        const auto & [tname, m] = tensors[i];
        if (tname != name) {
            throw ConfigError("checkpoint: tensor " + std::to_string(i) + " is '" + tname +
                              "', expected '" + name + "'");
        }
        if (m.rows != rows || m.cols != cols) {
            throw ConfigError("checkpoint: tensor '" + name + "' has shape " +
                              std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                              ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
        }
    }
}

Checkpoint init_checkpoint(const TransformerConfig & config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    Checkpoint ckpt;
    ckpt.config = config;

    const float base_std = 0.02f;
    // Residual-writing projections are scaled down, GPT-2 style.
    const float resid_std = base_std / std::sqrt(2.0f * static_cast<float>(config.n_layers));

    for (const auto & [name, rows, cols] : canonical_layout(config)) {
        DenseMatrix m(rows, cols);
        if (name.find("norm") != std::string::npos) {
            for (auto & v : m.data) {
                v = 1.0f;
            }
        } else {
            const bool resid = name.ends_with("attn.o") || name.ends_with("mlp.down");
            const float stddev = resid ? resid_std : base_std;
            for (auto & v : m.data) {
                v = static_cast<float>(rng_normal(rng)) * stddev;
            }
            if (name == "embed") {
                for (int32_t sp : {TOK_PAD, TOK_BOS, TOK_EOS}) {
                    std::memset(m.row(sp), 0, sizeof(float) * static_cast<size_t>(m.cols));
                }
            }
        }
        ckpt.tensors.emplace_back(name, std::move(m));
    }
    return ckpt;
}

namespace detail {

DenseMatrix make_position_table(int max_len, int d_model) {
    DenseMatrix pos(max_len, d_model);
    for (int t = 0; t < max_len; t++) {
        for (int i = 0; i < d_model; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
            pos.at(t, i) = static_cast<float>(std::sin(t * freq));
            if (i + 1 < d_model) {
                pos.at(t, i + 1) = static_cast<float>(std::cos(t * freq));
            }
        }
    }
    return pos;
}

void rmsnorm_rows(const DenseMatrix & x, const float * gain, DenseMatrix & h,
                  std::vector<float> & inv_rms) {
    const int t_count = x.rows;
    const int d = x.cols;
    h = DenseMatrix(t_count, d);
    inv_rms.assign(t_count, 0.0f);
    for (int t = 0; t < t_count; t++) {
        const float * xr = x.row(t);
        float ms = 0.0f;
        for (int j = 0; j < d; j++) {
            ms += xr[j] * xr[j];
        }
        ms = ms / static_cast<float>(d) + RMS_EPS;
        const float r = 1.0f / std::sqrt(ms);
        inv_rms[t] = r;
        float * hr = h.row(t);
        for (int j = 0; j < d; j++) {
            hr[j] = gain[j] * xr[j] * r;
        }
    }
}

void attention_rows(const DenseMatrix & q, const DenseMatrix & k, const DenseMatrix & v,
                    int n_heads, const std::vector<uint8_t> & pad, DenseMatrix & out,
                    DenseMatrix * probs) {
    const int t_count = q.rows;
    const int d = q.cols;
    const int hd = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    out = DenseMatrix(t_count, d);
    if (probs != nullptr) {
        *probs = DenseMatrix(n_heads * t_count, t_count);
    }

    std::vector<float> scores(t_count);
    for (int h = 0; h < n_heads; h++) {
        const int off = h * hd;
        for (int t = 0; t < t_count; t++) {
            const float * qr = q.row(t) + off;
            const bool q_is_pad = pad[t] != 0;
            float max_s = -INFINITY;
            for (int u = 0; u <= t; u++) {
                if (!q_is_pad && pad[u] != 0) {
                    scores[u] = -INFINITY;
                    continue;
                }
                const float * kr = k.row(u) + off;
                float s = 0.0f;
                for (int j = 0; j < hd; j++) {
                    s += qr[j] * kr[j];
                }
                s *= scale;
                scores[u] = s;
                max_s = std::max(max_s, s);
            }
            float denom = 0.0f;
            for (int u = 0; u <= t; u++) {
                if (scores[u] == -INFINITY) {
                    scores[u] = 0.0f;
                } else {
                    scores[u] = std::exp(scores[u] - max_s);
                    denom += scores[u];
                }
            }
            const float inv_denom = 1.0f / denom;
            float * outr = out.row(t) + off;
            for (int u = 0; u <= t; u++) {
                const float p = scores[u] * inv_denom;
                if (p != 0.0f) {
                    const float * vr = v.row(u) + off;
                    for (int j = 0; j < hd; j++) {
                        outr[j] += p * vr[j];
                    }
                }
                if (probs != nullptr) {
                    probs->at(h * t_count + t, u) = p;
                }
            }
        }
    }
}

} // namespace detail

// Cached position tables; a list keeps handed-out references stable.
static const DenseMatrix & position_table(int max_len, int d_model) {
    static std::list<std::tuple<int, int, DenseMatrix>> cache;
    for (const auto & [len, d, m] : cache) {
        if (len == max_len && d == d_model) {
            return m;
        }
    }
    cache.emplace_back(max_len, d_model, detail::make_position_table(max_len, d_model));
    return std::get<2>(cache.back());
}

// Embeds tokens and adds sinusoidal positions.
static DenseMatrix embed_tokens(const Checkpoint & model, const TokenSequence & tokens) {
    const auto & embed = model.tensor("embed");
    const int d = model.config.d_model;
    const int t_count = static_cast<int>(tokens.size());
    const DenseMatrix & pos = position_table(model.config.max_seqlen, d);

    DenseMatrix x(t_count, d);
    for (int t = 0; t < t_count; t++) {
        const int32_t id = tokens.ids[t];
        if (id < 0 || id >= model.config.vocab_size) {
            throw ConfigError("forward: token id " + std::to_string(id) + " out of range");
        }
        const float * er = embed.row(id);
        const float * pr = pos.row(t);
        float * xr = x.row(t);
        for (int j = 0; j < d; j++) {
            xr[j] = er[j] + pr[j];
        }
    }
    return x;
}

// Transposes a [tokens x features] activation into the captured
// [features x tokens] layout.
static DenseMatrix to_feature_major(const DenseMatrix & m) {
    DenseMatrix out(m.cols, m.rows);
    for (int t = 0; t < m.rows; t++) {
        for (int j = 0; j < m.cols; j++) {
            out.at(j, t) = m.at(t, j);
        }
    }
    return out;
}

ForwardResult forward(const Checkpoint & model, const TokenSequence & tokens, int capture_block) {
    model.config.validate();
    if (tokens.size() > static_cast<size_t>(model.config.max_seqlen)) {
        throw ConfigError("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seqlen " + std::to_string(model.config.max_seqlen));
    }
    if (capture_block >= model.config.n_layers) {
        throw ConfigError("forward: capture block out of range");
    }

    const int t_count = static_cast<int>(tokens.size());
    const int d = model.config.d_model;

    ForwardResult result;
    result.pad_flags = tokens.pad_flags();
    if (t_count == 0) {
        result.logits = DenseMatrix(0, model.config.vocab_size);
        return result;
    }

    DenseMatrix x = embed_tokens(model, tokens);
    std::vector<float> inv_rms;
    DenseMatrix h1, q, k, v, att, attn_out, h2, up, act, down;

    for (int b = 0; b < model.config.n_layers; b++) {
        const std::string p = block_prefix(b);
        const bool cap = b == capture_block;

        detail::rmsnorm_rows(x, model.tensor(p + "norm.attn").row(0), h1, inv_rms);
        if (cap) {
            DenseMatrix h1f = to_feature_major(h1);
            result.captured.push_back({p + "attn.q", h1f});
            result.captured.push_back({p + "attn.k", h1f});
            result.captured.push_back({p + "attn.v", std::move(h1f)});
        }

        const auto & wq = model.tensor(p + "attn.q");
        const auto & wk = model.tensor(p + "attn.k");
        const auto & wv = model.tensor(p + "attn.v");
        q = DenseMatrix(t_count, d);
        k = DenseMatrix(t_count, d);
        v = DenseMatrix(t_count, d);
        matmul_nt(q.data.data(), h1.data.data(), wq.data.data(), t_count, d, d);
        matmul_nt(k.data.data(), h1.data.data(), wk.data.data(), t_count, d, d);
        matmul_nt(v.data.data(), h1.data.data(), wv.data.data(), t_count, d, d);

        detail::attention_rows(q, k, v, model.config.n_heads, result.pad_flags, att, nullptr);
        if (cap) {
            result.captured.push_back({p + "attn.o", to_feature_major(att)});
        }

        const auto & wo = model.tensor(p + "attn.o");
        attn_out = DenseMatrix(t_count, d);
        matmul_nt(attn_out.data.data(), att.data.data(), wo.data.data(), t_count, d, d);
        for (size_t i = 0; i < x.data.size(); i++) {
            x.data[i] += attn_out.data[i];
        }

        detail::rmsnorm_rows(x, model.tensor(p + "norm.mlp").row(0), h2, inv_rms);
        if (cap) {
            result.captured.push_back({p + "mlp.up", to_feature_major(h2)});
        }

        const auto & wup = model.tensor(p + "mlp.up");
        const auto & wdown = model.tensor(p + "mlp.down");
        const int f = model.config.d_ff;
        up = DenseMatrix(t_count, f);
        matmul_nt(up.data.data(), h2.data.data(), wup.data.data(), t_count, d, f);
        act = DenseMatrix(t_count, f);
        for (size_t i = 0; i < up.data.size(); i++) {
            act.data[i] = detail::silu(up.data[i]);
        }
        if (cap) {
            result.captured.push_back({p + "mlp.down", to_feature_major(act)});
        }
        down = DenseMatrix(t_count, d);
        matmul_nt(down.data.data(), act.data.data(), wdown.data.data(), t_count, f, d);
        for (size_t i = 0; i < x.data.size(); i++) {
            x.data[i] += down.data[i];
        }
    }

    DenseMatrix hf;
    detail::rmsnorm_rows(x, model.tensor("norm.final").row(0), hf, inv_rms);

    const auto & embed = model.tensor("embed");
    result.logits = DenseMatrix(t_count, model.config.vocab_size);
    matmul_nt(result.logits.data.data(), hf.data.data(), embed.data.data(), t_count, d,
              model.config.vocab_size);
    return result;
}

TokenSequence generate(const Checkpoint & model, const TokenSequence & prompt, int max_new) {
    if (max_new < 0) {
        throw ConfigError("generate: max_new must be non-negative");
    }
    if (prompt.size() + static_cast<size_t>(max_new) > static_cast<size_t>(model.config.max_seqlen)) {
        throw ConfigError("generate: prompt length plus max_new exceeds max_seqlen");
    }

    TokenSequence seq = prompt;
    for (int step = 0; step < max_new; step++) {
        const ForwardResult fr = forward(model, seq);
        const float * last = fr.logits.row(fr.logits.rows - 1);
        int32_t best = 0;
        float best_v = last[0];
        for (int32_t i = 1; i < model.config.vocab_size; i++) {
            if (last[i] > best_v) { // strict: ties keep the lowest id
                best_v = last[i];
                best = i;
            }
        }
        seq.ids.push_back(best);
        seq.pad_from = seq.ids.size();
        if (best == TOK_EOS) {
            break;
        }
    }
    return seq;
}

void save_checkpoint(const std::string & path, const Checkpoint & ckpt) {
    ckpt.validate();
    TensorFile file;
    file.config["vocab_size"] = ckpt.config.vocab_size;
    file.config["d_model"] = ckpt.config.d_model;
    file.config["n_heads"] = ckpt.config.n_heads;
    file.config["n_layers"] = ckpt.config.n_layers;
    file.config["d_ff"] = ckpt.config.d_ff;
    file.config["max_seqlen"] = ckpt.config.max_seqlen;

    for (const auto & [name, m] : ckpt.tensors) {
        TensorEntry e;
        e.name = name;
        e.dtype = "f32";
        e.shape = {m.rows, m.cols};
        e.bytes.resize(m.data.size() * sizeof(float));
        std::memcpy(e.bytes.data(), m.data.data(), e.bytes.size());
        file.tensors.push_back(std::move(e));
    }
    save_tensor_file(path, file);
}

Checkpoint load_checkpoint(const std::string & path) {
    const TensorFile file = load_tensor_file(path);

    Checkpoint ckpt;
    try {
        ckpt.config.vocab_size = file.config.at("vocab_size").get<int>();
        ckpt.config.d_model = file.config.at("d_model").get<int>();
        ckpt.config.n_heads = file.config.at("n_heads").get<int>();
        ckpt.config.n_layers = file.config.at("n_layers").get<int>();
        ckpt.config.d_ff = file.config.at("d_ff").get<int>();
        ckpt.config.max_seqlen = file.config.at("max_seqlen").get<int>();
    } catch (const nlohmann::json::exception & e) {
        throw IoError("checkpoint '" + path + "': bad config header: " + e.what());
    }

    for (const auto & t : file.tensors) {
        if (t.dtype != "f32" || t.shape.size() != 2) {
            throw IoError("checkpoint '" + path + "': tensor '" + t.name +
                          "' shape-layout mismatch");
        }
        DenseMatrix m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
        std::memcpy(m.data.data(), t.bytes.data(), t.bytes.size());
        ckpt.tensors.emplace_back(t.name, std::move(m));
    }

    try {
        ckpt.validate();
    } catch (const ConfigError & e) {
        throw IoError("checkpoint '" + path + "': " + e.what());
    }
    return ckpt;
}

} // namespace prunekit
