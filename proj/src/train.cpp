#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "prunekit/errors.hpp"
#include "prunekit/model.hpp"
#include "prunekit/rng.hpp"
#include "model_internal.hpp"

namespace prunekit {

namespace {

struct BlockTape {
    DenseMatrix in_x, h1, q, k, v, probs, att, x_mid, h2, up, act;
    std::vector<float> inv_rms1, inv_rms2;
};

struct Tape {
    DenseMatrix x0;
    std::vector<BlockTape> blocks;
    DenseMatrix x_final, hf;
    std::vector<float> inv_rmsf;
    DenseMatrix logits;
};

struct Grads {
    std::vector<DenseMatrix> by_tensor; // parallel to checkpoint tensors

    explicit Grads(const Checkpoint & ckpt) {
        by_tensor.reserve(ckpt.tensors.size());
        for (const auto & [name, m] : ckpt.tensors) {
            by_tensor.emplace_back(m.rows, m.cols);
        }
    }

    void zero() {
        for (auto & g : by_tensor) {
            std::fill(g.data.begin(), g.data.end(), 0.0f);
        }
    }
};

int tensor_index(const Checkpoint & ckpt, const std::string & name) {
    for (size_t i = 0; i < ckpt.tensors.size(); i++) {
        if (ckpt.tensors[i].first == name) {
            return static_cast<int>(i);
        }
    }
    throw ConfigError("train: missing tensor '" + name + "'");
}

void forward_tape(const Checkpoint & model, const std::vector<int32_t> & ids,
                  const DenseMatrix & pos, Tape & tape) {
    const int t_count = static_cast<int>(ids.size());
    const int d = model.config.d_model;
    const int f = model.config.d_ff;
    const std::vector<uint8_t> pad(t_count, 0); // training windows carry no padding

    const auto & embed = model.tensor("embed");
    tape.x0 = DenseMatrix(t_count, d);
    for (int t = 0; t < t_count; t++) {
        const float * er = embed.row(ids[t]);
        const float * pr = pos.row(t);
        float * xr = tape.x0.row(t);
        for (int j = 0; j < d; j++) {
            xr[j] = er[j] + pr[j];
        }
    }

    tape.blocks.assign(model.config.n_layers, BlockTape{});
    DenseMatrix x = tape.x0;
    for (int b = 0; b < model.config.n_layers; b++) {
        BlockTape & bt = tape.blocks[b];
        const std::string p = "block." + std::to_string(b) + ".";
        bt.in_x = x;

        detail::rmsnorm_rows(bt.in_x, model.tensor(p + "norm.attn").row(0), bt.h1, bt.inv_rms1);

        bt.q = DenseMatrix(t_count, d);
        bt.k = DenseMatrix(t_count, d);
        bt.v = DenseMatrix(t_count, d);
        matmul_nt(bt.q.data.data(), bt.h1.data.data(), model.tensor(p + "attn.q").data.data(),
                  t_count, d, d);
        matmul_nt(bt.k.data.data(), bt.h1.data.data(), model.tensor(p + "attn.k").data.data(),
                  t_count, d, d);
        matmul_nt(bt.v.data.data(), bt.h1.data.data(), model.tensor(p + "attn.v").data.data(),
                  t_count, d, d);

        detail::attention_rows(bt.q, bt.k, bt.v, model.config.n_heads, pad, bt.att, &bt.probs);

        DenseMatrix attn_out(t_count, d);
        matmul_nt(attn_out.data.data(), bt.att.data.data(), model.tensor(p + "attn.o").data.data(),
                  t_count, d, d);
        bt.x_mid = bt.in_x;
        for (size_t i = 0; i < bt.x_mid.data.size(); i++) {
            bt.x_mid.data[i] += attn_out.data[i];
        }

        detail::rmsnorm_rows(bt.x_mid, model.tensor(p + "norm.mlp").row(0), bt.h2, bt.inv_rms2);

        bt.up = DenseMatrix(t_count, f);
        matmul_nt(bt.up.data.data(), bt.h2.data.data(), model.tensor(p + "mlp.up").data.data(),
                  t_count, d, f);
        bt.act = DenseMatrix(t_count, f);
        for (size_t i = 0; i < bt.up.data.size(); i++) {
            bt.act.data[i] = detail::silu(bt.up.data[i]);
        }
        DenseMatrix down(t_count, d);
        matmul_nt(down.data.data(), bt.act.data.data(), model.tensor(p + "mlp.down").data.data(),
                  t_count, f, d);
        x = bt.x_mid;
        for (size_t i = 0; i < x.data.size(); i++) {
            x.data[i] += down.data[i];
        }
    }

    tape.x_final = std::move(x);
    detail::rmsnorm_rows(tape.x_final, model.tensor("norm.final").row(0), tape.hf, tape.inv_rmsf);

    tape.logits = DenseMatrix(t_count, model.config.vocab_size);
    matmul_nt(tape.logits.data.data(), tape.hf.data.data(), embed.data.data(), t_count, d,
              model.config.vocab_size);
}

// dg and dx from upstream dh of h = gain ⊙ x * inv_rms. dx is overwritten.
void rmsnorm_backward(const DenseMatrix & x, const float * gain, const std::vector<float> & inv_rms,
                      const DenseMatrix & dh, float * dgain, DenseMatrix & dx) {
    const int t_count = x.rows;
    const int d = x.cols;
    dx = DenseMatrix(t_count, d);
    for (int t = 0; t < t_count; t++) {
        const float * xr = x.row(t);
        const float * dhr = dh.row(t);
        float * dxr = dx.row(t);
        const float r = inv_rms[t];
        float dot = 0.0f;
        for (int i = 0; i < d; i++) {
            dgain[i] += dhr[i] * xr[i] * r;
            dot += dhr[i] * gain[i] * xr[i];
        }
        const float c = r * r * r * dot / static_cast<float>(d);
        for (int i = 0; i < d; i++) {
            dxr[i] = gain[i] * dhr[i] * r - xr[i] * c;
        }
    }
}

// Backward through causal softmax attention for one sequence.
void attention_backward(const BlockTape & bt, int n_heads, const DenseMatrix & datt,
                        DenseMatrix & dq, DenseMatrix & dk, DenseMatrix & dv) {
    const int t_count = bt.q.rows;
    const int d = bt.q.cols;
    const int hd = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    dq = DenseMatrix(t_count, d);
    dk = DenseMatrix(t_count, d);
    dv = DenseMatrix(t_count, d);

    std::vector<float> dp(t_count), ds(t_count);
    for (int h = 0; h < n_heads; h++) {
        const int off = h * hd;
        for (int t = 0; t < t_count; t++) {
            const float * prow = bt.probs.row(h * t_count + t);
            const float * dattr = datt.row(t) + off;

            float dp_dot = 0.0f;
            for (int u = 0; u <= t; u++) {
                const float * vr = bt.v.row(u) + off;
                float s = 0.0f;
                for (int j = 0; j < hd; j++) {
                    s += dattr[j] * vr[j];
                }
                dp[u] = s;
                dp_dot += s * prow[u];
            }
            for (int u = 0; u <= t; u++) {
                ds[u] = prow[u] * (dp[u] - dp_dot);
            }

            const float * qr = bt.q.row(t) + off;
            float * dqr = dq.row(t) + off;
            for (int u = 0; u <= t; u++) {
                const float p = prow[u];
                const float dsu = ds[u] * scale;
                const float * kr = bt.k.row(u) + off;
                float * dkr = dk.row(u) + off;
                float * dvr = dv.row(u) + off;
                for (int j = 0; j < hd; j++) {
                    dqr[j] += dsu * kr[j];
                    dkr[j] += dsu * qr[j];
                    dvr[j] += p * dattr[j];
                }
            }
        }
    }
}

// Cross-entropy over next-token targets; returns summed NLL and the count
// of scored positions, and accumulates parameter gradients.
struct SeqLoss {
    double nll_sum = 0.0;
    int n_scored = 0;
};

SeqLoss backward_sequence(const Checkpoint & model, const std::vector<int32_t> & window,
                          const Tape & tape, double inv_batch, Grads & grads) {
    const int t_count = static_cast<int>(window.size()) - 1;
    const int d = model.config.d_model;
    const int vocab = model.config.vocab_size;

    SeqLoss out;
    std::vector<int32_t> targets(t_count);
    for (int t = 0; t < t_count; t++) {
        targets[t] = window[t + 1];
        if (targets[t] != TOK_PAD) {
            out.n_scored++;
        }
    }
    if (out.n_scored == 0) {
        return out;
    }

    DenseMatrix dlogits(t_count, vocab);
    const float grad_scale = static_cast<float>(inv_batch / out.n_scored);
    for (int t = 0; t < t_count; t++) {
        if (targets[t] == TOK_PAD) {
            continue;
        }
        const float * lr = tape.logits.row(t);
        float max_l = lr[0];
        for (int b = 1; b < vocab; b++) {
            max_l = std::max(max_l, lr[b]);
        }
        double denom = 0.0;
        for (int b = 0; b < vocab; b++) {
            denom += std::exp(static_cast<double>(lr[b]) - max_l);
        }
        const double lse = max_l + std::log(denom);
        out.nll_sum += lse - lr[targets[t]];

        float * dlr = dlogits.row(t);
        for (int b = 0; b < vocab; b++) {
            const double p = std::exp(static_cast<double>(lr[b]) - lse);
            dlr[b] = static_cast<float>(p) * grad_scale;
        }
        dlr[targets[t]] -= grad_scale;
    }

    const int i_embed = tensor_index(model, "embed");
    const int i_normf = tensor_index(model, "norm.final");

    // Head (tied with the embedding) and final norm.
    DenseMatrix dhf(t_count, d);
    matmul_nn(dhf.data.data(), dlogits.data.data(), model.tensor("embed").data.data(), t_count,
              vocab, d);
    matmul_tn_acc(grads.by_tensor[i_embed].data.data(), dlogits.data.data(), tape.hf.data.data(),
                  t_count, vocab, d);

    DenseMatrix dx;
    rmsnorm_backward(tape.x_final, model.tensor("norm.final").row(0), tape.inv_rmsf, dhf,
                     grads.by_tensor[i_normf].row(0), dx);

    for (int b = model.config.n_layers - 1; b >= 0; b--) {
        const BlockTape & bt = tape.blocks[b];
        const std::string p = "block." + std::to_string(b) + ".";
        const int f = model.config.d_ff;

        // MLP: x_out = x_mid + act * Wdown^T
        matmul_tn_acc(grads.by_tensor[tensor_index(model, p + "mlp.down")].data.data(),
                      dx.data.data(), bt.act.data.data(), t_count, d, f);
        DenseMatrix dact(t_count, f);
        matmul_nn(dact.data.data(), dx.data.data(), model.tensor(p + "mlp.down").data.data(),
                  t_count, d, f);
        DenseMatrix dup(t_count, f);
        for (size_t i = 0; i < dup.data.size(); i++) {
            dup.data[i] = dact.data[i] * detail::silu_grad(bt.up.data[i]);
        }
        matmul_tn_acc(grads.by_tensor[tensor_index(model, p + "mlp.up")].data.data(),
                      dup.data.data(), bt.h2.data.data(), t_count, f, d);
        DenseMatrix dh2(t_count, d);
        matmul_nn(dh2.data.data(), dup.data.data(), model.tensor(p + "mlp.up").data.data(), t_count,
                  f, d);

        DenseMatrix dx_mid_norm;
        rmsnorm_backward(bt.x_mid, model.tensor(p + "norm.mlp").row(0), bt.inv_rms2, dh2,
                         grads.by_tensor[tensor_index(model, p + "norm.mlp")].row(0), dx_mid_norm);
        DenseMatrix dx_mid = dx; // residual branch
        for (size_t i = 0; i < dx_mid.data.size(); i++) {
            dx_mid.data[i] += dx_mid_norm.data[i];
        }

        // Attention: x_mid = in_x + att * Wo^T
        matmul_tn_acc(grads.by_tensor[tensor_index(model, p + "attn.o")].data.data(),
                      dx_mid.data.data(), bt.att.data.data(), t_count, d, d);
        DenseMatrix datt(t_count, d);
        matmul_nn(datt.data.data(), dx_mid.data.data(), model.tensor(p + "attn.o").data.data(),
                  t_count, d, d);

        DenseMatrix dq, dk, dv;
        attention_backward(bt, model.config.n_heads, datt, dq, dk, dv);

        DenseMatrix dh1(t_count, d);
        matmul_tn_acc(grads.by_tensor[tensor_index(model, p + "attn.q")].data.data(),
                      dq.data.data(), bt.h1.data.data(), t_count, d, d);
        matmul_nn(dh1.data.data(), dq.data.data(), model.tensor(p + "attn.q").data.data(), t_count,
                  d, d);
        DenseMatrix tmp(t_count, d);
        matmul_tn_acc(grads.by_tensor[tensor_index(model, p + "attn.k")].data.data(),
                      dk.data.data(), bt.h1.data.data(), t_count, d, d);
        matmul_nn(tmp.data.data(), dk.data.data(), model.tensor(p + "attn.k").data.data(), t_count,
                  d, d);
        for (size_t i = 0; i < dh1.data.size(); i++) {
            dh1.data[i] += tmp.data[i];
        }
        matmul_tn_acc(grads.by_tensor[tensor_index(model, p + "attn.v")].data.data(),
                      dv.data.data(), bt.h1.data.data(), t_count, d, d);
        matmul_nn(tmp.data.data(), dv.data.data(), model.tensor(p + "attn.v").data.data(), t_count,
                  d, d);
        for (size_t i = 0; i < dh1.data.size(); i++) {
            dh1.data[i] += tmp.data[i];
        }

        DenseMatrix dx_in_norm;
        rmsnorm_backward(bt.in_x, model.tensor(p + "norm.attn").row(0), bt.inv_rms1, dh1,
                         grads.by_tensor[tensor_index(model, p + "norm.attn")].row(0), dx_in_norm);
        dx = std::move(dx_mid); // residual branch
        for (size_t i = 0; i < dx.data.size(); i++) {
            dx.data[i] += dx_in_norm.data[i];
        }
    }

    // Embedding rows (positions are constant).
    DenseMatrix & dembed = grads.by_tensor[i_embed];
    for (int t = 0; t < t_count; t++) {
        const float * dxr = dx.row(t);
        float * der = dembed.row(window[t]);
        for (int j = 0; j < d; j++) {
            der[j] += dxr[j];
        }
    }
    return out;
}

} // namespace

double loss_and_grads_for_test(const Checkpoint & model, const std::vector<int32_t> & window,
                               std::vector<DenseMatrix> * grads_out) {
    const DenseMatrix pos =
        detail::make_position_table(model.config.max_seqlen, model.config.d_model);
    std::vector<int32_t> inputs(window.begin(), window.end() - 1);
    Tape tape;
    forward_tape(model, inputs, pos, tape);
    Grads grads(model);
    const SeqLoss sl = backward_sequence(model, window, tape, 1.0, grads);
    if (grads_out != nullptr) {
        *grads_out = std::move(grads.by_tensor);
    }
    return sl.n_scored > 0 ? sl.nll_sum / sl.n_scored : 0.0;
}

Checkpoint train_toy(const std::vector<std::string> & corpus, const TransformerConfig & config,
                     const TrainConfig & train, TrainStats * stats) {
    config.validate();
    if (corpus.empty()) {
        throw ConfigError("train_toy: corpus is empty");
    }
    if (train.steps <= 0 || train.batch_size <= 0) {
        throw ConfigError("train_toy: steps and batch_size must be positive");
    }
    if (train.seqlen < 2 || train.seqlen > config.max_seqlen) {
        throw ConfigError("train_toy: seqlen must be in [2, max_seqlen]");
    }

    // Documents joined by newlines into one byte stream.
    std::string stream;
    for (size_t i = 0; i < corpus.size(); i++) {
        if (i > 0) {
            stream.push_back('\n');
        }
        stream += corpus[i];
    }
    const TokenSequence all = encode(stream);
    if (all.size() < static_cast<size_t>(train.seqlen) + 1) {
        throw ConfigError("train_toy: corpus has " + std::to_string(all.size()) +
                          " tokens, need at least " + std::to_string(train.seqlen + 1));
    }

    Checkpoint model = init_checkpoint(config, train.seed);
    Rng rng(train.seed ^ 0x7261696e746f79ULL);

    Grads grads(model);
    std::vector<DenseMatrix> adam_m, adam_v;
    for (const auto & [name, m] : model.tensors) {
        adam_m.emplace_back(m.rows, m.cols);
        adam_v.emplace_back(m.rows, m.cols);
    }

    const DenseMatrix pos = detail::make_position_table(config.max_seqlen, config.d_model);
    const uint64_t n_starts = all.size() - static_cast<size_t>(train.seqlen);

    double initial_loss = 0.0;
    double final_loss = 0.0;
    Tape tape;

    for (int step = 1; step <= train.steps; step++) {
        grads.zero();
        double nll = 0.0;
        int scored = 0;
        const double inv_batch = 1.0 / train.batch_size;

        for (int item = 0; item < train.batch_size; item++) {
            const uint64_t start = rng_below(rng, n_starts);
            std::vector<int32_t> window(all.ids.begin() + static_cast<ptrdiff_t>(start),
                                        all.ids.begin() +
                                            static_cast<ptrdiff_t>(start + train.seqlen + 1));
            std::vector<int32_t> inputs(window.begin(), window.end() - 1);
            forward_tape(model, inputs, pos, tape);
            const SeqLoss sl = backward_sequence(model, window, tape, inv_batch, grads);
            if (sl.n_scored > 0) {
                nll += sl.nll_sum / sl.n_scored;
                scored++;
            }
        }
        const double loss = scored > 0 ? nll / scored : 0.0;
        if (!std::isfinite(loss)) {
            throw TrainError("train_toy: loss became non-finite at step " + std::to_string(step));
        }
        if (step == 1) {
            initial_loss = loss;
        }
        final_loss = loss;

        // Global gradient-norm clip.
        double norm_sq = 0.0;
        for (const auto & g : grads.by_tensor) {
            for (float v : g.data) {
                norm_sq += static_cast<double>(v) * static_cast<double>(v);
            }
        }
        const double norm = std::sqrt(norm_sq);
        const float clip_scale =
            norm > train.grad_clip ? static_cast<float>(train.grad_clip / norm) : 1.0f;

        const double lr_t =
            train.warmup_steps > 0 && step < train.warmup_steps
                ? train.lr * static_cast<double>(step) / train.warmup_steps
                : train.lr;
        const double bc1 = 1.0 - std::pow(train.beta1, step);
        const double bc2 = 1.0 - std::pow(train.beta2, step);

        for (size_t i = 0; i < model.tensors.size(); i++) {
            float * p = model.tensors[i].second.data.data();
            const float * g = grads.by_tensor[i].data.data();
            float * m = adam_m[i].data.data();
            float * v = adam_v[i].data.data();
            const size_t n = model.tensors[i].second.data.size();
            for (size_t j = 0; j < n; j++) {
                const float gj = g[j] * clip_scale;
                m[j] = static_cast<float>(train.beta1) * m[j] +
                       static_cast<float>(1.0 - train.beta1) * gj;
                v[j] = static_cast<float>(train.beta2) * v[j] +
                       static_cast<float>(1.0 - train.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p[j] -= static_cast<float>(lr_t * mhat / (std::sqrt(vhat) + train.adam_eps));
            }
        }

        if (train.log_every > 0 && (step % train.log_every == 0 || step == 1)) {
            std::fprintf(stderr, "step %5d  loss %.4f  ppl %.2f\n", step, loss, std::exp(loss));
        }
    }

    if (stats != nullptr) {
        stats->initial_loss = initial_loss;
        stats->final_loss = final_loss;
        stats->steps_run = train.steps;
    }
    return model;
}

} // namespace prunekit
