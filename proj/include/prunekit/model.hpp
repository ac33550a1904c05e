#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/matrix.hpp"
#include "prunekit/tokenizer.hpp"

namespace prunekit {

// Decoder-only transformer: pre-norm blocks with RMS normalization,
// causal attention, a SiLU two-layer MLP, fixed sinusoidal positions and
// an embedding-tied output head.
struct TransformerConfig {
    int vocab_size = BYTE_VOCAB_SIZE;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int d_ff = 128;
    int max_seqlen = 256;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

// Model weights as an ordered name -> matrix map. The canonical layout is
//   embed [vocab x d_model]
//   block.{b}.norm.attn [1 x d_model]
//   block.{b}.attn.{q,k,v,o} [d_model x d_model]
//   block.{b}.norm.mlp [1 x d_model]
//   block.{b}.mlp.up [d_ff x d_model]
//   block.{b}.mlp.down [d_model x d_ff]
//   norm.final [1 x d_model]
// Weight matrices are stored output-row major: y = W * x.
struct Checkpoint {
    TransformerConfig config;
    std::vector<std::pair<std::string, DenseMatrix>> tensors;

    DenseMatrix & tensor(const std::string & name);
    const DenseMatrix & tensor(const std::string & name) const;
    bool has_tensor(const std::string & name) const;

    // Names of the prunable linear layers (attn.* and mlp.* of every
    // block), in canonical order. Embeddings and norm gains never appear.
    std::vector<std::string> prunable_layers() const;
    std::vector<std::string> block_layers(int block) const;

    // Verifies that every tensor of the canonical layout is present with
    // the correct shape.
    void validate() const;
};

// Fresh random initialization. Special-token embedding rows (PAD, BOS,
// EOS) start at zero; norm gains start at one.
Checkpoint init_checkpoint(const TransformerConfig & config, uint64_t seed);

// One captured linear-layer input stream: features x tokens.
struct CapturedLayer {
    std::string name;
    DenseMatrix inputs;
};

struct ForwardResult {
    DenseMatrix logits; // tokens x vocab, next-token logits per position
    std::vector<CapturedLayer> captured;
    std::vector<uint8_t> pad_flags;
};

// Runs the model over one sequence. When capture_block >= 0 the result
// also carries, for each linear layer of that block, the matrix of the
// layer's inputs plus per-token pad flags. Causal; PAD keys are masked
// out for non-PAD queries; deterministic.
ForwardResult forward(const Checkpoint & model, const TokenSequence & tokens,
                      int capture_block = -1);

// Greedy argmax decoding; ties resolved toward the lowest token id.
// Stops at EOS or after max_new tokens.
TokenSequence generate(const Checkpoint & model, const TokenSequence & prompt, int max_new);

void save_checkpoint(const std::string & path, const Checkpoint & ckpt);
Checkpoint load_checkpoint(const std::string & path);

// Optimizer schedule: Adam with linear warmup to `lr` over warmup_steps,
// constant afterwards, global gradient-norm clipping at grad_clip.
struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    int seqlen = 64;
    double lr = 2e-3;
    int warmup_steps = 50;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    uint64_t seed = 0;
    int log_every = 0; // 0 = silent
};

struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int steps_run = 0;
};

// Trains a fresh model on the corpus (documents joined by newlines into
// one byte stream) with cross-entropy next-token loss. Deterministic
// given the seed. Throws TrainError on divergence (NaN loss), naming the
// step.
Checkpoint train_toy(const std::vector<std::string> & corpus, const TransformerConfig & config,
                     const TrainConfig & train, TrainStats * stats = nullptr);

} // namespace prunekit
