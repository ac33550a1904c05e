#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prunekit/calib.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

struct EvalItemRecord {
    int index = 0;
    bool skipped = false; // prompt did not fit max_seqlen
    bool correct = false;
    std::string expected;
    std::string extracted;
};

struct EvalResult {
    std::string metric; // "perplexity" | "accuracy"
    double value = 0.0;
    int n_items = 0;
    int skipped = 0;
    std::vector<EvalItemRecord> details;

    std::string to_json(bool include_details = false) const;
};

// exp(mean NLL) over consecutive non-overlapping windows of seqlen
// tokens; natural log; PAD targets are never scored. n_items is the
// window count.
EvalResult perplexity(const Checkpoint & model, const std::string & corpus, int seqlen);

// Few-shot exact-match accuracy: each test item gets k_shots rendered
// demonstrations (seeded draw, disjoint from the item, identical across
// checkpoints for a fixed seed) plus its question, is greedy-decoded,
// and the continuation's first line is scored via extract_final_answer.
// Items whose prompt cannot fit are skipped and counted. max_items == 0
// evaluates the whole dataset.
EvalResult few_shot_accuracy(const Checkpoint & model, const QADataset & dataset, int k_shots,
                             uint64_t seed, int max_items = 0, int max_new = 24);

// Last integer in the text (optional sign, commas stripped); the trimmed
// first line when no integer exists; "" for empty input.
std::string extract_final_answer(const std::string & text);

} // namespace prunekit
