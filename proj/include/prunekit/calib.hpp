#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/tokenizer.hpp"

namespace prunekit {

// One question-answer pair, optionally with chain-of-thought rationale
// steps.
struct QAPair {
    std::string question;
    std::string answer;
    std::vector<std::string> rationale_steps;
};

using QADataset = std::vector<QAPair>;

enum class CalibSource {
    corpus,
    qa_dataset,
    nonsense_ellipses,
    nonsense_alphanumeric,
};

enum class CalibFormat {
    pretraining,
    zero_shot,
    icl,
    icl_cot,
};

// How one calibration sample set is built. Defaults follow the common
// 128 x 2048 convention; both knobs shrink for desk-scale runs.
struct CalibSpec {
    CalibSource source = CalibSource::corpus;
    CalibFormat format = CalibFormat::pretraining;
    int n_samples = 128;
    int seqlen = 2048;
    std::optional<int> max_pairs;  // icl / icl-cot only
    std::optional<int> cot_steps;  // icl-cot only
    uint64_t seed = 0;

    void validate() const;
};

// Every sample has exactly spec.seqlen ids; pad_from marks the suffix of
// PAD tokens (== seqlen when there is none).
struct CalibBuild {
    std::vector<TokenSequence> samples;
    int skipped_questions = 0; // zero-shot questions too long for seqlen
};

// Prompt templates shared by calibration building and evaluation.
std::string render_question(const QAPair & pair);              // "Q: {q}\nA:"
std::string render_pair(const QAPair & pair);                  // "Q: {q}\nA: {a}\n\n"
std::string render_pair_cot(const QAPair & pair);              // rationale lines + "The answer is"

// Pre-training format: seeded document draws concatenated until the
// total covers seqlen, then a window of exactly seqlen at a uniformly
// drawn offset.
CalibBuild build_pretraining(const std::vector<std::string> & corpus, const CalibSpec & spec);

// Zero-shot format: one rendered question followed by PAD to seqlen.
// Questions whose rendering exceeds seqlen are skipped and counted.
CalibBuild build_zero_shot(const QADataset & dataset, const CalibSpec & spec);

// ICL format: whole rendered pairs packed until no further pair fits
// (or exactly max_pairs of them), then PAD. Pairs are never truncated.
CalibBuild build_icl(const QADataset & dataset, const CalibSpec & spec);

// ICL with chain-of-thought: like build_icl but only pairs with
// rationale steps are eligible, rendered with one step per line; with
// cot_steps set, only pairs with exactly that many steps.
CalibBuild build_icl_cot(const QADataset & dataset, const CalibSpec & spec);

// Nonsense calibration: repeated ". " filling seqlen (ellipses) or
// seeded uniform draws over [a-zA-Z0-9] (alphanumeric). Never padded.
CalibBuild build_nonsense(CalibSource kind, const CalibSpec & spec);

// Dispatches on spec.source/spec.format.
CalibBuild build_calibration(const std::vector<std::string> & corpus, const QADataset & dataset,
                             const CalibSpec & spec);

// Newline-delimited JSON with fields "question", "answer" and optional
// "rationale_steps". Malformed lines abort with their 1-based number.
QADataset load_jsonl(const std::string & path);

// Deterministic word problems of chained additions/subtractions. Each
// pair carries exactly s rationale lines (s drawn from step_range), the
// last of which lands on the final answer.
QADataset synth_arithmetic(uint64_t seed, int size, const std::vector<int> & step_range);

// Calibration batch container I/O (the checkpoint container reused with
// u32 "samples" [n x seqlen] and "pad_from" [n x 1] tensors).
void save_calib_batch(const std::string & path, const std::vector<TokenSequence> & samples);
std::vector<TokenSequence> load_calib_batch(const std::string & path);

} // namespace prunekit
