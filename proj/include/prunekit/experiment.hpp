#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/calib.hpp"
#include "prunekit/prune.hpp"

namespace prunekit {

// One calibration source in an experiment: a CalibSpec plus the id used
// in reports and the file it reads from (absent for nonsense sources).
struct CalibSpecEntry {
    std::string id;
    CalibSource source = CalibSource::corpus;
    std::string path; // corpus text or QA JSONL; empty for nonsense
    CalibFormat format = CalibFormat::pretraining;
    int n_samples = 16;
    int seqlen = 128;
    std::optional<int> max_pairs;
    std::optional<int> cot_steps;

    CalibSpec to_spec(uint64_t seed) const;
};

struct PruneConfigEntry {
    std::string id;
    PruneMethod method = PruneMethod::wanda;
    double sparsity = 0.5;
    double eps = 0.01;
    int block_size = 128;
    PadPolicy pad_policy = PadPolicy::exclude_pads;
    bool frozen_dense_acts = false;

    PruneConfig to_config(uint64_t seed) const;
};

enum class EvalTaskType {
    perplexity,
    few_shot,
};

struct EvalTaskEntry {
    std::string id;
    EvalTaskType type = EvalTaskType::perplexity;
    std::string path;  // corpus text (perplexity) or QA JSONL (few-shot)
    int seqlen = 128;  // perplexity window
    int k_shots = 0;   // few-shot demonstrations (explicit, never defaulted)
    int max_items = 0; // 0 = whole dataset
};

struct ExperimentConfig {
    std::string model_path;
    std::vector<CalibSpecEntry> calib_specs;
    std::vector<PruneConfigEntry> prune_configs;
    std::vector<EvalTaskEntry> eval_tasks;
    std::vector<int64_t> seeds = {0, 1, 2};

    void validate() const;

    static ExperimentConfig from_json(const std::string & text);
    static ExperimentConfig from_file(const std::string & path);
};

// One (calibration, prune, eval, seed) outcome. The id "dense" on both
// calib and prune marks the shared dense-baseline evaluations. Failed
// cells carry an error message instead of a value. Wall-clock seconds
// are diagnostic only and live in a sidecar file, never in the record
// store, so stores from identical runs are byte-identical.
struct RunRecord {
    std::string key; // content hash of (calib, prune, eval, seed, model digest)
    std::string calib_id;
    std::string prune_id;
    std::string eval_id;
    int64_t seed = 0;
    std::optional<double> value;
    std::string error;
    double seconds = 0.0;
};

struct AggregateResult {
    std::string calib_id;
    std::string prune_id;
    std::string eval_id;
    double mean = 0.0;
    std::optional<double> two_sigma; // 2 * sample std (n-1), absent for n < 2
    int n = 0;
};

// Runs every (calib x prune x seed) cell against every eval task, plus
// the dense baseline once per task. Completed cells are persisted to
// store_path (JSON lines) and skipped on rerun; failures are recorded
// and never abort the matrix. Returns all records in matrix order.
std::vector<RunRecord> run_matrix(const ExperimentConfig & config, const std::string & store_path);

std::vector<RunRecord> load_record_store(const std::string & path);

// Group by (calib, prune, eval); mean and 2 * sample standard deviation.
// Records carrying errors are excluded. Output is sorted by the group
// key, so aggregation is permutation-invariant.
std::vector<AggregateResult> aggregate(const std::vector<RunRecord> & records);

// CSV: one row per aggregate, 4-decimal fixed formatting. Markdown: eval
// tasks as rows, "Dense" column first, one column per (prune, calib)
// pair, cells "mean ± two_sigma", per-row maximum among sparse cells in
// bold. Both are bit-stable for identical input.
std::string emit_report_csv(const std::vector<AggregateResult> & aggregates);
std::string emit_report_markdown(const std::vector<AggregateResult> & aggregates);
void emit_report(const std::vector<AggregateResult> & aggregates, const std::string & format,
                 const std::string & path);

// Formats one cell the way reports print it ("0.2000 ± 0.2000").
std::string format_cell(double mean, std::optional<double> two_sigma);

const char * to_string(PruneMethod m);
const char * to_string(CalibSource s);
const char * to_string(CalibFormat f);
PruneMethod parse_prune_method(const std::string & s);
CalibSource parse_calib_source(const std::string & s);
CalibFormat parse_calib_format(const std::string & s);
PadPolicy parse_pad_policy(const std::string & s);

} // namespace prunekit
