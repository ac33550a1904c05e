#include "prunekit/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "prunekit/errors.hpp"
#include "prunekit/eval.hpp"

namespace prunekit {

using ojson = nlohmann::ordered_json;

const char * to_string(PruneMethod m) {
    switch (m) {
        case PruneMethod::magnitude: return "magnitude";
        case PruneMethod::wanda: return "wanda";
        case PruneMethod::sparsegpt: return "sparsegpt";
    }
    return "?";
}

const char * to_string(CalibSource s) {
    switch (s) {
        case CalibSource::corpus: return "corpus";
        case CalibSource::qa_dataset: return "qa-dataset";
        case CalibSource::nonsense_ellipses: return "nonsense-ellipses";
        case CalibSource::nonsense_alphanumeric: return "nonsense-alphanumeric";
    }
    return "?";
}

const char * to_string(CalibFormat f) {
    switch (f) {
        case CalibFormat::pretraining: return "pretraining";
        case CalibFormat::zero_shot: return "zero-shot";
        case CalibFormat::icl: return "icl";
        case CalibFormat::icl_cot: return "icl-cot";
    }
    return "?";
}

PruneMethod parse_prune_method(const std::string & s) {
    if (s == "magnitude") return PruneMethod::magnitude;
    if (s == "wanda") return PruneMethod::wanda;
    if (s == "sparsegpt") return PruneMethod::sparsegpt;
    throw ConfigError("unknown prune method '" + s + "'");
}

CalibSource parse_calib_source(const std::string & s) {
    if (s == "corpus") return CalibSource::corpus;
    if (s == "qa-dataset") return CalibSource::qa_dataset;
    if (s == "nonsense-ellipses") return CalibSource::nonsense_ellipses;
    if (s == "nonsense-alphanumeric") return CalibSource::nonsense_alphanumeric;
    throw ConfigError("unknown calibration source '" + s + "'");
}

CalibFormat parse_calib_format(const std::string & s) {
    if (s == "pretraining") return CalibFormat::pretraining;
    if (s == "zero-shot") return CalibFormat::zero_shot;
    if (s == "icl") return CalibFormat::icl;
    if (s == "icl-cot") return CalibFormat::icl_cot;
    throw ConfigError("unknown calibration format '" + s + "'");
}

PadPolicy parse_pad_policy(const std::string & s) {
    if (s == "include") return PadPolicy::include_pads;
    if (s == "exclude") return PadPolicy::exclude_pads;
    throw ConfigError("unknown pad policy '" + s + "'");
}

CalibSpec CalibSpecEntry::to_spec(uint64_t seed) const {
    CalibSpec spec;
    spec.source = source;
    spec.format = format;
    spec.n_samples = n_samples;
    spec.seqlen = seqlen;
    spec.max_pairs = max_pairs;
    spec.cot_steps = cot_steps;
    spec.seed = seed;
    return spec;
}

PruneConfig PruneConfigEntry::to_config(uint64_t seed) const {
    PruneConfig c;
    c.method = method;
    c.sparsity = sparsity;
    c.eps = eps;
    c.block_size = block_size;
    c.pad_policy = pad_policy;
    c.frozen_dense_acts = frozen_dense_acts;
    c.seed = seed;
    return c;
}

static bool valid_id(const std::string & id) {
    if (id.empty() || id == "dense") {
        return false;
    }
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
        if (!ok) {
            return false;
        }
    }
    return true;
}

static bool file_exists(const std::string & path) {
    return std::ifstream(path).good();
}

void ExperimentConfig::validate() const {
    if (model_path.empty() || !file_exists(model_path)) {
        throw ConfigError("experiment: model checkpoint '" + model_path + "' does not exist");
    }
    if (calib_specs.empty() || prune_configs.empty() || eval_tasks.empty()) {
        throw ConfigError("experiment: calib_specs, prune_configs and eval_tasks must be non-empty");
    }
    if (seeds.empty()) {
        throw ConfigError("experiment: seeds must be non-empty");
    }
    std::set<int64_t> seen_seeds(seeds.begin(), seeds.end());
    if (seen_seeds.size() != seeds.size()) {
        throw ConfigError("experiment: seeds must be distinct");
    }

    std::set<std::string> ids;
    for (const auto & c : calib_specs) {
        if (!valid_id(c.id) || !ids.insert("c:" + c.id).second) {
            throw ConfigError("experiment: bad or duplicate calibration id '" + c.id + "'");
        }
        const bool needs_path =
            c.source == CalibSource::corpus || c.source == CalibSource::qa_dataset;
        if (needs_path && !file_exists(c.path)) {
            throw ConfigError("experiment: calibration input '" + c.path + "' does not exist");
        }
        c.to_spec(0).validate();
    }
    for (const auto & p : prune_configs) {
        if (!valid_id(p.id) || !ids.insert("p:" + p.id).second) {
            throw ConfigError("experiment: bad or duplicate prune id '" + p.id + "'");
        }
        p.to_config(0).validate();
    }
    for (const auto & e : eval_tasks) {
        if (!valid_id(e.id) || !ids.insert("e:" + e.id).second) {
            throw ConfigError("experiment: bad or duplicate eval id '" + e.id + "'");
        }
        if (!file_exists(e.path)) {
            throw ConfigError("experiment: eval input '" + e.path + "' does not exist");
        }
        if (e.type == EvalTaskType::perplexity && e.seqlen < 2) {
            throw ConfigError("experiment: eval '" + e.id + "' needs seqlen >= 2");
        }
        if (e.type == EvalTaskType::few_shot && e.k_shots < 0) {
            throw ConfigError("experiment: eval '" + e.id + "' needs k_shots >= 0");
        }
    }
}

ExperimentConfig ExperimentConfig::from_json(const std::string & text) {
    ojson j;
    try {
        j = ojson::parse(text);
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("experiment config: malformed JSON: ") + e.what());
    }

    ExperimentConfig cfg;
    cfg.seeds.clear();
    try {
        cfg.model_path = j.at("model").get<std::string>();
        for (const auto & c : j.at("calib_specs")) {
            CalibSpecEntry e;
            e.id = c.at("id").get<std::string>();
            e.source = parse_calib_source(c.at("source").get<std::string>());
            e.path = c.value("path", std::string());
            if (c.contains("format")) {
                e.format = parse_calib_format(c["format"].get<std::string>());
            } else if (e.source == CalibSource::qa_dataset) {
                e.format = CalibFormat::icl;
            }
            e.n_samples = c.value("n_samples", 16);
            e.seqlen = c.value("seqlen", 128);
            if (c.contains("max_pairs")) {
                e.max_pairs = c["max_pairs"].get<int>();
            }
            if (c.contains("cot_steps")) {
                e.cot_steps = c["cot_steps"].get<int>();
            }
            cfg.calib_specs.push_back(std::move(e));
        }
        for (const auto & p : j.at("prune_configs")) {
            PruneConfigEntry e;
            e.id = p.at("id").get<std::string>();
            e.method = parse_prune_method(p.at("method").get<std::string>());
            e.sparsity = p.at("sparsity").get<double>();
            e.eps = p.value("eps", 0.01);
            e.block_size = p.value("block_size", 128);
            e.pad_policy = parse_pad_policy(p.value("pad_policy", std::string("exclude")));
            e.frozen_dense_acts = p.value("frozen_dense_acts", false);
            cfg.prune_configs.push_back(std::move(e));
        }
        for (const auto & t : j.at("eval_tasks")) {
            EvalTaskEntry e;
            e.id = t.at("id").get<std::string>();
            const std::string ty = t.at("type").get<std::string>();
            if (ty == "perplexity") {
                e.type = EvalTaskType::perplexity;
                e.seqlen = t.value("seqlen", 128);
            } else if (ty == "few-shot") {
                e.type = EvalTaskType::few_shot;
                e.k_shots = t.at("k_shots").get<int>(); // explicit by design
                e.max_items = t.value("max_items", 0);
            } else {
                throw ConfigError("experiment: unknown eval type '" + ty + "'");
            }
            e.path = t.at("path").get<std::string>();
            cfg.eval_tasks.push_back(std::move(e));
        }
        if (j.contains("seeds")) {
            cfg.seeds = j["seeds"].get<std::vector<int64_t>>();
        } else {
            cfg.seeds = {0, 1, 2};
        }
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string & path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("experiment config '" + path + "' cannot be opened");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// record store

static uint64_t fnv1a(const void * data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const uint8_t * p = static_cast<const uint8_t *>(data);
    for (size_t i = 0; i < len; i++) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

static std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

static uint64_t file_digest(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot digest '" + path + "'");
    }
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

static std::string calib_canonical(const CalibSpecEntry & c) {
    ojson j;
    j["id"] = c.id;
    j["source"] = to_string(c.source);
    j["path"] = c.path;
    j["format"] = to_string(c.format);
    j["n_samples"] = c.n_samples;
    j["seqlen"] = c.seqlen;
    j["max_pairs"] = c.max_pairs.has_value() ? ojson(*c.max_pairs) : ojson(nullptr);
    j["cot_steps"] = c.cot_steps.has_value() ? ojson(*c.cot_steps) : ojson(nullptr);
    return j.dump();
}

static std::string prune_canonical(const PruneConfigEntry & p) {
    ojson j;
    j["id"] = p.id;
    j["method"] = to_string(p.method);
    j["sparsity"] = p.sparsity;
    j["eps"] = p.eps;
    j["block_size"] = p.block_size;
    j["pad_policy"] = p.pad_policy == PadPolicy::exclude_pads ? "exclude" : "include";
    j["frozen_dense_acts"] = p.frozen_dense_acts;
    return j.dump();
}

static std::string eval_canonical(const EvalTaskEntry & e) {
    ojson j;
    j["id"] = e.id;
    j["type"] = e.type == EvalTaskType::perplexity ? "perplexity" : "few-shot";
    j["path"] = e.path;
    j["seqlen"] = e.seqlen;
    j["k_shots"] = e.k_shots;
    j["max_items"] = e.max_items;
    return j.dump();
}

static std::string cell_key(uint64_t model_digest, const std::string & calib,
                            const std::string & prune, const std::string & eval, int64_t seed) {
    std::string s = hex64(model_digest) + "|" + calib + "|" + prune + "|" + eval + "|" +
                    std::to_string(seed);
    return hex64(fnv1a(s.data(), s.size()));
}

static std::string record_line(const RunRecord & r) {
    ojson j;
    j["key"] = r.key;
    j["calib"] = r.calib_id;
    j["prune"] = r.prune_id;
    j["eval"] = r.eval_id;
    j["seed"] = r.seed;
    if (r.value.has_value()) {
        j["value"] = *r.value;
    } else {
        j["error"] = r.error;
    }
    return j.dump();
}

std::vector<RunRecord> load_record_store(const std::string & path) {
    std::vector<RunRecord> out;
    std::ifstream in(path);
    if (!in) {
        return out;
    }
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        if (line.empty()) {
            continue;
        }
        ojson j;
        try {
            j = ojson::parse(line);
            RunRecord r;
            r.key = j.at("key").get<std::string>();
            r.calib_id = j.at("calib").get<std::string>();
            r.prune_id = j.at("prune").get<std::string>();
            r.eval_id = j.at("eval").get<std::string>();
            r.seed = j.at("seed").get<int64_t>();
            if (j.contains("value")) {
                r.value = j["value"].get<double>();
            } else {
                r.error = j.value("error", std::string("unknown"));
            }
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception & e) {
            throw IoError("record store '" + path + "' line " + std::to_string(line_no) +
                          ": " + e.what());
        }
    }
    return out;
}

namespace {

// Lazily loaded eval/calibration inputs, keyed by path.
struct InputCache {
    std::map<std::string, std::string> corpora;
    std::map<std::string, QADataset> datasets;

    const std::string & corpus(const std::string & path) {
        auto it = corpora.find(path);
        if (it == corpora.end()) {
            std::ifstream in(path, std::ios::binary);
            if (!in) {
                throw IoError("cannot open corpus '" + path + "'");
            }
            std::stringstream ss;
            ss << in.rdbuf();
            it = corpora.emplace(path, ss.str()).first;
        }
        return it->second;
    }

    const QADataset & dataset(const std::string & path) {
        auto it = datasets.find(path);
        if (it == datasets.end()) {
            it = datasets.emplace(path, load_jsonl(path)).first;
        }
        return it->second;
    }
};

double run_eval_task(const Checkpoint & model, const EvalTaskEntry & task, uint64_t seed,
                     InputCache & cache) {
    if (task.type == EvalTaskType::perplexity) {
        return perplexity(model, cache.corpus(task.path), task.seqlen).value;
    }
    return few_shot_accuracy(model, cache.dataset(task.path), task.k_shots, seed, task.max_items)
        .value;
}

struct StoreWriter {
    std::ofstream records;
    std::ofstream timings;

    StoreWriter(const std::string & path)
        : records(path, std::ios::app), timings(path + ".timings", std::ios::app) {
        if (!records) {
            throw IoError("cannot open record store '" + path + "' for append");
        }
    }

    void append(const RunRecord & r) {
        records << record_line(r) << "\n";
        records.flush();
        if (timings) {
            ojson t;
            t["key"] = r.key;
            t["seconds"] = r.seconds;
            timings << t.dump() << "\n";
            timings.flush();
        }
    }
};

} // namespace

std::vector<RunRecord> run_matrix(const ExperimentConfig & config, const std::string & store_path) {
    config.validate();

    const Checkpoint dense = load_checkpoint(config.model_path);
    const uint64_t digest = file_digest(config.model_path);

    std::map<std::string, RunRecord> done;
    for (auto & r : load_record_store(store_path)) {
        done.emplace(r.key, std::move(r));
    }
    StoreWriter writer(store_path);
    InputCache cache;

    std::vector<RunRecord> out;
    const std::string dense_canonical = "{\"dense\"}";

    auto run_cell_eval = [&](const Checkpoint & model, const EvalTaskEntry & task,
                             const std::string & key, const std::string & calib_id,
                             const std::string & prune_id, int64_t seed,
                             const std::string & upstream_error) {
        RunRecord r;
        r.key = key;
        r.calib_id = calib_id;
        r.prune_id = prune_id;
        r.eval_id = task.id;
        r.seed = seed;
        const auto t0 = std::chrono::steady_clock::now();
        if (!upstream_error.empty()) {
            r.error = upstream_error;
        } else {
            try {
                r.value = run_eval_task(model, task, static_cast<uint64_t>(seed), cache);
            } catch (const std::exception & e) {
                r.error = e.what();
            }
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        writer.append(r);
        done.emplace(r.key, r);
        out.push_back(std::move(r));
    };

    // Dense baseline, once per eval task, shared across the matrix.
    for (const auto & task : config.eval_tasks) {
        const std::string key =
            cell_key(digest, dense_canonical, dense_canonical, eval_canonical(task),
                     config.seeds[0]);
        if (auto it = done.find(key); it != done.end()) {
            out.push_back(it->second);
            continue;
        }
        run_cell_eval(dense, task, key, "dense", "dense", config.seeds[0], "");
    }

    for (const auto & calib : config.calib_specs) {
        for (const auto & prune : config.prune_configs) {
            for (const int64_t seed : config.seeds) {
                // Which eval tasks still need this cell?
                std::vector<std::pair<const EvalTaskEntry *, std::string>> missing;
                for (const auto & task : config.eval_tasks) {
                    const std::string key =
                        cell_key(digest, calib_canonical(calib), prune_canonical(prune),
                                 eval_canonical(task), seed);
                    if (auto it = done.find(key); it != done.end()) {
                        out.push_back(it->second);
                    } else {
                        missing.emplace_back(&task, key);
                    }
                }
                if (missing.empty()) {
                    continue;
                }

                Checkpoint sparse;
                std::string cell_error;
                try {
                    std::vector<std::string> corpus_docs;
                    QADataset dataset;
                    if (calib.source == CalibSource::corpus) {
                        corpus_docs.push_back(cache.corpus(calib.path));
                    } else if (calib.source == CalibSource::qa_dataset) {
                        dataset = cache.dataset(calib.path);
                    }
                    const CalibBuild build = build_calibration(
                        corpus_docs, dataset, calib.to_spec(static_cast<uint64_t>(seed)));
                    PruneResult pr = prune_model(dense, build.samples,
                                                 prune.to_config(static_cast<uint64_t>(seed)));
                    sparse = std::move(pr.model);
                } catch (const std::exception & e) {
                    cell_error = e.what();
                }

                for (const auto & [task, key] : missing) {
                    run_cell_eval(sparse, *task, key, calib.id, prune.id, seed, cell_error);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// aggregation and reports

std::vector<AggregateResult> aggregate(const std::vector<RunRecord> & records) {
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
    for (const auto & r : records) {
        if (r.value.has_value()) {
            groups[{r.calib_id, r.prune_id, r.eval_id}].push_back(*r.value);
        }
    }
    std::vector<AggregateResult> out;
    for (const auto & [key, values] : groups) {
        AggregateResult a;
        a.calib_id = std::get<0>(key);
        a.prune_id = std::get<1>(key);
        a.eval_id = std::get<2>(key);
        a.n = static_cast<int>(values.size());
        double sum = 0.0;
        for (double v : values) {
            sum += v;
        }
        a.mean = sum / a.n;
        if (a.n >= 2) {
            double ss = 0.0;
            for (double v : values) {
                ss += (v - a.mean) * (v - a.mean);
            }
            a.two_sigma = 2.0 * std::sqrt(ss / (a.n - 1));
        }
        out.push_back(std::move(a));
    }
    return out; // std::map iteration keeps the output sorted by group key
}

static std::string fmt4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string format_cell(double mean, std::optional<double> two_sigma) {
    if (two_sigma.has_value()) {
        return fmt4(mean) + " ± " + fmt4(*two_sigma);
    }
    return fmt4(mean);
}

std::string emit_report_csv(const std::vector<AggregateResult> & aggregates) {
    std::string out = "calib,prune,eval,mean,two_sigma,n\n";
    for (const auto & a : aggregates) {
        out += a.calib_id + "," + a.prune_id + "," + a.eval_id + "," + fmt4(a.mean) + ",";
        if (a.two_sigma.has_value()) {
            out += fmt4(*a.two_sigma);
        }
        out += "," + std::to_string(a.n) + "\n";
    }
    return out;
}

std::string emit_report_markdown(const std::vector<AggregateResult> & aggregates) {
    // Columns: Dense first, then (prune, calib) pairs in sorted order.
    std::set<std::string> eval_ids;
    std::set<std::pair<std::string, std::string>> sparse_cols;
    bool have_dense = false;
    std::map<std::tuple<std::string, std::string, std::string>, const AggregateResult *> cells;
    for (const auto & a : aggregates) {
        eval_ids.insert(a.eval_id);
        if (a.calib_id == "dense" && a.prune_id == "dense") {
            have_dense = true;
        } else {
            sparse_cols.insert({a.prune_id, a.calib_id});
        }
        cells[{a.calib_id, a.prune_id, a.eval_id}] = &a;
    }

    std::string out = "| eval |";
    if (have_dense) {
        out += " Dense |";
    }
    for (const auto & [prune, calib] : sparse_cols) {
        out += " " + prune + "/" + calib + " |";
    }
    out += "\n|---|";
    if (have_dense) {
        out += "---|";
    }
    for (size_t i = 0; i < sparse_cols.size(); i++) {
        out += "---|";
    }
    out += "\n";

    for (const auto & eval_id : eval_ids) {
        // Row maximum over the sparse cells (the dense column mirrors the
        // papers' untouched reference column).
        double row_max = -INFINITY;
        for (const auto & [prune, calib] : sparse_cols) {
            if (auto it = cells.find({calib, prune, eval_id}); it != cells.end()) {
                row_max = std::max(row_max, it->second->mean);
            }
        }

        out += "| " + eval_id + " |";
        if (have_dense) {
            if (auto it = cells.find({std::string("dense"), std::string("dense"), eval_id});
                it != cells.end()) {
                out += " " + format_cell(it->second->mean, it->second->two_sigma) + " |";
            } else {
                out += " - |";
            }
        }
        for (const auto & [prune, calib] : sparse_cols) {
            auto it = cells.find({calib, prune, eval_id});
            if (it == cells.end()) {
                out += " - |";
                continue;
            }
            const std::string cell = format_cell(it->second->mean, it->second->two_sigma);
            if (it->second->mean == row_max) {
                out += " **" + cell + "** |";
            } else {
                out += " " + cell + " |";
            }
        }
        out += "\n";
    }
    return out;
}

void emit_report(const std::vector<AggregateResult> & aggregates, const std::string & format,
                 const std::string & path) {
    std::string text;
    if (format == "csv") {
        text = emit_report_csv(aggregates);
    } else if (format == "markdown") {
        text = emit_report_markdown(aggregates);
    } else {
        throw ConfigError("emit_report: format must be csv or markdown");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("emit_report: cannot write '" + path + "'");
    }
    out << text;
    if (!out) {
        throw IoError("emit_report: write failed for '" + path + "'");
    }
}

} // namespace prunekit
