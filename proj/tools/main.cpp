// Command-line front end: train-toy, build-calib, prune, eval, run, report.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "prunekit/calib.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/eval.hpp"
#include "prunekit/experiment.hpp"
#include "prunekit/model.hpp"
#include "prunekit/prune.hpp"

using namespace prunekit;

namespace {

std::string read_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << text;
}

int cmd_train_toy(const std::string & corpus_path, const std::string & out_path,
                  TransformerConfig model_cfg, TrainConfig train_cfg) {
    TrainStats stats;
    const Checkpoint ckpt = train_toy({read_file(corpus_path)}, model_cfg, train_cfg, &stats);
    save_checkpoint(out_path, ckpt);
    std::printf("trained %d steps: loss %.4f -> %.4f (ppl %.3f), saved %s\n", stats.steps_run,
                stats.initial_loss, stats.final_loss, std::exp(stats.final_loss),
                out_path.c_str());
    return 0;
}

int cmd_build_calib(const std::string & spec_path, const std::string & out_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(spec_path));
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError("calibration spec '" + spec_path + "': " + e.what());
    }

    CalibSpec spec;
    std::string path;
    try {
        spec.source = parse_calib_source(j.at("source").get<std::string>());
        if (j.contains("format")) {
            spec.format = parse_calib_format(j["format"].get<std::string>());
        } else if (spec.source == CalibSource::qa_dataset) {
            spec.format = CalibFormat::icl;
        }
        spec.n_samples = j.value("n_samples", 16);
        spec.seqlen = j.value("seqlen", 128);
        if (j.contains("max_pairs")) {
            spec.max_pairs = j["max_pairs"].get<int>();
        }
        if (j.contains("cot_steps")) {
            spec.cot_steps = j["cot_steps"].get<int>();
        }
        spec.seed = j.value("seed", 0);
        path = j.value("path", std::string());
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError("calibration spec '" + spec_path + "': " + e.what());
    }

    std::vector<std::string> corpus;
    QADataset dataset;
    if (spec.source == CalibSource::corpus) {
        corpus.push_back(read_file(path));
    } else if (spec.source == CalibSource::qa_dataset) {
        dataset = load_jsonl(path);
    }

    const CalibBuild build = build_calibration(corpus, dataset, spec);
    save_calib_batch(out_path, build.samples);
    std::printf("built %zu samples of %d tokens (%d oversize questions skipped), saved %s\n",
                build.samples.size(), spec.seqlen, build.skipped_questions, out_path.c_str());
    return 0;
}

int cmd_prune(const std::string & model_path, const std::string & calib_path,
              const std::string & out_path, const std::string & report_path,
              const PruneConfig & cfg) {
    const Checkpoint model = load_checkpoint(model_path);
    const std::vector<TokenSequence> calib = load_calib_batch(calib_path);
    PruneResult result = prune_model(model, calib, cfg);
    save_checkpoint(out_path, result.model);
    const std::string report = result.report.to_json();
    if (!report_path.empty()) {
        write_file(report_path, report + "\n");
    } else {
        std::printf("%s\n", report.c_str());
    }
    std::printf("pruned to %.4f global sparsity in %.2fs, saved %s\n",
                result.report.global_sparsity, result.report.wall_seconds, out_path.c_str());
    return 0;
}

int cmd_eval(const std::string & model_path, const std::string & type, const std::string & path,
             int seqlen, int k_shots, int max_items, uint64_t seed, bool details,
             const std::string & out_path) {
    const Checkpoint model = load_checkpoint(model_path);
    EvalResult result;
    if (type == "perplexity") {
        result = perplexity(model, read_file(path), seqlen);
    } else if (type == "few-shot") {
        result = few_shot_accuracy(model, load_jsonl(path), k_shots, seed, max_items);
    } else {
        throw ConfigError("eval: type must be perplexity or few-shot");
    }
    const std::string text = result.to_json(details) + "\n";
    if (!out_path.empty()) {
        write_file(out_path, text);
    } else {
        std::fputs(text.c_str(), stdout);
    }
    return 0;
}

int cmd_run(const std::string & config_path, const std::string & store_path) {
    const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    const std::vector<RunRecord> records = run_matrix(cfg, store_path);
    int failed = 0;
    for (const auto & r : records) {
        failed += r.value.has_value() ? 0 : 1;
    }
    std::printf("matrix complete: %zu records (%d failed), store %s\n", records.size(), failed,
                store_path.c_str());
    return 0;
}

int cmd_report(const std::string & store_path, const std::string & format,
               const std::string & out_path) {
    const std::vector<RunRecord> records = load_record_store(store_path);
    const std::vector<AggregateResult> aggregates = aggregate(records);
    if (!out_path.empty()) {
        emit_report(aggregates, format, out_path);
        std::printf("wrote %zu aggregates to %s\n", aggregates.size(), out_path.c_str());
    } else {
        const std::string text =
            format == "csv" ? emit_report_csv(aggregates) : emit_report_markdown(aggregates);
        std::fputs(text.c_str(), stdout);
    }
    return 0;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"One-shot pruning toolkit for toy decoder-only transformers"};
    app.require_subcommand(1);

    // train-toy
    auto * train = app.add_subcommand("train-toy", "Train a toy model on a byte corpus");
    std::string t_corpus, t_out;
    TransformerConfig t_model;
    TrainConfig t_train;
    train->add_option("--corpus", t_corpus, "UTF-8/byte corpus file")->required();
    train->add_option("--out", t_out, "output checkpoint path")->required();
    train->add_option("--d-model", t_model.d_model);
    train->add_option("--n-heads", t_model.n_heads);
    train->add_option("--n-layers", t_model.n_layers);
    train->add_option("--d-ff", t_model.d_ff);
    train->add_option("--max-seqlen", t_model.max_seqlen);
    train->add_option("--steps", t_train.steps);
    train->add_option("--batch", t_train.batch_size);
    train->add_option("--seqlen", t_train.seqlen);
    train->add_option("--lr", t_train.lr);
    train->add_option("--warmup", t_train.warmup_steps);
    train->add_option("--seed", t_train.seed);
    train->add_option("--log-every", t_train.log_every);

    // build-calib
    auto * calib = app.add_subcommand("build-calib", "Build a calibration batch from a spec file");
    std::string c_spec, c_out;
    calib->add_option("--spec", c_spec, "calibration spec JSON")->required();
    calib->add_option("--out", c_out, "output batch file")->required();

    // prune
    auto * prune = app.add_subcommand("prune", "Prune a checkpoint with a calibration batch");
    std::string p_model, p_calib, p_out, p_report;
    std::string p_method = "wanda", p_pad = "exclude";
    PruneConfig p_cfg;
    prune->add_option("--model", p_model)->required();
    prune->add_option("--calib", p_calib)->required();
    prune->add_option("--out", p_out)->required();
    prune->add_option("--report", p_report, "write the JSON report here");
    prune->add_option("--method", p_method, "magnitude | wanda | sparsegpt");
    prune->add_option("--sparsity", p_cfg.sparsity)->required();
    prune->add_option("--eps", p_cfg.eps);
    prune->add_option("--block-size", p_cfg.block_size);
    prune->add_option("--pad-policy", p_pad, "include | exclude");
    prune->add_flag("--frozen-dense-acts", p_cfg.frozen_dense_acts,
                    "capture statistics from the dense model (ablation)");
    prune->add_option("--seed", p_cfg.seed);

    // eval
    auto * ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string e_model, e_type, e_path, e_out;
    int e_seqlen = 128, e_k = 0, e_max_items = 0;
    uint64_t e_seed = 0;
    bool e_details = false;
    ev->add_option("--model", e_model)->required();
    ev->add_option("--type", e_type, "perplexity | few-shot")->required();
    ev->add_option("--path", e_path, "corpus file or QA JSONL")->required();
    ev->add_option("--seqlen", e_seqlen, "perplexity window length");
    ev->add_option("--k-shots", e_k, "few-shot demonstrations");
    ev->add_option("--max-items", e_max_items);
    ev->add_option("--seed", e_seed);
    ev->add_flag("--details", e_details, "include per-item records");
    ev->add_option("--out", e_out, "write the JSON result here (default stdout)");

    // run
    auto * run = app.add_subcommand("run", "Run an experiment matrix");
    std::string r_config, r_store;
    run->add_option("--config", r_config, "experiment config JSON")->required();
    run->add_option("--store", r_store, "record store path (JSON lines)")->required();

    // report
    auto * report = app.add_subcommand("report", "Aggregate a record store into a table");
    std::string rp_store, rp_format = "markdown", rp_out;
    report->add_option("--store", rp_store)->required();
    report->add_option("--format", rp_format, "csv | markdown");
    report->add_option("--out", rp_out, "output file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            return cmd_train_toy(t_corpus, t_out, t_model, t_train);
        }
        if (calib->parsed()) {
            return cmd_build_calib(c_spec, c_out);
        }
        if (prune->parsed()) {
            p_cfg.method = parse_prune_method(p_method);
            p_cfg.pad_policy = parse_pad_policy(p_pad);
            return cmd_prune(p_model, p_calib, p_out, p_report, p_cfg);
        }
        if (ev->parsed()) {
            return cmd_eval(e_model, e_type, e_path, e_seqlen, e_k, e_max_items, e_seed,
                            e_details, e_out);
        }
        if (run->parsed()) {
            return cmd_run(r_config, r_store);
        }
        if (report->parsed()) {
            return cmd_report(rp_store, rp_format, rp_out);
        }
    } catch (const ConfigError & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
