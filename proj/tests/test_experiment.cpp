#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "prunekit/experiment.hpp"
#include "prunekit/rng.hpp"

using namespace prunekit;

namespace {

std::string scratch_dir() {
    static std::string dir = [] {
        std::string d = "/tmp/prunekit_exp_" + std::to_string(getpid());
        std::filesystem::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

RunRecord make_record(const std::string & calib, const std::string & prune,
                      const std::string & eval, int64_t seed, double value) {
    RunRecord r;
    r.key = calib + prune + eval + std::to_string(seed);
    r.calib_id = calib;
    r.prune_id = prune;
    r.eval_id = eval;
    r.seed = seed;
    r.value = value;
    return r;
}

// A complete toy experiment on disk: tiny untrained model, corpus file,
// QA dataset file, and a config with every list filled in.
struct Fixture {
    std::string model_path;
    std::string corpus_path;
    std::string jsonl_path;
    ExperimentConfig config;
};

Fixture make_fixture(const std::string & tag) {
    Fixture fx;
    const std::string dir = scratch_dir();
    fx.model_path = dir + "/model_" + tag + ".ckpt";
    fx.corpus_path = dir + "/corpus_" + tag + ".txt";
    fx.jsonl_path = dir + "/data_" + tag + ".jsonl";

    TransformerConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ff = 8;
    cfg.max_seqlen = 64;
    save_checkpoint(fx.model_path, init_checkpoint(cfg, 99));

    {
        std::ofstream out(fx.corpus_path, std::ios::trunc);
        for (int i = 0; i < 200; i++) {
            out << "sample sentence number " << i << ". ";
        }
    }
    {
        std::ofstream out(fx.jsonl_path, std::ios::trunc);
        const QADataset data = synth_arithmetic(7, 12, {1});
        for (const auto & p : data) {
            nlohmann::json j;
            j["question"] = p.question;
            j["answer"] = p.answer;
            out << j.dump() << "\n";
        }
    }

    CalibSpecEntry calib;
    calib.id = "corpus-pt";
    calib.source = CalibSource::corpus;
    calib.path = fx.corpus_path;
    calib.format = CalibFormat::pretraining;
    calib.n_samples = 2;
    calib.seqlen = 32;
    fx.config.calib_specs.push_back(calib);

    PruneConfigEntry prune;
    prune.id = "wanda-50";
    prune.method = PruneMethod::wanda;
    prune.sparsity = 0.5;
    fx.config.prune_configs.push_back(prune);

    EvalTaskEntry ppl;
    ppl.id = "ppl";
    ppl.type = EvalTaskType::perplexity;
    ppl.path = fx.corpus_path;
    ppl.seqlen = 32;
    fx.config.eval_tasks.push_back(ppl);

    EvalTaskEntry fs;
    fs.id = "arith";
    fs.type = EvalTaskType::few_shot;
    fs.path = fx.jsonl_path;
    fs.k_shots = 1;
    fs.max_items = 3;
    fx.config.eval_tasks.push_back(fs);

    fx.config.model_path = fx.model_path;
    fx.config.seeds = {0, 1, 2};
    return fx;
}

} // namespace

TEST_CASE("aggregate computes mean and twice the sample deviation") {
    std::vector<RunRecord> records;
    records.push_back(make_record("c", "p", "e", 0, 0.1));
    records.push_back(make_record("c", "p", "e", 1, 0.2));
    records.push_back(make_record("c", "p", "e", 2, 0.3));

    const auto aggs = aggregate(records);
    REQUIRE(aggs.size() == 1);
    CHECK(aggs[0].mean == doctest::Approx(0.2).epsilon(1e-12));
    REQUIRE(aggs[0].two_sigma.has_value());
    CHECK(*aggs[0].two_sigma == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(aggs[0].n == 3);
    CHECK(format_cell(aggs[0].mean, aggs[0].two_sigma) == "0.2000 ± 0.2000");
}

TEST_CASE("aggregate handles degenerate groups") {
    std::vector<RunRecord> one = {make_record("c", "p", "e", 0, 0.42)};
    auto aggs = aggregate(one);
    REQUIRE(aggs.size() == 1);
    CHECK(aggs[0].mean == 0.42);
    CHECK(!aggs[0].two_sigma.has_value());
    CHECK(format_cell(aggs[0].mean, aggs[0].two_sigma) == "0.4200");

    std::vector<RunRecord> equal;
    for (int s = 0; s < 3; s++) {
        equal.push_back(make_record("c", "p", "e", s, 0.5));
    }
    aggs = aggregate(equal);
    REQUIRE(aggs.size() == 1);
    REQUIRE(aggs[0].two_sigma.has_value());
    CHECK(*aggs[0].two_sigma == 0.0);
}

TEST_CASE("aggregate ignores failed records and is permutation invariant") {
    std::vector<RunRecord> records;
    records.push_back(make_record("c", "p", "e", 0, 1.0));
    RunRecord failed;
    failed.key = "k";
    failed.calib_id = "c";
    failed.prune_id = "p";
    failed.eval_id = "e";
    failed.seed = 1;
    failed.error = "boom";
    records.push_back(failed);
    records.push_back(make_record("b", "p", "e", 0, 2.0));

    const auto sorted_aggs = aggregate(records);
    std::reverse(records.begin(), records.end());
    const auto reversed_aggs = aggregate(records);

    REQUIRE(sorted_aggs.size() == 2);
    CHECK(sorted_aggs[0].calib_id == "b");
    CHECK(sorted_aggs[1].n == 1); // the failed record dropped out
    REQUIRE(reversed_aggs.size() == sorted_aggs.size());
    for (size_t i = 0; i < sorted_aggs.size(); i++) {
        CHECK(sorted_aggs[i].calib_id == reversed_aggs[i].calib_id);
        CHECK(sorted_aggs[i].mean == reversed_aggs[i].mean);
    }
}

TEST_CASE("empty aggregates produce a header-only CSV") {
    CHECK(emit_report_csv({}) == "calib,prune,eval,mean,two_sigma,n\n");
}

TEST_CASE("csv output re-parses to the printed values") {
    std::vector<RunRecord> records;
    records.push_back(make_record("c4", "wanda-50", "gsm", 0, 0.04571)); // rounds to 0.0457
    records.push_back(make_record("c4", "wanda-50", "gsm", 1, 0.04129));
    records.push_back(make_record("pile", "wanda-50", "gsm", 0, 0.0404));
    const auto aggs = aggregate(records);
    const std::string csv = emit_report_csv(aggs);

    // Parse back and re-emit: identical bytes.
    std::vector<AggregateResult> parsed;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        AggregateResult a;
        std::string field;
        std::istringstream ls(line);
        std::getline(ls, a.calib_id, ',');
        std::getline(ls, a.prune_id, ',');
        std::getline(ls, a.eval_id, ',');
        std::getline(ls, field, ',');
        a.mean = std::stod(field);
        std::getline(ls, field, ',');
        if (!field.empty()) {
            a.two_sigma = std::stod(field);
        }
        std::getline(ls, field, ',');
        a.n = std::stoi(field);
        parsed.push_back(a);
    }
    CHECK(emit_report_csv(parsed) == csv);
}

TEST_CASE("markdown bolds the best sparse cell per row") {
    std::vector<RunRecord> records;
    records.push_back(make_record("dense", "dense", "gsm", 0, 0.9));
    records.push_back(make_record("c4", "wanda-50", "gsm", 0, 0.1));
    records.push_back(make_record("c4", "wanda-50", "gsm", 1, 0.3));
    records.push_back(make_record("pile", "wanda-50", "gsm", 0, 0.5));
    records.push_back(make_record("pile", "wanda-50", "gsm", 1, 0.7));

    const std::string md = emit_report_markdown(aggregate(records));
    CHECK(md.find("| eval | Dense | wanda-50/c4 | wanda-50/pile |") == 0);
    CHECK(md.find("**0.6000 ± 0.2828**") != std::string::npos); // pile mean bolded
    CHECK(md.find("**0.2000") == std::string::npos);                 // c4 mean is not
    CHECK(md.find("| 0.9000 |") != std::string::npos);               // dense never bolded
}

TEST_CASE("the matrix runs every cell plus the dense baseline") {
    const Fixture fx = make_fixture("count");
    const std::string store = scratch_dir() + "/store_count.jsonl";
    std::remove(store.c_str());
    std::remove((store + ".timings").c_str());

    const auto records = run_matrix(fx.config, store);
    // 1 calib x 1 prune x 2 evals x 3 seeds + 2 dense records
    CHECK(records.size() == 8);
    int n_dense = 0;
    for (const auto & r : records) {
        CHECK(r.value.has_value());
        n_dense += r.calib_id == "dense" ? 1 : 0;
    }
    CHECK(n_dense == 2);
}

TEST_CASE("a second run from scratch is byte-identical") {
    const Fixture fx = make_fixture("det");
    const std::string s1 = scratch_dir() + "/store_det1.jsonl";
    const std::string s2 = scratch_dir() + "/store_det2.jsonl";
    std::remove(s1.c_str());
    std::remove(s2.c_str());
    run_matrix(fx.config, s1);
    run_matrix(fx.config, s2);
    CHECK(slurp(s1) == slurp(s2));

    const auto aggs1 = aggregate(load_record_store(s1));
    const auto aggs2 = aggregate(load_record_store(s2));
    CHECK(emit_report_csv(aggs1) == emit_report_csv(aggs2));
    CHECK(emit_report_markdown(aggs1) == emit_report_markdown(aggs2));
}

TEST_CASE("an interrupted run resumes to the identical store") {
    const Fixture fx = make_fixture("resume");
    const std::string full_store = scratch_dir() + "/store_full.jsonl";
    const std::string part_store = scratch_dir() + "/store_part.jsonl";
    std::remove(full_store.c_str());
    std::remove(part_store.c_str());

    run_matrix(fx.config, full_store);
    const std::string full = slurp(full_store);

    // Simulate an interruption: keep only the first 3 lines.
    std::istringstream in(full);
    std::string line;
    std::string prefix;
    for (int i = 0; i < 3 && std::getline(in, line); i++) {
        prefix += line + "\n";
    }
    {
        std::ofstream out(part_store, std::ios::trunc | std::ios::binary);
        out << prefix;
    }

    const auto resumed = run_matrix(fx.config, part_store);
    CHECK(slurp(part_store) == full);
    CHECK(resumed.size() == 8);
}

TEST_CASE("failed cells are recorded and the matrix continues") {
    Fixture fx = make_fixture("fail");
    // A zero-shot calibration whose only questions cannot fit in seqlen.
    {
        std::ofstream out(fx.jsonl_path, std::ios::trunc);
        nlohmann::json j;
        j["question"] = std::string(400, 'q');
        j["answer"] = "1";
        out << j.dump() << "\n";
    }
    CalibSpecEntry bad;
    bad.id = "bad-zs";
    bad.source = CalibSource::qa_dataset;
    bad.path = fx.jsonl_path;
    bad.format = CalibFormat::zero_shot;
    bad.n_samples = 2;
    bad.seqlen = 32;
    fx.config.calib_specs = {bad};
    fx.config.eval_tasks.resize(1); // keep the perplexity task only
    fx.config.seeds = {0};

    const std::string store = scratch_dir() + "/store_fail.jsonl";
    std::remove(store.c_str());
    const auto records = run_matrix(fx.config, store);
    REQUIRE(records.size() == 2); // dense + 1 failed cell
    CHECK(records[0].value.has_value());
    CHECK(!records[1].value.has_value());
    CHECK(!records[1].error.empty());
}

TEST_CASE("config validation runs before any work") {
    Fixture fx = make_fixture("valid");
    fx.config.model_path = "/nonexistent/model.ckpt";
    CHECK_THROWS_AS(run_matrix(fx.config, scratch_dir() + "/never.jsonl"), ConfigError);

    fx = make_fixture("valid2");
    fx.config.seeds = {1, 1};
    CHECK_THROWS_AS(fx.config.validate(), ConfigError);

    fx = make_fixture("valid3");
    fx.config.calib_specs[0].id = "has space";
    CHECK_THROWS_AS(fx.config.validate(), ConfigError);
}

TEST_CASE("experiment configs parse from JSON") {
    const Fixture fx = make_fixture("json");
    nlohmann::ordered_json j;
    j["model"] = fx.model_path;
    j["calib_specs"] = nlohmann::json::array();
    j["calib_specs"].push_back({{"id", "pt"},
                                {"source", "corpus"},
                                {"path", fx.corpus_path},
                                {"format", "pretraining"},
                                {"n_samples", 2},
                                {"seqlen", 32}});
    j["calib_specs"].push_back({{"id", "icl5"},
                                {"source", "qa-dataset"},
                                {"path", fx.jsonl_path},
                                {"format", "icl"},
                                {"n_samples", 2},
                                {"seqlen", 64},
                                {"max_pairs", 5}});
    j["calib_specs"].push_back(
        {{"id", "dots"}, {"source", "nonsense-ellipses"}, {"n_samples", 2}, {"seqlen", 32}});
    j["prune_configs"] = nlohmann::json::array();
    j["prune_configs"].push_back(
        {{"id", "sgpt-70"}, {"method", "sparsegpt"}, {"sparsity", 0.7}, {"eps", 0.02}});
    j["eval_tasks"] = nlohmann::json::array();
    j["eval_tasks"].push_back(
        {{"id", "ppl"}, {"type", "perplexity"}, {"path", fx.corpus_path}, {"seqlen", 32}});
    j["seeds"] = {4, 5};

    const ExperimentConfig cfg = ExperimentConfig::from_json(j.dump());
    cfg.validate();
    CHECK(cfg.calib_specs.size() == 3);
    CHECK(cfg.calib_specs[1].max_pairs.value() == 5);
    CHECK(cfg.calib_specs[2].source == CalibSource::nonsense_ellipses);
    CHECK(cfg.prune_configs[0].method == PruneMethod::sparsegpt);
    CHECK(cfg.prune_configs[0].eps == 0.02);
    CHECK(cfg.seeds == std::vector<int64_t>{4, 5});

    CHECK_THROWS_AS(ExperimentConfig::from_json("{not json"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{}"), ConfigError);
}
