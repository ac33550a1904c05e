#include "prunekit/calib.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/tensor_file.hpp"

namespace prunekit {

namespace {
constexpr int PAIR_RETRY_BOUND = 100;
} // namespace

void CalibSpec::validate() const {
    if (n_samples < 1) {
        throw ConfigError("CalibSpec: n_samples must be at least 1");
    }
    if (seqlen < 16) {
        throw ConfigError("CalibSpec: seqlen must be at least 16");
    }
    const bool icl_like = format == CalibFormat::icl || format == CalibFormat::icl_cot;
    if (max_pairs.has_value()) {
        if (!icl_like) {
            throw ConfigError("CalibSpec: max_pairs is only valid with icl or icl-cot");
        }
        if (*max_pairs < 1) {
            throw ConfigError("CalibSpec: max_pairs must be at least 1");
        }
    }
    if (cot_steps.has_value()) {
        if (format != CalibFormat::icl_cot) {
            throw ConfigError("CalibSpec: cot_steps is only valid with icl-cot");
        }
        if (*cot_steps < 1) {
            throw ConfigError("CalibSpec: cot_steps must be at least 1");
        }
    }
    if (source == CalibSource::corpus && format != CalibFormat::pretraining) {
        throw ConfigError("CalibSpec: corpus source requires the pretraining format");
    }
    if (source == CalibSource::qa_dataset && format == CalibFormat::pretraining) {
        throw ConfigError("CalibSpec: qa-dataset source requires a prompt format");
    }
}

std::string render_question(const QAPair & pair) {
    return "Q: " + pair.question + "\nA:";
}

std::string render_pair(const QAPair & pair) {
    return "Q: " + pair.question + "\nA: " + pair.answer + "\n\n";
}

std::string render_pair_cot(const QAPair & pair) {
    std::string out = "Q: " + pair.question + "\nA: ";
    for (size_t i = 0; i < pair.rationale_steps.size(); i++) {
        if (i > 0) {
            out.push_back('\n');
        }
        out += pair.rationale_steps[i];
    }
    out += "\nThe answer is " + pair.answer + "\n\n";
    return out;
}

CalibBuild build_pretraining(const std::vector<std::string> & corpus, const CalibSpec & spec) {
    spec.validate();

    std::vector<TokenSequence> docs;
    size_t total_tokens = 0;
    for (const auto & d : corpus) {
        TokenSequence t = encode(d);
        total_tokens += t.size();
        if (!t.ids.empty()) {
            docs.push_back(std::move(t));
        }
    }
    const size_t seqlen = static_cast<size_t>(spec.seqlen);
    if (total_tokens < seqlen) {
        throw BuildError("build_pretraining: corpus has " + std::to_string(total_tokens) +
                         " tokens, need at least " + std::to_string(seqlen));
    }

    Rng rng(spec.seed);
    CalibBuild out;
    for (int s = 0; s < spec.n_samples; s++) {
        std::vector<int32_t> concat;
        while (concat.size() < seqlen) {
            const auto & doc = docs[rng_below(rng, docs.size())];
            concat.insert(concat.end(), doc.ids.begin(), doc.ids.end());
        }
        const uint64_t slack = concat.size() - seqlen;
        const uint64_t offset = rng_below(rng, slack + 1);
        std::vector<int32_t> ids(concat.begin() + static_cast<ptrdiff_t>(offset),
                                 concat.begin() + static_cast<ptrdiff_t>(offset + seqlen));
        out.samples.emplace_back(std::move(ids));
    }
    return out;
}

CalibBuild build_zero_shot(const QADataset & dataset, const CalibSpec & spec) {
    spec.validate();
    if (dataset.empty()) {
        throw BuildError("build_zero_shot: dataset is empty");
    }

    std::vector<size_t> eligible;
    for (size_t i = 0; i < dataset.size(); i++) {
        if (render_question(dataset[i]).size() <= static_cast<size_t>(spec.seqlen)) {
            eligible.push_back(i);
        }
    }
    CalibBuild out;
    out.skipped_questions = static_cast<int>(dataset.size() - eligible.size());
    if (eligible.empty()) {
        throw BuildError("build_zero_shot: all " + std::to_string(dataset.size()) +
                         " questions render longer than seqlen " + std::to_string(spec.seqlen));
    }

    Rng rng(spec.seed);
    for (int s = 0; s < spec.n_samples; s++) {
        const QAPair & pair = dataset[eligible[rng_below(rng, eligible.size())]];
        TokenSequence seq = encode(render_question(pair));
        pad_to(seq, static_cast<size_t>(spec.seqlen));
        out.samples.push_back(std::move(seq));
    }
    return out;
}

namespace {

// Shared packing loop for the ICL formats: pairs are drawn uniformly from
// the pool; a drawn pair that would overflow the remaining space is
// redrawn (bounded), so samples pack as many whole pairs as fit.
CalibBuild build_packed_pairs(const std::vector<size_t> & pool,
                              const std::vector<std::vector<int32_t>> & rendered,
                              const CalibSpec & spec, const std::string & what) {
    const size_t seqlen = static_cast<size_t>(spec.seqlen);
    size_t min_len = SIZE_MAX;
    for (size_t i : pool) {
        min_len = std::min(min_len, rendered[i].size());
    }
    if (min_len > seqlen) {
        throw BuildError(what + ": cannot fit even one pair within seqlen " +
                         std::to_string(seqlen));
    }

    Rng rng(spec.seed);
    CalibBuild out;
    for (int s = 0; s < spec.n_samples; s++) {
        std::vector<int32_t> ids;
        int pairs = 0;
        while (true) {
            if (spec.max_pairs.has_value() && pairs == *spec.max_pairs) {
                break;
            }
            const size_t remaining = seqlen - ids.size();
            if (min_len > remaining) {
                if (spec.max_pairs.has_value()) {
                    throw BuildError(what + ": cannot fit " + std::to_string(*spec.max_pairs) +
                                     " pairs within seqlen " + std::to_string(seqlen));
                }
                break;
            }
            size_t pick = pool[rng_below(rng, pool.size())];
            int retries = 0;
            while (rendered[pick].size() > remaining && retries < PAIR_RETRY_BOUND) {
                pick = pool[rng_below(rng, pool.size())];
                retries++;
            }
            if (rendered[pick].size() > remaining) {
                if (spec.max_pairs.has_value()) {
                    throw BuildError(what + ": retry bound exhausted while packing " +
                                     std::to_string(*spec.max_pairs) + " pairs");
                }
                break;
            }
            ids.insert(ids.end(), rendered[pick].begin(), rendered[pick].end());
            pairs++;
        }
        TokenSequence seq{std::move(ids)};
        pad_to(seq, seqlen);
        out.samples.push_back(std::move(seq));
    }
    return out;
}

} // namespace

CalibBuild build_icl(const QADataset & dataset, const CalibSpec & spec) {
    spec.validate();
    if (dataset.empty()) {
        throw BuildError("build_icl: dataset is empty");
    }
    std::vector<size_t> pool(dataset.size());
    std::vector<std::vector<int32_t>> rendered(dataset.size());
    for (size_t i = 0; i < dataset.size(); i++) {
        pool[i] = i;
        rendered[i] = encode(render_pair(dataset[i])).ids;
    }
    return build_packed_pairs(pool, rendered, spec, "build_icl");
}

CalibBuild build_icl_cot(const QADataset & dataset, const CalibSpec & spec) {
    spec.validate();
    if (dataset.empty()) {
        throw BuildError("build_icl_cot: dataset is empty");
    }
    std::vector<size_t> pool;
    std::vector<std::vector<int32_t>> rendered(dataset.size());
    for (size_t i = 0; i < dataset.size(); i++) {
        if (dataset[i].rationale_steps.empty()) {
            continue;
        }
        if (spec.cot_steps.has_value() &&
            dataset[i].rationale_steps.size() != static_cast<size_t>(*spec.cot_steps)) {
            continue;
        }
        pool.push_back(i);
        rendered[i] = encode(render_pair_cot(dataset[i])).ids;
    }
    if (pool.empty()) {
        if (spec.cot_steps.has_value()) {
            throw BuildError("build_icl_cot: no pairs with exactly " +
                             std::to_string(*spec.cot_steps) + " rationale steps");
        }
        throw BuildError("build_icl_cot: no pairs with rationale steps");
    }
    return build_packed_pairs(pool, rendered, spec, "build_icl_cot");
}

CalibBuild build_nonsense(CalibSource kind, const CalibSpec & spec) {
    spec.validate();
    const size_t seqlen = static_cast<size_t>(spec.seqlen);
    CalibBuild out;

    if (kind == CalibSource::nonsense_ellipses) {
        std::string text;
        text.reserve(seqlen);
        const char pattern[2] = {'.', ' '};
        for (size_t i = 0; i < seqlen; i++) {
            text.push_back(pattern[i % 2]);
        }
        const TokenSequence sample = encode(text);
        for (int s = 0; s < spec.n_samples; s++) {
            out.samples.push_back(sample);
        }
        return out;
    }
    if (kind == CalibSource::nonsense_alphanumeric) {
        static constexpr char ALNUM[] =
            "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
        Rng rng(spec.seed);
        for (int s = 0; s < spec.n_samples; s++) {
            std::string text(seqlen, '\0');
            for (size_t i = 0; i < seqlen; i++) {
                text[i] = ALNUM[rng_below(rng, 62)];
            }
            out.samples.push_back(encode(text));
        }
        return out;
    }
    throw ConfigError("build_nonsense: kind must be ellipses or alphanumeric");
}

CalibBuild build_calibration(const std::vector<std::string> & corpus, const QADataset & dataset,
                             const CalibSpec & spec) {
    spec.validate();
    switch (spec.source) {
        case CalibSource::corpus:
            return build_pretraining(corpus, spec);
        case CalibSource::qa_dataset:
            switch (spec.format) {
                case CalibFormat::zero_shot:
                    return build_zero_shot(dataset, spec);
                case CalibFormat::icl:
                    return build_icl(dataset, spec);
                case CalibFormat::icl_cot:
                    return build_icl_cot(dataset, spec);
                default:
                    throw ConfigError("build_calibration: bad format for qa-dataset source");
            }
        case CalibSource::nonsense_ellipses:
        case CalibSource::nonsense_alphanumeric:
            return build_nonsense(spec.source, spec);
    }
    throw ConfigError("build_calibration: unknown source");
}

QADataset load_jsonl(const std::string & path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("load_jsonl: cannot open '" + path + "'");
    }
    QADataset out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception & e) {
            throw IoError("load_jsonl: malformed JSON at " + path + ":" +
                          std::to_string(line_no) + ": " + e.what());
        }
        QAPair pair;
        if (!j.contains("question") || !j["question"].is_string() ||
            j["question"].get<std::string>().empty()) {
            throw IoError("load_jsonl: missing or empty \"question\" at " + path + ":" +
                          std::to_string(line_no));
        }
        if (!j.contains("answer") || !j["answer"].is_string() ||
            j["answer"].get<std::string>().empty()) {
            throw IoError("load_jsonl: missing or empty \"answer\" at " + path + ":" +
                          std::to_string(line_no));
        }
        pair.question = j["question"].get<std::string>();
        pair.answer = j["answer"].get<std::string>();
        if (j.contains("rationale_steps")) {
            if (!j["rationale_steps"].is_array()) {
                throw IoError("load_jsonl: \"rationale_steps\" must be an array at " + path + ":" +
                              std::to_string(line_no));
            }
            for (const auto & step : j["rationale_steps"]) {
                if (!step.is_string() || step.get<std::string>().empty()) {
                    throw IoError("load_jsonl: rationale steps must be non-empty strings at " +
                                  path + ":" + std::to_string(line_no));
                }
                pair.rationale_steps.push_back(step.get<std::string>());
            }
        }
        out.push_back(std::move(pair));
    }
    return out;
}

QADataset synth_arithmetic(uint64_t seed, int size, const std::vector<int> & step_range) {
    if (size < 0) {
        throw ConfigError("synth_arithmetic: size must be non-negative");
    }
    if (step_range.empty()) {
        throw ConfigError("synth_arithmetic: step_range is empty");
    }
    for (int s : step_range) {
        if (s < 1 || s > 8) {
            throw ConfigError("synth_arithmetic: step counts must lie in [1, 8]");
        }
    }

    static const char * NAMES[] = {"Alice", "Ben", "Carla", "Dev", "Ema", "Farid", "Gus", "Hana"};
    static const char * ITEMS[] = {"apples", "coins", "books", "marbles", "stones", "cards"};

    Rng rng(seed);
    QADataset out;
    out.reserve(static_cast<size_t>(size));
    for (int i = 0; i < size; i++) {
        const std::string name = NAMES[rng_below(rng, 8)];
        const std::string item = ITEMS[rng_below(rng, 6)];
        const int steps = step_range[rng_below(rng, step_range.size())];

        long value = 10 + static_cast<long>(rng_below(rng, 41));
        QAPair pair;
        pair.question = name + " has " + std::to_string(value) + " " + item + ". ";
        for (int s = 0; s < steps; s++) {
            const long delta = 1 + static_cast<long>(rng_below(rng, 20));
            const bool add = value - delta < 0 ? true : rng_below(rng, 2) == 0;
            const long next = add ? value + delta : value - delta;
            if (add) {
                pair.question += name + " gains " + std::to_string(delta) + " more " + item + ". ";
            } else {
                pair.question += name + " loses " + std::to_string(delta) + " " + item + ". ";
            }
            pair.rationale_steps.push_back(std::to_string(value) + (add ? " + " : " - ") +
                                           std::to_string(delta) + " = " + std::to_string(next));
            value = next;
        }
        pair.question += "How many " + item + " does " + name + " have?";
        pair.answer = std::to_string(value);
        out.push_back(std::move(pair));
    }
    return out;
}

void save_calib_batch(const std::string & path, const std::vector<TokenSequence> & samples) {
    if (samples.empty()) {
        throw ConfigError("save_calib_batch: no samples");
    }
    const size_t seqlen = samples[0].size();
    for (const auto & s : samples) {
        if (s.size() != seqlen) {
            throw ConfigError("save_calib_batch: samples have differing lengths");
        }
    }

    TensorFile file;
    file.config["n_samples"] = samples.size();
    file.config["seqlen"] = seqlen;

    TensorEntry ids;
    ids.name = "samples";
    ids.dtype = "u32";
    ids.shape = {static_cast<int64_t>(samples.size()), static_cast<int64_t>(seqlen)};
    ids.bytes.resize(samples.size() * seqlen * 4);
    TensorEntry pads;
    pads.name = "pad_from";
    pads.dtype = "u32";
    pads.shape = {static_cast<int64_t>(samples.size()), 1};
    pads.bytes.resize(samples.size() * 4);

    for (size_t i = 0; i < samples.size(); i++) {
        for (size_t t = 0; t < seqlen; t++) {
            const uint32_t v = static_cast<uint32_t>(samples[i].ids[t]);
            std::memcpy(ids.bytes.data() + (i * seqlen + t) * 4, &v, 4);
        }
        const uint32_t pf = static_cast<uint32_t>(samples[i].pad_from);
        std::memcpy(pads.bytes.data() + i * 4, &pf, 4);
    }
    file.tensors.push_back(std::move(ids));
    file.tensors.push_back(std::move(pads));
    save_tensor_file(path, file);
}

std::vector<TokenSequence> load_calib_batch(const std::string & path) {
    const TensorFile file = load_tensor_file(path);
    const TensorEntry * ids = file.find("samples");
    const TensorEntry * pads = file.find("pad_from");
    if (ids == nullptr || pads == nullptr || ids->dtype != "u32" || pads->dtype != "u32" ||
        ids->shape.size() != 2 || pads->shape.size() != 2) {
        throw IoError("calib batch '" + path + "': missing samples/pad_from tensors");
    }
    const int64_t n = ids->shape[0];
    const int64_t seqlen = ids->shape[1];
    if (pads->shape[0] != n || pads->shape[1] != 1) {
        throw IoError("calib batch '" + path + "': pad_from shape mismatch");
    }

    std::vector<TokenSequence> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; i++) {
        TokenSequence seq;
        seq.ids.resize(static_cast<size_t>(seqlen));
        for (int64_t t = 0; t < seqlen; t++) {
            uint32_t v = 0;
            std::memcpy(&v, ids->bytes.data() + (i * seqlen + t) * 4, 4);
            seq.ids[static_cast<size_t>(t)] = static_cast<int32_t>(v);
        }
        uint32_t pf = 0;
        std::memcpy(&pf, pads->bytes.data() + i * 4, 4);
        if (pf > static_cast<uint32_t>(seqlen)) {
            throw IoError("calib batch '" + path + "': pad_from out of range");
        }
        seq.pad_from = pf;
        for (size_t t = 0; t < seq.ids.size(); t++) {
            const bool should_pad = t >= seq.pad_from;
            if ((seq.ids[t] == TOK_PAD) != should_pad) {
                throw IoError("calib batch '" + path + "': sample " + std::to_string(i) +
                              " violates the suffix-padding layout");
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

} // namespace prunekit
