#include "prunekit/eval.hpp"

#include <cmath>
#include <regex>

#include <json.hpp>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

std::string EvalResult::to_json(bool include_details) const {
    nlohmann::ordered_json j;
    j["metric"] = metric;
    j["value"] = value;
    j["n_items"] = n_items;
    j["skipped"] = skipped;
    if (include_details) {
        j["details"] = nlohmann::ordered_json::array();
        for (const auto & d : details) {
            nlohmann::ordered_json e;
            e["index"] = d.index;
            e["skipped"] = d.skipped;
            e["correct"] = d.correct;
            e["expected"] = d.expected;
            e["extracted"] = d.extracted;
            j["details"].push_back(std::move(e));
        }
    }
    return j.dump(2);
}

EvalResult perplexity(const Checkpoint & model, const std::string & corpus, int seqlen) {
    if (corpus.empty()) {
        throw ConfigError("perplexity: corpus is empty");
    }
    if (seqlen < 2 || seqlen > model.config.max_seqlen) {
        throw ConfigError("perplexity: seqlen must lie in [2, max_seqlen]");
    }
    const TokenSequence all = encode(corpus);
    const size_t n_windows = all.size() / static_cast<size_t>(seqlen);
    if (n_windows == 0) {
        throw ConfigError("perplexity: corpus has " + std::to_string(all.size()) +
                          " tokens, need at least " + std::to_string(seqlen));
    }

    double nll = 0.0;
    uint64_t count = 0;
    for (size_t w = 0; w < n_windows; w++) {
        TokenSequence window;
        window.ids.assign(all.ids.begin() + static_cast<ptrdiff_t>(w * seqlen),
                          all.ids.begin() + static_cast<ptrdiff_t>((w + 1) * seqlen));
        window.pad_from = window.ids.size();

        const ForwardResult fr = forward(model, window);
        for (int t = 0; t + 1 < seqlen; t++) {
            const int32_t target = window.ids[static_cast<size_t>(t) + 1];
            if (target == TOK_PAD) {
                continue;
            }
            const float * lr = fr.logits.row(t);
            float max_l = lr[0];
            for (int b = 1; b < model.config.vocab_size; b++) {
                max_l = std::max(max_l, lr[b]);
            }
            double denom = 0.0;
            for (int b = 0; b < model.config.vocab_size; b++) {
                denom += std::exp(static_cast<double>(lr[b]) - max_l);
            }
            nll += max_l + std::log(denom) - lr[target];
            count++;
        }
    }

    EvalResult out;
    out.metric = "perplexity";
    out.value = std::exp(nll / static_cast<double>(count));
    out.n_items = static_cast<int>(n_windows);
    return out;
}

std::string extract_final_answer(const std::string & text) {
    static const std::regex INT_RE("[+-]?[0-9][0-9,]*");
    std::string last;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), INT_RE);
         it != std::sregex_iterator(); ++it) {
        last = it->str();
    }
    if (!last.empty()) {
        std::string digits;
        for (char c : last) {
            if (c != ',') {
                digits.push_back(c);
            }
        }
        return digits;
    }
    // Fallback: trimmed first line.
    std::string line = text.substr(0, text.find('\n'));
    const size_t begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) {
        return "";
    }
    const size_t end = line.find_last_not_of(" \t\r");
    return line.substr(begin, end - begin + 1);
}

EvalResult few_shot_accuracy(const Checkpoint & model, const QADataset & dataset, int k_shots,
                             uint64_t seed, int max_items, int max_new) {
    if (k_shots < 0) {
        throw ConfigError("few_shot_accuracy: k_shots must be non-negative");
    }
    if (static_cast<int>(dataset.size()) < k_shots + 1) {
        throw ConfigError("few_shot_accuracy: dataset too small for " + std::to_string(k_shots) +
                          " demonstrations plus a test item");
    }

    const int n_test = max_items > 0
                           ? std::min(max_items, static_cast<int>(dataset.size()))
                           : static_cast<int>(dataset.size());

    EvalResult out;
    out.metric = "accuracy";
    int correct = 0;
    int evaluated = 0;

    for (int i = 0; i < n_test; i++) {
        EvalItemRecord rec;
        rec.index = i;
        rec.expected = extract_final_answer(dataset[static_cast<size_t>(i)].answer);

        // Demonstrations depend only on (seed, item); prompts are shared
        // across every checkpoint evaluated with the same seed.
        Rng rng(rng_derive_seed(seed, static_cast<uint64_t>(i)));
        std::vector<size_t> demos;
        while (static_cast<int>(demos.size()) < k_shots) {
            const size_t cand = rng_below(rng, dataset.size());
            if (cand == static_cast<size_t>(i)) {
                continue;
            }
            if (std::find(demos.begin(), demos.end(), cand) != demos.end()) {
                continue;
            }
            demos.push_back(cand);
        }

        std::string prompt_text;
        for (size_t d : demos) {
            prompt_text += render_pair(dataset[d]);
        }
        prompt_text += render_question(dataset[static_cast<size_t>(i)]);

        const TokenSequence prompt = encode(prompt_text);
        if (prompt.size() + static_cast<size_t>(max_new) >
            static_cast<size_t>(model.config.max_seqlen)) {
            rec.skipped = true;
            out.skipped++;
            out.details.push_back(std::move(rec));
            continue;
        }

        const TokenSequence full = generate(model, prompt, max_new);
        TokenSequence continuation;
        continuation.ids.assign(full.ids.begin() + static_cast<ptrdiff_t>(prompt.size()),
                                full.ids.end());
        continuation.pad_from = continuation.ids.size();
        std::string text = decode(continuation);
        text = text.substr(0, text.find('\n'));

        rec.extracted = extract_final_answer(text);
        rec.correct = !rec.expected.empty() && rec.extracted == rec.expected;
        correct += rec.correct ? 1 : 0;
        evaluated++;
        out.details.push_back(std::move(rec));
    }

    if (evaluated == 0) {
        throw ConfigError("few_shot_accuracy: every item was skipped (prompts too long)");
    }
    out.value = static_cast<double>(correct) / static_cast<double>(evaluated);
    out.n_items = evaluated;
    return out;
}

} // namespace prunekit
