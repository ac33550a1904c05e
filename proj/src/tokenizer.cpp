#include "prunekit/tokenizer.hpp"

#include "prunekit/errors.hpp"

namespace prunekit {

TokenSequence encode(const std::string & text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(static_cast<int32_t>(c));
    }
    return TokenSequence(std::move(ids));
}

std::string decode(const TokenSequence & seq) {
    std::string out;
    out.reserve(seq.ids.size());
    for (int32_t id : seq.ids) {
        if (id >= 0 && id < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

void pad_to(TokenSequence & seq, size_t len) {
    if (seq.ids.size() > len) {
        throw ConfigError("pad_to: sequence longer than target length");
    }
    seq.pad_from = seq.ids.size();
    seq.ids.resize(len, TOK_PAD);
}

} // namespace prunekit
