#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace prunekit {

// Byte-level vocabulary: ids 0..255 are the raw bytes, followed by the
// three specials. 259 symbols total.
constexpr int32_t TOK_PAD = 256;
constexpr int32_t TOK_BOS = 257;
constexpr int32_t TOK_EOS = 258;
constexpr int32_t BYTE_VOCAB_SIZE = 259;

// A token sequence with suffix padding: ids[i] == PAD exactly for
// i >= pad_from.
struct TokenSequence {
    std::vector<int32_t> ids;
    size_t pad_from = 0; // == ids.size() when there is no padding

    TokenSequence() = default;
    explicit TokenSequence(std::vector<int32_t> toks) : ids(std::move(toks)), pad_from(ids.size()) {}

    size_t size() const { return ids.size(); }
    bool is_pad(size_t i) const { return i >= pad_from; }

    std::vector<uint8_t> pad_flags() const {
        std::vector<uint8_t> flags(ids.size(), 0);
        for (size_t i = pad_from; i < ids.size(); i++) {
            flags[i] = 1;
        }
        return flags;
    }
};

// Byte-identity encoding: token id i in [0,255] is byte i.
TokenSequence encode(const std::string & text);

// Inverse of encode; special tokens are skipped.
std::string decode(const TokenSequence & seq);

// Appends PAD tokens until the sequence has exactly `len` ids. The
// sequence must not already exceed `len`.
void pad_to(TokenSequence & seq, size_t len);

} // namespace prunekit
