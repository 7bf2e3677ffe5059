// SPDX-License-Identifier: Apache-2.0
#include "cpolab/tokenizer.hpp"

#include <numeric>

#include "cpolab/errors.hpp"

namespace cpolab {

std::vector<TokenId> ByteTokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char c : text) {
        ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    }
    return ids;
}

std::vector<std::size_t> ByteTokenizer::offsets(std::string_view text) const {
    std::vector<std::size_t> out(text.size());
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

std::string ByteTokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= kVocabSize) {
            throw InputError("token id " + std::to_string(id) + " outside the byte vocabulary");
        }
        if (id < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

std::vector<TokenId> ByteTokenizer::encode_prompt(std::string_view rendered_instruction) const {
    std::vector<TokenId> ids{kBos};
    const auto body = encode(rendered_instruction);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(static_cast<TokenId>('\n'));
    return ids;
}

} // namespace cpolab
