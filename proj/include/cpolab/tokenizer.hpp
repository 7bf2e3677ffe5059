// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpolab/token.hpp"

namespace cpolab {

// One token per byte plus three specials. Token i of encode(text) starts at
// byte offset i of text.
class ByteTokenizer {
public:
    static constexpr TokenId kBos = 256;
    static constexpr TokenId kEos = 257;
    static constexpr TokenId kPad = 258;
    static constexpr std::size_t kVocabSize = 259;

    std::vector<TokenId> encode(std::string_view text) const;
    // First-byte offset of every token produced by encode(text).
    std::vector<std::size_t> offsets(std::string_view text) const;
    // Special tokens are dropped; ids outside the vocabulary throw InputError.
    std::string decode(std::span<const TokenId> ids) const;

    // BOS, the rendered instruction, then a newline separating it from the summary.
    std::vector<TokenId> encode_prompt(std::string_view rendered_instruction) const;
};

} // namespace cpolab
