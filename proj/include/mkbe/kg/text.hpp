#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mkbe/kg/vocab.hpp"

namespace mkbe::kg {

/// Char ids: 0 is UNK, printable ASCII 32..126 maps to 1..95.
inline constexpr std::size_t kCharVocabSize = 96;
std::vector<std::int64_t> char_ids(std::string_view text);

/// Lowercased whitespace tokens.
std::vector<std::string> word_tokens(std::string_view text);

inline constexpr const char* kUnkWord = "<unk>";

/// Word vocabulary: UNK at id 0, then tokens with count >= min_count in
/// first-seen order.
Vocab build_word_vocab(const std::vector<std::string>& texts, std::size_t min_count = 2);
std::vector<std::int64_t> word_ids(const Vocab& vocab, std::string_view text);

}  // namespace mkbe::kg
