#include "mkbe/kg/text.hpp"

#include <cctype>
#include <unordered_map>

namespace mkbe::kg {

std::vector<std::int64_t> char_ids(std::string_view text) {
  std::vector<std::int64_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c >= 32 && c <= 126 ? c - 31 : 0);
  return ids;
}

std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab build_word_vocab(const std::vector<std::string>& texts, std::size_t min_count) {
  std::unordered_map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  for (const auto& t : texts)
    for (auto& w : word_tokens(t))
      if (counts[w]++ == 0) order.push_back(w);
  Vocab v;
  v.intern(kUnkWord);
  for (const auto& w : order)
    if (counts[w] >= min_count && w != kUnkWord) v.intern(w);
  return v;
}

std::vector<std::int64_t> word_ids(const Vocab& vocab, std::string_view text) {
  std::vector<std::int64_t> ids;
  for (const auto& w : word_tokens(text)) ids.push_back(vocab.find(w).value_or(0));
  return ids;
}

}  // namespace mkbe::kg
