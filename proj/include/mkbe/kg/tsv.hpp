#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace mkbe::kg {

std::vector<std::string_view> split_tabs(std::string_view line);

/// Calls fn(lineno, line) for every line, 1-based, with a trailing CR removed.
/// A final newline does not produce an extra empty line.
template <class Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t lineno = 0, pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    fn(++lineno, line);
    pos = end + 1;
  }
}

/// Whole file as bytes; throws InputError when unreadable.
std::string read_file(const std::string& path);

/// Writes to `path.tmp` then renames over `path`.
void write_file_atomic(const std::string& path, std::string_view bytes);

double parse_double(std::string_view s, const std::string& where);
long long parse_int(std::string_view s, const std::string& where);

}  // namespace mkbe::kg
