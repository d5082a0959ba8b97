#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace mkbe::io {

struct Array {
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint32_t>> data;

  template <class T>
  const std::vector<T>& as() const;
  std::size_t numel() const;
};

/// Versioned binary container: a JSON header plus named typed arrays.
///
///   "MKBE" kind[4] u32 version u64 header_len header_json
///   u32 array_count { u32 name_len name u8 dtype u32 rank u64 dims[rank] payload }*
///   u64 fnv1a64(all preceding bytes)
///
/// All integers little-endian. Arrays are written in name order.
struct Container {
  std::string kind;  // 4 characters, e.g. "KBAS" or "CKPT"
  std::uint32_t version = 1;
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Array> arrays;

  template <class T>
  void put(const std::string& name, std::vector<T> values, std::vector<std::uint64_t> shape = {});
  template <class T>
  const std::vector<T>& get(const std::string& name) const;
  const Array& array(const std::string& name) const;
  bool has(const std::string& name) const { return arrays.count(name) > 0; }
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 14695981039346656037ull);

std::string encode(const Container& c);
/// Throws StateError on any corruption, truncation, or kind mismatch.
Container decode(std::string_view bytes, std::string_view expected_kind);

void save(const std::string& path, const Container& c);
Container load(const std::string& path, std::string_view expected_kind);

}  // namespace mkbe::io
