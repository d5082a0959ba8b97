#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mkbe::kg {

/// Dense 0-based string interning. Ids follow first-insertion order.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> names) {
    for (auto& n : names) intern(n);
  }

  std::uint32_t intern(std::string_view name) {
    auto it = ids_.find(std::string(name));
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<std::uint32_t>(names_.size());
    names_.emplace_back(name);
    ids_.emplace(names_.back(), id);
    return id;
  }

  std::optional<std::uint32_t> find(std::string_view name) const {
    auto it = ids_.find(std::string(name));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  std::uint32_t id(std::string_view name) const {
    if (auto v = find(name)) return *v;
    throw std::out_of_range("unknown name '" + std::string(name) + "'");
  }

  const std::string& name(std::uint32_t id) const {
    if (id >= names_.size()) throw std::out_of_range("vocabulary id " + std::to_string(id) + " out of range");
    return names_[id];
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

}  // namespace mkbe::kg
