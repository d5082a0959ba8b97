#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mkbe::kg {

enum class Modality : std::uint8_t { entity, categorical, numeric, short_text, long_text, image };

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view s);
bool is_text(Modality m);

struct RelationSchema {
  std::string name;
  Modality modality = Modality::entity;
  bool year = false;        // values are calendar years; eligible for the year filter
  int rating = 0;           // 1..5 when the relation encodes a rating level
  std::string group;        // toggle group tag, e.g. S, N, D, I or R, M, U
};

/// Default toggle group for a modality when the schema omits one.
std::string default_group(Modality m);

/// Ordered relation declarations. File format, one relation per line:
///   relation <TAB> modality [<TAB> flags [<TAB> group]]
/// flags is a comma-separated list of `year` and `rating=K`, or empty.
class ModalitySchema {
 public:
  static ModalitySchema load(const std::string& path);
  static ModalitySchema parse(std::string_view text, const std::string& origin = "<schema>");

  /// Adds a declaration; redeclaring a name is an error.
  void add(RelationSchema rel);
  const RelationSchema* find(std::string_view name) const;
  const RelationSchema& at(std::string_view name) const;
  const std::vector<RelationSchema>& relations() const noexcept { return relations_; }
  std::size_t size() const noexcept { return relations_.size(); }

  /// Names of the unique image relation, if any (two image relations are rejected).
  std::optional<std::string> image_relation() const;
  /// Rating relations sorted by rating level.
  std::vector<std::string> rating_relations() const;
  std::string to_tsv() const;

 private:
  std::vector<RelationSchema> relations_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mkbe::kg
