#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkbe/io/container.hpp"
#include "mkbe/kg/features.hpp"
#include "mkbe/kg/schema.hpp"
#include "mkbe/kg/vocab.hpp"

namespace mkbe::kg {

enum class Split : std::uint8_t { train = 0, valid = 1, test = 2 };
inline constexpr std::array<Split, 3> kSplits{Split::train, Split::valid, Split::test};
std::string_view split_name(Split s);

/// ⟨s, r, o⟩ with o indexing the store of r's modality: an entity id, a
/// numeric value id, a categorical id, a text id, or an image feature row.
struct Triple {
  std::uint32_t s = 0;
  std::uint32_t r = 0;
  std::uint32_t o = 0;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept {
    std::uint64_t h = (static_cast<std::uint64_t>(t.s) << 32) ^ (static_cast<std::uint64_t>(t.r) << 48) ^ t.o;
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return static_cast<std::size_t>(h);
  }
};

struct NumericStats {
  double mean = 0.0;
  double std = 1.0;  // population standard deviation over train values
};

/// Per-source ingestion accounting: rows == added + unknown_entity + year_filtered + duplicates.
struct IngestCounts {
  std::string source;
  Split split = Split::train;
  std::size_t rows = 0;
  std::size_t added = 0;
  std::size_t unknown_entity = 0;
  std::size_t year_filtered = 0;
  std::size_t duplicates = 0;
};

struct AttributeFiles {
  std::string numeric;
  std::string categorical;
  std::string text;
  std::string image_features;
  std::string image_map;
  bool year_filter = false;  // drop year-flagged values <= 1000
};

/// Triple store with per-modality value stores, vocabularies and splits.
///
/// Built by a single writer through the load/add calls, then frozen by
/// finalize(); afterwards it is read-only and safe to share across threads.
class MultimodalKB {
 public:
  explicit MultimodalKB(ModalitySchema schema = {});

  // Construction. All of these throw std::logic_error after finalize().
  IngestCounts load_triples(const std::string& path, Split split);
  std::vector<IngestCounts> attach_attributes(const AttributeFiles& files);
  bool add_link(std::string_view s, std::string_view r, std::string_view o, Split split = Split::train);
  bool add_numeric(std::string_view e, std::string_view r, double value, Split split = Split::train);
  bool add_categorical(std::string_view e, std::string_view r, std::string_view label, Split split = Split::train);
  bool add_text(std::string_view e, std::string_view r, std::string_view text, Split split = Split::train);
  void set_image_features(FeatureMatrix m);
  bool add_image(std::string_view e, std::uint32_t row, Split split = Split::train);
  /// Moves a seeded fraction of each numeric/categorical relation's train
  /// triples to the test split. Returns the number moved.
  std::size_t hold_out_attributes(double fraction, std::uint64_t seed);
  /// Builds indices, word vocabulary and numeric standardization; freezes.
  void finalize();
  bool finalized() const noexcept { return finalized_; }

  const ModalitySchema& schema() const noexcept { return schema_; }
  const Vocab& entities() const noexcept { return entities_; }
  const Vocab& relations() const noexcept { return relations_; }
  const RelationSchema& relation(std::uint32_t r) const;
  Modality modality(std::uint32_t r) const { return relation(r).modality; }
  std::size_t num_entities() const noexcept { return entities_.size(); }
  std::size_t num_relations() const noexcept { return relations_.size(); }
  const std::vector<Triple>& triples(Split s) const { return triples_[static_cast<int>(s)]; }
  const std::vector<IngestCounts>& ingest_report() const noexcept { return ingest_; }

  // Value stores.
  std::size_t num_numeric() const noexcept { return numeric_values_.size(); }
  double numeric_value(std::uint32_t id) const { return numeric_values_.at(id); }
  /// Standardized value using the owning relation's train statistics.
  double numeric_z(std::uint32_t id) const;
  std::size_t num_categorical() const noexcept { return categorical_labels_.size(); }
  const std::string& categorical_label(std::uint32_t id) const { return categorical_labels_.at(id); }
  std::uint32_t categorical_relation(std::uint32_t id) const { return categorical_relation_.at(id); }
  std::optional<std::uint32_t> find_categorical(std::uint32_t r, std::string_view label) const;
  std::size_t num_texts() const noexcept { return texts_.size(); }
  const std::string& text(std::uint32_t id) const { return texts_.at(id); }
  /// Char ids for short text, word ids for long text.
  const std::vector<std::int64_t>& text_tokens(std::uint32_t id) const;
  const Vocab& word_vocab() const noexcept { return words_; }
  const FeatureMatrix& image_features() const noexcept { return features_; }
  std::optional<std::uint32_t> image_relation() const;

  const NumericStats& numeric_stats(std::uint32_t r) const;
  bool has_numeric_stats(std::uint32_t r) const;
  double standardize(std::uint32_t r, double x) const;
  double destandardize(std::uint32_t r, double z) const;

  // Indices, available after finalize().
  /// Sorted objects o with ⟨s,r,o⟩ in the split.
  std::span<const std::uint32_t> objects(Split split, std::uint32_t s, std::uint32_t r) const;
  /// True if ⟨s,r,o⟩ is in any split.
  bool contains(const Triple& t) const { return known_.count(t) > 0; }
  /// Distinct train objects of a relation, sorted.
  std::span<const std::uint32_t> train_values(std::uint32_t r) const;
  /// Distinct train (s, r) pairs, sorted.
  const std::vector<std::pair<std::uint32_t, std::uint32_t>>& train_queries() const { return train_queries_; }
  /// Size of the object store of a modality (entities for entity relations).
  std::size_t store_size(Modality m) const;

  io::Container to_container() const;
  static MultimodalKB from_container(const io::Container& c);
  void save(const std::string& path) const;
  static MultimodalKB load(const std::string& path);

 private:
  void require_mutable() const;
  void require_frozen() const;
  std::uint32_t relation_for(std::string_view r, Split split, Modality expected);
  bool insert(const Triple& t, Split split);
  std::uint32_t intern_numeric(std::uint32_t r, double v);
  std::uint32_t intern_categorical(std::uint32_t r, std::string_view label);
  std::uint32_t intern_text(std::uint32_t r, std::string_view text);
  IngestCounts ingest_attribute_file(const std::string& path, Modality family, bool year_filter);

  ModalitySchema schema_;
  Vocab entities_;
  Vocab relations_;
  std::array<std::vector<Triple>, 3> triples_;
  std::unordered_set<Triple, TripleHash> known_;
  std::vector<IngestCounts> ingest_;

  std::vector<double> numeric_values_;
  std::vector<std::uint32_t> numeric_relation_;
  std::unordered_map<std::string, std::uint32_t> numeric_index_;
  std::vector<std::string> categorical_labels_;
  std::vector<std::uint32_t> categorical_relation_;
  std::unordered_map<std::string, std::uint32_t> categorical_index_;
  std::vector<std::string> texts_;
  std::vector<std::uint32_t> text_relation_;
  std::unordered_map<std::string, std::uint32_t> text_index_;
  FeatureMatrix features_;

  bool finalized_ = false;
  Vocab words_;
  std::vector<std::vector<std::int64_t>> text_tokens_;
  std::vector<std::optional<NumericStats>> stats_;
  std::vector<double> numeric_z_;
  std::array<std::unordered_map<std::uint64_t, std::vector<std::uint32_t>>, 3> by_query_;
  std::vector<std::vector<std::uint32_t>> train_values_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> train_queries_;
};

/// Population mean and standard deviation of the relation's train values.
/// Throws InputError with fewer than two values or zero variance.
NumericStats standardize_numeric(const MultimodalKB& kb, std::uint32_t r);

/// Summary counts as JSON: entities, relations, triples per split and
/// per modality, and the ingestion reconciliation.
nlohmann::json kb_stats(const MultimodalKB& kb);
std::string format_stats(const nlohmann::json& stats);

}  // namespace mkbe::kg
