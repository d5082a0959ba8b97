#include "mkbe/kg/kb.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "mkbe/errors.hpp"
#include "mkbe/kg/text.hpp"
#include "mkbe/kg/tsv.hpp"

namespace mkbe::kg {

namespace {

constexpr const char* kKbKind = "KBAS";
constexpr std::uint32_t kKbVersion = 1;

std::uint64_t query_key(std::uint32_t s, std::uint32_t r) { return (static_cast<std::uint64_t>(s) << 32) | r; }

std::string store_key(std::uint32_t r, std::string_view value) {
  std::string k(reinterpret_cast<const char*>(&r), sizeof(r));
  k += value;
  return k;
}

std::string store_key(std::uint32_t r, double value) {
  if (value == 0.0) value = 0.0;  // fold -0 onto +0
  return store_key(r, std::string_view(reinterpret_cast<const char*>(&value), sizeof(value)));
}

bool attribute_family_accepts(Modality family, Modality m) {
  if (family == Modality::short_text) return is_text(m);
  return family == m;
}

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

MultimodalKB::MultimodalKB(ModalitySchema schema) : schema_(std::move(schema)) {
  for (const auto& r : schema_.relations()) relations_.intern(r.name);
}

void MultimodalKB::require_mutable() const {
  if (finalized_) throw std::logic_error("knowledge base is finalized and read-only");
}

void MultimodalKB::require_frozen() const {
  if (!finalized_) throw std::logic_error("knowledge base indices are built by finalize()");
}

const RelationSchema& MultimodalKB::relation(std::uint32_t r) const {
  if (r >= relations_.size()) throw std::out_of_range("relation id " + std::to_string(r) + " out of range");
  return schema_.relations()[r];
}

std::uint32_t MultimodalKB::relation_for(std::string_view name, Split split, Modality expected) {
  if (auto id = relations_.find(name)) {
    const auto m = schema_.relations()[*id].modality;
    if (!attribute_family_accepts(expected, m)) {
      throw InputError("relation '" + std::string(name) + "' is declared " + std::string(modality_name(m)) +
                       ", not " + std::string(modality_name(expected)));
    }
    return *id;
  }
  if (split != Split::train || expected != Modality::entity)
    throw InputError("relation '" + std::string(name) + "' has no schema entry");
  schema_.add(RelationSchema{std::string(name), Modality::entity, false, 0, default_group(Modality::entity)});
  return relations_.intern(name);
}

bool MultimodalKB::insert(const Triple& t, Split split) {
  if (!known_.insert(t).second) return false;
  triples_[static_cast<int>(split)].push_back(t);
  return true;
}

std::uint32_t MultimodalKB::intern_numeric(std::uint32_t r, double v) {
  if (!std::isfinite(v)) throw InputError("non-finite numeric value for relation '" + relations_.name(r) + "'");
  auto [it, fresh] = numeric_index_.try_emplace(store_key(r, v), static_cast<std::uint32_t>(numeric_values_.size()));
  if (fresh) {
    numeric_values_.push_back(v);
    numeric_relation_.push_back(r);
  }
  return it->second;
}

std::uint32_t MultimodalKB::intern_categorical(std::uint32_t r, std::string_view label) {
  auto [it, fresh] =
      categorical_index_.try_emplace(store_key(r, label), static_cast<std::uint32_t>(categorical_labels_.size()));
  if (fresh) {
    categorical_labels_.emplace_back(label);
    categorical_relation_.push_back(r);
  }
  return it->second;
}

std::uint32_t MultimodalKB::intern_text(std::uint32_t r, std::string_view text) {
  auto [it, fresh] = text_index_.try_emplace(store_key(r, text), static_cast<std::uint32_t>(texts_.size()));
  if (fresh) {
    texts_.emplace_back(text);
    text_relation_.push_back(r);
  }
  return it->second;
}

bool MultimodalKB::add_link(std::string_view s, std::string_view r, std::string_view o, Split split) {
  require_mutable();
  const auto rel = relation_for(r, split, Modality::entity);
  std::uint32_t sid, oid;
  if (split == Split::train) {
    sid = entities_.intern(s);
    oid = entities_.intern(o);
  } else {
    auto a = entities_.find(s), b = entities_.find(o);
    if (!a || !b) return false;
    sid = *a;
    oid = *b;
  }
  return insert({sid, rel, oid}, split);
}

bool MultimodalKB::add_numeric(std::string_view e, std::string_view r, double value, Split split) {
  require_mutable();
  const auto rel = relation_for(r, split, Modality::numeric);
  auto sid = entities_.find(e);
  if (!sid) return false;
  return insert({*sid, rel, intern_numeric(rel, value)}, split);
}

bool MultimodalKB::add_categorical(std::string_view e, std::string_view r, std::string_view label, Split split) {
  require_mutable();
  const auto rel = relation_for(r, split, Modality::categorical);
  auto sid = entities_.find(e);
  if (!sid) return false;
  return insert({*sid, rel, intern_categorical(rel, label)}, split);
}

bool MultimodalKB::add_text(std::string_view e, std::string_view r, std::string_view text, Split split) {
  require_mutable();
  const auto rel = relation_for(r, split, Modality::short_text);
  auto sid = entities_.find(e);
  if (!sid) return false;
  if (text.empty()) throw InputError("empty text value for relation '" + std::string(r) + "'");
  return insert({*sid, rel, intern_text(rel, text)}, split);
}

void MultimodalKB::set_image_features(FeatureMatrix m) {
  require_mutable();
  if (m.values.size() != static_cast<std::size_t>(m.rows) * m.dim)
    throw InputError("feature matrix size does not match rows*dim");
  for (const auto& t : known_)
    if (schema_.relations()[t.r].modality == Modality::image)
      throw std::logic_error("image features replaced after image triples were added");
  features_ = std::move(m);
}

bool MultimodalKB::add_image(std::string_view e, std::uint32_t row, Split split) {
  require_mutable();
  const auto rel = image_relation();
  if (!rel) throw InputError("image rows given but the schema declares no image relation");
  if (row >= features_.rows)
    throw InputError("image row " + std::to_string(row) + " exceeds feature row count " +
                     std::to_string(features_.rows));
  auto sid = entities_.find(e);
  if (!sid) return false;
  return insert({*sid, *rel, row}, split);
}

std::optional<std::uint32_t> MultimodalKB::image_relation() const {
  if (auto name = schema_.image_relation()) return relations_.find(*name);
  return std::nullopt;
}

IngestCounts MultimodalKB::load_triples(const std::string& path, Split split) {
  require_mutable();
  const auto text = read_file(path);
  IngestCounts c{path, split};
  for_each_line(text, [&](std::size_t lineno, std::string_view line) {
    if (line.empty()) return;
    const auto where = path + ":" + std::to_string(lineno);
    const auto f = split_tabs(line);
    if (f.size() != 3)
      throw InputError(where + ": expected 3 tab-separated fields, got " + std::to_string(f.size()));
    ++c.rows;
    const auto before = triples_[static_cast<int>(split)].size();
    bool unknown = false;
    if (split != Split::train) {
      if (!relations_.find(f[1])) throw InputError(where + ": unknown relation '" + std::string(f[1]) + "'");
      unknown = !entities_.find(f[0]) || !entities_.find(f[2]);
    }
    try {
      add_link(f[0], f[1], f[2], split);
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
    if (unknown)
      ++c.unknown_entity;
    else if (triples_[static_cast<int>(split)].size() == before)
      ++c.duplicates;
    else
      ++c.added;
  });
  if (c.rows == 0) throw InputError(path + ": no triples");
  if (c.unknown_entity)
    std::clog << "warning: " << path << ": skipped " << c.unknown_entity << " rows with unknown entities\n";
  ingest_.push_back(c);
  return c;
}

IngestCounts MultimodalKB::ingest_attribute_file(const std::string& path, Modality family, bool year_filter) {
  const auto text = read_file(path);
  IngestCounts c{path, Split::train};
  for_each_line(text, [&](std::size_t lineno, std::string_view line) {
    if (line.empty()) return;
    const auto where = path + ":" + std::to_string(lineno);
    const auto f = split_tabs(line);
    if (f.size() != 3)
      throw InputError(where + ": expected 3 tab-separated fields, got " + std::to_string(f.size()));
    ++c.rows;
    try {
      const auto rel = relation_for(f[1], Split::train, family);
      if (!entities_.find(f[0])) {
        ++c.unknown_entity;
        return;
      }
      bool added = false;
      switch (schema_.relations()[rel].modality) {
        case Modality::numeric: {
          const double v = parse_double(f[2], where);
          if (year_filter && schema_.relations()[rel].year && !(v > 1000.0)) {
            ++c.year_filtered;
            return;
          }
          added = add_numeric(f[0], f[1], v);
          break;
        }
        case Modality::categorical: added = add_categorical(f[0], f[1], f[2]); break;
        default: added = add_text(f[0], f[1], f[2]); break;
      }
      ++(added ? c.added : c.duplicates);
    } catch (const InputError& e) {
      const std::string msg = e.what();
      throw InputError(msg.rfind(path, 0) == 0 ? msg : where + ": " + msg);
    }
  });
  if (c.unknown_entity)
    std::clog << "warning: " << path << ": skipped " << c.unknown_entity << " rows with unknown entities\n";
  ingest_.push_back(c);
  return c;
}

std::vector<IngestCounts> MultimodalKB::attach_attributes(const AttributeFiles& files) {
  require_mutable();
  std::vector<IngestCounts> out;
  if (!files.numeric.empty()) out.push_back(ingest_attribute_file(files.numeric, Modality::numeric, files.year_filter));
  if (!files.categorical.empty()) out.push_back(ingest_attribute_file(files.categorical, Modality::categorical, false));
  if (!files.text.empty()) out.push_back(ingest_attribute_file(files.text, Modality::short_text, false));
  if (files.image_features.empty() != files.image_map.empty())
    throw InputError("image features and image map must be given together");
  if (!files.image_features.empty()) {
    set_image_features(read_features(files.image_features));
    IngestCounts c{files.image_map, Split::train};
    for (const auto& [entity, row] : read_feature_map(files.image_map)) {
      ++c.rows;
      if (!entities_.find(entity)) {
        ++c.unknown_entity;
        continue;
      }
      ++(add_image(entity, row) ? c.added : c.duplicates);
    }
    ingest_.push_back(c);
    out.push_back(c);
  }
  return out;
}

std::size_t MultimodalKB::hold_out_attributes(double fraction, std::uint64_t seed) {
  require_mutable();
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("holdout fraction must be in [0, 1)");
  auto& train = triples_[static_cast<int>(Split::train)];
  std::vector<std::vector<std::size_t>> per_relation(relations_.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto m = schema_.relations()[train[i].r].modality;
    if (m == Modality::numeric || m == Modality::categorical) per_relation[train[i].r].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<char> moved(train.size(), 0);
  std::size_t count = 0;
  for (auto& idx : per_relation) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < take; ++k) moved[idx[k]] = 1;
    count += take;
  }
  std::vector<Triple> keep;
  auto& test = triples_[static_cast<int>(Split::test)];
  for (std::size_t i = 0; i < train.size(); ++i) (moved[i] ? test : keep).push_back(train[i]);
  train = std::move(keep);
  return count;
}

NumericStats standardize_numeric(const MultimodalKB& kb, std::uint32_t r) {
  if (kb.modality(r) != Modality::numeric)
    throw std::invalid_argument("relation '" + kb.relations().name(r) + "' is not numeric");
  std::vector<double> values;
  for (const auto& t : kb.triples(Split::train))
    if (t.r == r) values.push_back(kb.numeric_value(t.o));
  const auto& name = kb.relations().name(r);
  if (values.size() < 2)
    throw InputError("numeric relation '" + name + "' needs at least 2 train values, has " +
                     std::to_string(values.size()));
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double std = std::sqrt(ss / static_cast<double>(values.size()));
  if (!(std > 0.0)) throw InputError("numeric relation '" + name + "' has zero variance");
  return {mean, std};
}

void MultimodalKB::finalize() {
  require_mutable();
  const auto& train = triples_[static_cast<int>(Split::train)];

  std::vector<std::string> long_texts;
  for (const auto& t : train)
    if (modality(t.r) == Modality::long_text) long_texts.push_back(texts_[t.o]);
  words_ = build_word_vocab(long_texts);
  text_tokens_.resize(texts_.size());
  for (std::size_t i = 0; i < texts_.size(); ++i) {
    text_tokens_[i] = modality(text_relation_[i]) == Modality::short_text ? char_ids(texts_[i])
                                                                          : word_ids(words_, texts_[i]);
  }

  stats_.assign(relations_.size(), std::nullopt);
  std::vector<char> used(relations_.size(), 0);
  for (const auto& split : triples_)
    for (const auto& t : split) used[t.r] = 1;
  for (std::uint32_t r = 0; r < relations_.size(); ++r)
    if (used[r] && modality(r) == Modality::numeric) stats_[r] = standardize_numeric(*this, r);
  numeric_z_.resize(numeric_values_.size());
  for (std::size_t i = 0; i < numeric_values_.size(); ++i) {
    const auto& st = *stats_[numeric_relation_[i]];
    numeric_z_[i] = (numeric_values_[i] - st.mean) / st.std;
  }

  for (int k = 0; k < 3; ++k) {
    by_query_[k].clear();
    for (const auto& t : triples_[k]) by_query_[k][query_key(t.s, t.r)].push_back(t.o);
    for (auto& [key, objs] : by_query_[k]) std::sort(objs.begin(), objs.end());
  }
  train_values_.assign(relations_.size(), {});
  for (const auto& t : train) train_values_[t.r].push_back(t.o);
  for (auto& v : train_values_) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  train_queries_.clear();
  for (const auto& [key, objs] : by_query_[0])
    train_queries_.emplace_back(static_cast<std::uint32_t>(key >> 32), static_cast<std::uint32_t>(key));
  std::sort(train_queries_.begin(), train_queries_.end());
  finalized_ = true;
}

double MultimodalKB::numeric_z(std::uint32_t id) const {
  require_frozen();
  return numeric_z_.at(id);
}

std::optional<std::uint32_t> MultimodalKB::find_categorical(std::uint32_t r, std::string_view label) const {
  auto it = categorical_index_.find(store_key(r, label));
  if (it == categorical_index_.end()) return std::nullopt;
  return it->second;
}

const std::vector<std::int64_t>& MultimodalKB::text_tokens(std::uint32_t id) const {
  require_frozen();
  return text_tokens_.at(id);
}

bool MultimodalKB::has_numeric_stats(std::uint32_t r) const { return r < stats_.size() && stats_[r].has_value(); }

const NumericStats& MultimodalKB::numeric_stats(std::uint32_t r) const {
  if (!has_numeric_stats(r))
    throw std::invalid_argument("no standardization stats for relation " +
                                (r < relations_.size() ? "'" + relations_.name(r) + "'" : std::to_string(r)));
  return *stats_[r];
}

double MultimodalKB::standardize(std::uint32_t r, double x) const {
  const auto& s = numeric_stats(r);
  return (x - s.mean) / s.std;
}

double MultimodalKB::destandardize(std::uint32_t r, double z) const {
  const auto& s = numeric_stats(r);
  return z * s.std + s.mean;
}

std::span<const std::uint32_t> MultimodalKB::objects(Split split, std::uint32_t s, std::uint32_t r) const {
  require_frozen();
  const auto& idx = by_query_[static_cast<int>(split)];
  auto it = idx.find(query_key(s, r));
  if (it == idx.end()) return {};
  return it->second;
}

std::span<const std::uint32_t> MultimodalKB::train_values(std::uint32_t r) const {
  require_frozen();
  return train_values_.at(r);
}

std::size_t MultimodalKB::store_size(Modality m) const {
  switch (m) {
    case Modality::entity: return entities_.size();
    case Modality::numeric: return numeric_values_.size();
    case Modality::categorical: return categorical_labels_.size();
    case Modality::short_text:
    case Modality::long_text: return texts_.size();
    case Modality::image: return features_.rows;
  }
  return 0;
}

io::Container MultimodalKB::to_container() const {
  io::Container c;
  c.kind = kKbKind;
  c.version = kKbVersion;
  nlohmann::json h;
  h["schema"] = schema_.to_tsv();
  h["entities"] = entities_.names();
  h["categorical"] = categorical_labels_;
  h["texts"] = texts_;
  h["finalized"] = finalized_;
  auto& ingest = h["ingest"] = nlohmann::json::array();
  for (const auto& i : ingest_) {
    ingest.push_back({{"source", i.source},
                      {"split", split_name(i.split)},
                      {"rows", i.rows},
                      {"added", i.added},
                      {"unknown_entity", i.unknown_entity},
                      {"year_filtered", i.year_filtered},
                      {"duplicates", i.duplicates}});
  }
  c.header = std::move(h);
  for (auto split : kSplits) {
    std::vector<std::uint32_t> flat;
    for (const auto& t : triples(split)) flat.insert(flat.end(), {t.s, t.r, t.o});
    c.put("triples." + std::string(split_name(split)), std::move(flat), {triples(split).size(), 3});
  }
  c.put("numeric.values", numeric_values_);
  c.put("numeric.relation", numeric_relation_);
  c.put("categorical.relation", categorical_relation_);
  c.put("text.relation", text_relation_);
  c.put("image.features", features_.values, {features_.rows, features_.dim});
  return c;
}

MultimodalKB MultimodalKB::from_container(const io::Container& c) {
  if (c.kind != kKbKind || c.version != kKbVersion) throw StateError("unsupported knowledge base file version");
  try {
    const auto& h = c.header;
    MultimodalKB kb(ModalitySchema::parse(h.at("schema").get<std::string>(), "<kb schema>"));
    for (const auto& e : h.at("entities")) kb.entities_.intern(e.get<std::string>());
    const auto& nv = c.get<double>("numeric.values");
    const auto& nr = c.get<std::uint32_t>("numeric.relation");
    const auto labels = h.at("categorical").get<std::vector<std::string>>();
    const auto& cr = c.get<std::uint32_t>("categorical.relation");
    const auto texts = h.at("texts").get<std::vector<std::string>>();
    const auto& tr = c.get<std::uint32_t>("text.relation");
    if (nv.size() != nr.size() || labels.size() != cr.size() || texts.size() != tr.size())
      throw StateError("knowledge base value stores are inconsistent");
    auto check_rel = [&](std::uint32_t r) {
      if (r >= kb.relations_.size()) throw StateError("knowledge base references unknown relation id");
      return r;
    };
    for (std::size_t i = 0; i < nv.size(); ++i) kb.intern_numeric(check_rel(nr[i]), nv[i]);
    for (std::size_t i = 0; i < labels.size(); ++i) kb.intern_categorical(check_rel(cr[i]), labels[i]);
    for (std::size_t i = 0; i < texts.size(); ++i) kb.intern_text(check_rel(tr[i]), texts[i]);
    const auto& img = c.array("image.features");
    kb.features_.rows = static_cast<std::uint32_t>(img.shape.at(0));
    kb.features_.dim = static_cast<std::uint32_t>(img.shape.at(1));
    kb.features_.values = img.as<float>();
    for (auto split : kSplits) {
      const auto& flat = c.get<std::uint32_t>("triples." + std::string(split_name(split)));
      if (flat.size() % 3) throw StateError("knowledge base triple array is malformed");
      for (std::size_t i = 0; i < flat.size(); i += 3) {
        const Triple t{flat[i], check_rel(flat[i + 1]), flat[i + 2]};
        if (t.s >= kb.entities_.size() || t.o >= kb.store_size(kb.modality(t.r)))
          throw StateError("knowledge base triple references a missing value");
        if (!kb.insert(t, split)) throw StateError("knowledge base contains a duplicate triple");
      }
    }
    for (const auto& i : h.at("ingest")) {
      IngestCounts ic;
      ic.source = i.at("source").get<std::string>();
      const auto sp = i.at("split").get<std::string>();
      ic.split = sp == "train" ? Split::train : sp == "valid" ? Split::valid : Split::test;
      ic.rows = i.at("rows");
      ic.added = i.at("added");
      ic.unknown_entity = i.at("unknown_entity");
      ic.year_filtered = i.at("year_filtered");
      ic.duplicates = i.at("duplicates");
      kb.ingest_.push_back(std::move(ic));
    }
    if (h.at("finalized").get<bool>()) kb.finalize();
    return kb;
  } catch (const nlohmann::json::exception& e) {
    throw StateError(std::string("knowledge base header is malformed: ") + e.what());
  } catch (const InputError& e) {
    throw StateError(std::string("knowledge base content is invalid: ") + e.what());
  }
}

void MultimodalKB::save(const std::string& path) const {
  try {
    io::save(path, to_container());
  } catch (const nlohmann::json::type_error& e) {
    throw InputError(std::string("knowledge base strings must be valid UTF-8: ") + e.what());
  }
}

MultimodalKB MultimodalKB::load(const std::string& path) { return from_container(io::load(path, kKbKind)); }

nlohmann::json kb_stats(const MultimodalKB& kb) {
  nlohmann::json j;
  j["entities"] = kb.num_entities();
  j["relations"] = kb.num_relations();
  std::size_t links = 0, attributes = 0;
  nlohmann::json per_split = nlohmann::json::object(), per_modality = nlohmann::json::object(),
                 per_relation = nlohmann::json::object();
  for (auto split : kSplits) {
    per_split[std::string(split_name(split))] = kb.triples(split).size();
    for (const auto& t : kb.triples(split)) {
      const auto& rel = kb.relation(t.r);
      auto& m = per_modality[std::string(modality_name(rel.modality))];
      m = m.is_null() ? 1 : m.get<std::size_t>() + 1;
      auto& r = per_relation[rel.name];
      r = r.is_null() ? 1 : r.get<std::size_t>() + 1;
      ++(rel.modality == Modality::entity ? links : attributes);
    }
  }
  j["link_triples"] = links;
  j["attribute_triples"] = attributes;
  j["triples_per_split"] = per_split;
  j["triples_per_modality"] = per_modality;
  j["triples_per_relation"] = per_relation;
  auto& ingest = j["ingest"] = nlohmann::json::array();
  for (const auto& i : kb.ingest_report()) {
    ingest.push_back({{"source", i.source},
                      {"split", split_name(i.split)},
                      {"rows", i.rows},
                      {"added", i.added},
                      {"skipped_unknown_entity", i.unknown_entity},
                      {"skipped_year_filter", i.year_filtered},
                      {"duplicates", i.duplicates}});
  }
  return j;
}

std::string format_stats(const nlohmann::json& s) {
  std::ostringstream out;
  auto row = [&](const std::string& k, const nlohmann::json& v) { out << std::left << std::setw(28) << k << v << "\n"; };
  row("entities", s.at("entities"));
  row("relations", s.at("relations"));
  row("link triples", s.at("link_triples"));
  row("attribute triples", s.at("attribute_triples"));
  for (const auto& [k, v] : s.at("triples_per_split").items()) row("  " + k, v);
  for (const auto& [k, v] : s.at("triples_per_modality").items()) row("  modality " + k, v);
  for (const auto& i : s.at("ingest")) {
    out << "ingest " << i.at("source").get<std::string>() << " (" << i.at("split").get<std::string>()
        << "): rows " << i.at("rows") << ", added " << i.at("added") << ", unknown entity "
        << i.at("skipped_unknown_entity") << ", year filter " << i.at("skipped_year_filter") << ", duplicates "
        << i.at("duplicates") << "\n";
  }
  return out.str();
}

}  // namespace mkbe::kg
