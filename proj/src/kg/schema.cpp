#include "mkbe/kg/schema.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mkbe/errors.hpp"
#include "mkbe/kg/tsv.hpp"

namespace mkbe::kg {

namespace {

constexpr std::pair<Modality, std::string_view> kNames[] = {
    {Modality::entity, "entity"},         {Modality::categorical, "categorical"},
    {Modality::numeric, "numeric"},       {Modality::short_text, "short_text"},
    {Modality::long_text, "long_text"},   {Modality::image, "image"},
};

}  // namespace

std::string_view modality_name(Modality m) {
  for (auto [mod, name] : kNames)
    if (mod == m) return name;
  return "?";
}

Modality parse_modality(std::string_view s) {
  for (auto [mod, name] : kNames)
    if (name == s) return mod;
  throw InputError("unknown modality '" + std::string(s) + "'");
}

bool is_text(Modality m) { return m == Modality::short_text || m == Modality::long_text; }

std::string default_group(Modality m) {
  switch (m) {
    case Modality::entity: return "S";
    case Modality::numeric: return "N";
    case Modality::categorical: return "C";
    case Modality::short_text: return "T";
    case Modality::long_text: return "D";
    case Modality::image: return "I";
  }
  return "S";
}

ModalitySchema ModalitySchema::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open schema file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

ModalitySchema ModalitySchema::parse(std::string_view text, const std::string& origin) {
  ModalitySchema schema;
  for_each_line(text, [&](std::size_t lineno, std::string_view line) {
    if (line.empty() || line.front() == '#') return;
    const auto f = split_tabs(line);
    if (f.size() < 2 || f.size() > 4) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": expected 2 to 4 tab-separated fields, got " +
                       std::to_string(f.size()));
    }
    RelationSchema rel;
    rel.name = std::string(f[0]);
    try {
      rel.modality = parse_modality(f[1]);
    } catch (const InputError& e) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (f.size() >= 3 && !f[2].empty()) {
      std::string_view flags = f[2];
      while (!flags.empty()) {
        const auto comma = flags.find(',');
        const auto flag = flags.substr(0, comma);
        if (flag == "year") {
          rel.year = true;
        } else if (flag.substr(0, 7) == "rating=" && flag.size() == 8 && flag[7] >= '1' && flag[7] <= '5') {
          rel.rating = flag[7] - '0';
        } else {
          throw InputError(origin + ":" + std::to_string(lineno) + ": unknown flag '" + std::string(flag) + "'");
        }
        flags = comma == std::string_view::npos ? std::string_view{} : flags.substr(comma + 1);
      }
    }
    if (rel.year && rel.modality != Modality::numeric)
      throw InputError(origin + ":" + std::to_string(lineno) + ": year flag requires a numeric relation");
    if (rel.rating && rel.modality != Modality::entity)
      throw InputError(origin + ":" + std::to_string(lineno) + ": rating flag requires an entity relation");
    rel.group = f.size() == 4 && !f[3].empty() ? std::string(f[3]) : default_group(rel.modality);
    try {
      schema.add(std::move(rel));
    } catch (const InputError& e) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return schema;
}

void ModalitySchema::add(RelationSchema rel) {
  if (rel.name.empty()) throw InputError("relation name is empty");
  if (index_.count(rel.name)) throw InputError("relation '" + rel.name + "' declared twice");
  if (rel.group.empty()) rel.group = default_group(rel.modality);
  if (rel.modality == Modality::image && image_relation())
    throw InputError("more than one image relation declared ('" + *image_relation() + "', '" + rel.name + "')");
  index_.emplace(rel.name, relations_.size());
  relations_.push_back(std::move(rel));
}

const RelationSchema* ModalitySchema::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &relations_[it->second];
}

const RelationSchema& ModalitySchema::at(std::string_view name) const {
  if (auto* r = find(name)) return *r;
  throw InputError("relation '" + std::string(name) + "' has no schema entry");
}

std::optional<std::string> ModalitySchema::image_relation() const {
  for (const auto& r : relations_)
    if (r.modality == Modality::image) return r.name;
  return std::nullopt;
}

std::vector<std::string> ModalitySchema::rating_relations() const {
  std::vector<const RelationSchema*> rated;
  for (const auto& r : relations_)
    if (r.rating) rated.push_back(&r);
  std::stable_sort(rated.begin(), rated.end(), [](auto* a, auto* b) { return a->rating < b->rating; });
  std::vector<std::string> names;
  for (auto* r : rated) names.push_back(r->name);
  return names;
}

std::string ModalitySchema::to_tsv() const {
  std::string out;
  for (const auto& r : relations_) {
    std::string flags;
    if (r.year) flags = "year";
    if (r.rating) flags += (flags.empty() ? "" : ",") + std::string("rating=") + std::to_string(r.rating);
    out += r.name + "\t" + std::string(modality_name(r.modality)) + "\t" + flags + "\t" + r.group + "\n";
  }
  return out;
}

}  // namespace mkbe::kg
