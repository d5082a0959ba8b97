#include "mkbe/kg/targets.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace mkbe::kg {

std::size_t LabelVector::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0f));
}

LabelVector one_to_n_targets(const MultimodalKB& kb, std::uint32_t s, std::uint32_t r, std::size_t max_candidates,
                             std::mt19937_64* rng) {
  if (r >= kb.num_relations()) throw std::out_of_range("relation id " + std::to_string(r) + " out of range");
  LabelVector lv{s, r, {}, {}};
  const auto pos = kb.objects(Split::train, s, r);
  if (kb.modality(r) == Modality::entity) {
    lv.candidates.resize(kb.num_entities());
    std::iota(lv.candidates.begin(), lv.candidates.end(), 0u);
  } else {
    const auto values = kb.train_values(r);
    if (values.size() <= max_candidates) {
      lv.candidates.assign(values.begin(), values.end());
    } else if (pos.size() >= max_candidates) {
      lv.candidates.assign(pos.begin(), pos.end());
    } else {
      if (!rng) throw std::invalid_argument("candidate subsampling needs a random generator");
      std::vector<std::uint32_t> negatives;
      negatives.reserve(values.size());
      std::set_difference(values.begin(), values.end(), pos.begin(), pos.end(), std::back_inserter(negatives));
      lv.candidates.assign(pos.begin(), pos.end());
      std::sample(negatives.begin(), negatives.end(), std::back_inserter(lv.candidates), max_candidates - pos.size(),
                  *rng);
      std::sort(lv.candidates.begin(), lv.candidates.end());
    }
  }
  lv.labels.assign(lv.candidates.size(), 0.0f);
  for (auto o : pos) {
    auto it = std::lower_bound(lv.candidates.begin(), lv.candidates.end(), o);
    if (it != lv.candidates.end() && *it == o) lv.labels[static_cast<std::size_t>(it - lv.candidates.begin())] = 1.0f;
  }
  return lv;
}

std::vector<std::uint8_t> filtered_candidates(const MultimodalKB& kb, std::uint32_t s, std::uint32_t r,
                                              std::uint32_t target) {
  if (kb.modality(r) != Modality::entity)
    throw std::invalid_argument("filtered ranking applies to entity relations only");
  if (target >= kb.num_entities()) throw std::out_of_range("target entity out of range");
  std::vector<std::uint8_t> keep(kb.num_entities(), 1);
  for (auto split : kSplits)
    for (auto o : kb.objects(split, s, r)) keep[o] = 0;
  keep[target] = 1;
  return keep;
}

}  // namespace mkbe::kg
