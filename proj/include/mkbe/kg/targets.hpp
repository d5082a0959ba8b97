#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mkbe/kg/kb.hpp"

namespace mkbe::kg {

/// 1-N training target for a query (s, r): candidates of r's modality in
/// ascending id order, with label 1 on objects o where ⟨s,r,o⟩ is in train.
struct LabelVector {
  std::uint32_t s = 0;
  std::uint32_t r = 0;
  std::vector<std::uint32_t> candidates;
  std::vector<float> labels;

  std::size_t positives() const;
};

/// Entity relations score against every entity. Other relations score against
/// the distinct train values of r; when there are more than max_candidates,
/// all positives are kept and the rest is a uniform sample without
/// replacement drawn from rng (required in that case).
LabelVector one_to_n_targets(const MultimodalKB& kb, std::uint32_t s, std::uint32_t r, std::size_t max_candidates,
                             std::mt19937_64* rng = nullptr);

/// Mask over all entities for ranking `target`: 1 keeps a candidate. Every o
/// with ⟨s,r,o⟩ in train, valid, or test is removed except the target itself.
std::vector<std::uint8_t> filtered_candidates(const MultimodalKB& kb, std::uint32_t s, std::uint32_t r,
                                              std::uint32_t target);

}  // namespace mkbe::kg
