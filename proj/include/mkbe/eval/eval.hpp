#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkbe/kg/kb.hpp"
#include "mkbe/model/model.hpp"

namespace mkbe::eval {

inline constexpr const char* kTiePolicy = "pessimistic";
inline constexpr const char* kFilterPolicy = "filtered:train+valid+test";

/// 1 + the number of kept candidates other than the target scoring >= the
/// target. `keep` empty keeps everything; a masked target is rejected.
template <class Real>
std::size_t rank_of_target(std::span<const Real> scores, std::size_t target, std::span<const std::uint8_t> keep = {});

struct QueryRank {
  std::uint32_t s = 0;
  std::uint32_t r = 0;
  std::uint32_t target = 0;
  std::size_t rank = 0;
  std::size_t candidates = 0;
};

struct Metrics {
  std::size_t count = 0;
  double mrr = 0.0;
  std::vector<std::pair<int, double>> hits;  // (k, Hits@k), ascending k

  double hits_at(int k) const;
  nlohmann::json to_json() const;
};

Metrics summarize(std::span<const QueryRank> ranks, const std::vector<int>& ks);

enum class RatingDecoder { expectation, argmax };

struct EvalOptions {
  std::vector<int> ks{1, 2, 3, 10};
  bool per_relation = false;
  std::size_t workers = 1;
  std::size_t batch = 256;
  /// Relations whose triples are ranked; empty means every entity relation.
  std::vector<std::uint32_t> relations;
  RatingDecoder decoder = RatingDecoder::expectation;
};

struct RankingReport {
  std::string task;  // "links" or "ratings"
  kg::Split split = kg::Split::test;
  std::vector<QueryRank> queries;
  Metrics overall;
  /// Relations with at least one query, ascending id.
  std::vector<std::pair<std::uint32_t, Metrics>> per_relation;
  std::optional<double> rmse;
  std::string rating_decoder;

  nlohmann::json summary(const kg::MultimodalKB& kb) const;
  std::string queries_tsv(const kg::MultimodalKB& kb) const;
  std::string per_relation_tsv(const kg::MultimodalKB& kb) const;
};

/// Object-side filtered ranking of every triple of `split` whose relation is
/// selected, against all entities.
RankingReport evaluate_links(const kg::MultimodalKB& kb, const model::Model<float>& model, kg::Split split,
                             const EvalOptions& options = {});

/// Rating relation ids ordered by level. Throws InputError unless the schema
/// declares exactly five, with levels 1..5.
std::vector<std::uint32_t> rating_relation_ids(const kg::MultimodalKB& kb);

/// Σ k σ(ψ_k) / Σ σ(ψ_k) over levels k.
double expected_rating(std::span<const double> scores, std::span<const int> levels);

/// For each rating triple ⟨u, r_k, m⟩ of `split`, ranks r_k among the five
/// rating relations by ψ(u, r_j, m) and decodes a rating for RMSE.
RankingReport evaluate_ratings(const kg::MultimodalKB& kb, const model::Model<float>& model, kg::Split split,
                               const EvalOptions& options = {});

}  // namespace mkbe::eval
