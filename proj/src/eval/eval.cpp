#include "mkbe/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mkbe/ad/ops.hpp"
#include "mkbe/errors.hpp"

namespace mkbe::eval {

using ad::Tensor;

template <class Real>
std::size_t rank_of_target(std::span<const Real> scores, std::size_t target, std::span<const std::uint8_t> keep) {
  if (target >= scores.size()) throw std::out_of_range("rank_of_target: target index out of range");
  if (!keep.empty() && keep.size() != scores.size()) throw std::invalid_argument("rank_of_target: mask size mismatch");
  if (!keep.empty() && !keep[target]) throw std::invalid_argument("rank_of_target: target is masked");
  const Real st = scores[target];
  std::size_t rank = 1, kept = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == target || (!keep.empty() && !keep[j])) continue;
    ++kept;
    if (!(scores[j] < st)) ++rank;
  }
  return std::isfinite(static_cast<double>(st)) ? rank : kept;
}

template std::size_t rank_of_target(std::span<const float>, std::size_t, std::span<const std::uint8_t>);
template std::size_t rank_of_target(std::span<const double>, std::size_t, std::span<const std::uint8_t>);

double Metrics::hits_at(int k) const {
  for (const auto& [kk, v] : hits)
    if (kk == k) return v;
  throw std::out_of_range("Hits@" + std::to_string(k) + " was not computed");
}

nlohmann::json Metrics::to_json() const {
  nlohmann::json j{{"count", count}, {"mrr", mrr}};
  for (const auto& [k, v] : hits) j["hits@" + std::to_string(k)] = v;
  return j;
}

Metrics summarize(std::span<const QueryRank> ranks, const std::vector<int>& ks) {
  Metrics m;
  m.count = ranks.size();
  auto sorted_ks = ks;
  std::sort(sorted_ks.begin(), sorted_ks.end());
  sorted_ks.erase(std::unique(sorted_ks.begin(), sorted_ks.end()), sorted_ks.end());
  std::vector<std::size_t> within(sorted_ks.size(), 0);
  double rr = 0.0;
  for (const auto& q : ranks) {
    rr += 1.0 / static_cast<double>(q.rank);
    for (std::size_t i = 0; i < sorted_ks.size(); ++i)
      if (q.rank <= static_cast<std::size_t>(sorted_ks[i])) ++within[i];
  }
  const double n = static_cast<double>(std::max<std::size_t>(m.count, 1));
  m.mrr = rr / n;
  for (std::size_t i = 0; i < sorted_ks.size(); ++i)
    m.hits.emplace_back(sorted_ks[i], static_cast<double>(within[i]) / n);
  return m;
}

namespace {

// Runs fn(begin, end) over contiguous slices of [0, n) on up to `workers` threads.
template <class Fn>
void parallel_ranges(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    threads.emplace_back([&, w, b, e] {
      try {
        if (b < e) fn(b, e);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void finish(RankingReport& rep, const EvalOptions& options) {
  rep.overall = summarize(rep.queries, options.ks);
  if (!options.per_relation) return;
  std::vector<QueryRank> sorted = rep.queries;
  std::stable_sort(sorted.begin(), sorted.end(), [](const QueryRank& a, const QueryRank& b) { return a.r < b.r; });
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].r == sorted[i].r) ++j;
    rep.per_relation.emplace_back(sorted[i].r,
                                  summarize(std::span<const QueryRank>(sorted.data() + i, j - i), options.ks));
    i = j;
  }
}

std::vector<std::uint32_t> known_objects(const kg::MultimodalKB& kb, std::uint32_t s, std::uint32_t r) {
  std::vector<std::uint32_t> out;
  for (auto split : kg::kSplits) {
    const auto o = kb.objects(split, s, r);
    out.insert(out.end(), o.begin(), o.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

RankingReport evaluate_links(const kg::MultimodalKB& kb, const model::Model<float>& model, kg::Split split,
                             const EvalOptions& options) {
  std::vector<std::uint8_t> selected(kb.num_relations(), 0);
  if (options.relations.empty()) {
    for (std::uint32_t r = 0; r < kb.num_relations(); ++r) selected[r] = kb.modality(r) == kg::Modality::entity;
  } else {
    for (auto r : options.relations) {
      if (r >= kb.num_relations() || kb.modality(r) != kg::Modality::entity)
        throw InputError("link evaluation needs entity relations");
      selected[r] = 1;
    }
  }
  std::vector<kg::Triple> triples;
  for (const auto& t : kb.triples(split))
    if (selected[t.r]) triples.push_back(t);
  std::sort(triples.begin(), triples.end());

  std::vector<std::pair<std::size_t, std::size_t>> groups;  // contiguous (s, r) runs
  for (std::size_t i = 0; i < triples.size();) {
    std::size_t j = i;
    while (j < triples.size() && triples[j].s == triples[i].s && triples[j].r == triples[i].r) ++j;
    groups.emplace_back(i, j);
    i = j;
  }

  RankingReport rep;
  rep.task = "links";
  rep.split = split;
  rep.queries.resize(triples.size());
  const auto entities = model.params().at("entity");
  const std::size_t n_ent = kb.num_entities();
  const std::size_t batch = std::max<std::size_t>(1, options.batch);

  parallel_ranges(groups.size(), options.workers, [&](std::size_t gb, std::size_t ge) {
    for (std::size_t b0 = gb; b0 < ge; b0 += batch) {
      const std::size_t b1 = std::min(ge, b0 + batch);
      std::vector<std::uint32_t> s, r;
      for (std::size_t g = b0; g < b1; ++g) {
        s.push_back(triples[groups[g].first].s);
        r.push_back(triples[groups[g].first].r);
      }
      const auto scores = model::Model<float>::score(model.query(s, r, model::Mode::eval()), entities);
      const auto all = scores.data();
      for (std::size_t g = b0; g < b1; ++g) {
        const auto row = all.subspan((g - b0) * n_ent, n_ent);
        const auto known = known_objects(kb, s[g - b0], r[g - b0]);
        std::size_t base = 1;
        for (std::size_t i = groups[g].first; i < groups[g].second; ++i) {
          const auto& t = triples[i];
          const float st = row[t.o];
          std::size_t rank = base;
          if (std::isfinite(st)) {
            for (std::size_t j = 0; j < n_ent; ++j)
              if (j != t.o && !(row[j] < st)) ++rank;
            for (auto o : known)
              if (o != t.o && !(row[o] < st)) --rank;
          } else {
            rank = n_ent - (known.size() - 1);
          }
          rep.queries[i] = {t.s, t.r, t.o, rank, n_ent - (known.size() - 1)};
        }
      }
    }
  });
  finish(rep, options);
  return rep;
}

std::vector<std::uint32_t> rating_relation_ids(const kg::MultimodalKB& kb) {
  std::vector<std::uint32_t> ids;
  for (std::uint32_t r = 0; r < kb.num_relations(); ++r)
    if (kb.relation(r).rating > 0) ids.push_back(r);
  std::sort(ids.begin(), ids.end(),
            [&](std::uint32_t a, std::uint32_t b) { return kb.relation(a).rating < kb.relation(b).rating; });
  if (ids.size() != 5) {
    throw InputError("rating evaluation needs five rating relations (flag rating=K), found " +
                     std::to_string(ids.size()));
  }
  for (std::size_t k = 0; k < 5; ++k) {
    if (kb.relation(ids[k]).rating != static_cast<int>(k + 1))
      throw InputError("rating relations must cover levels 1..5 exactly once");
    if (kb.modality(ids[k]) != kg::Modality::entity) throw InputError("rating relations must be entity relations");
  }
  return ids;
}

double expected_rating(std::span<const double> scores, std::span<const int> levels) {
  if (scores.size() != levels.size() || scores.empty())
    throw std::invalid_argument("expected_rating: scores and levels differ in length");
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const double p = 1.0 / (1.0 + std::exp(-scores[k]));
    num += levels[k] * p;
    den += p;
  }
  return num / den;
}

RankingReport evaluate_ratings(const kg::MultimodalKB& kb, const model::Model<float>& model, kg::Split split,
                               const EvalOptions& options) {
  const auto ids = rating_relation_ids(kb);
  std::vector<int> levels;
  for (auto r : ids) levels.push_back(kb.relation(r).rating);
  std::vector<kg::Triple> triples;
  for (const auto& t : kb.triples(split))
    if (kb.relation(t.r).rating > 0) triples.push_back(t);
  std::sort(triples.begin(), triples.end());

  RankingReport rep;
  rep.task = "ratings";
  rep.split = split;
  rep.rating_decoder = options.decoder == RatingDecoder::expectation ? "sigmoid-expectation" : "argmax";
  rep.queries.resize(triples.size());
  std::vector<double> sq(triples.size());
  const auto& entities = model.params().at("entity");
  const std::size_t d = model.config().dim, batch = std::max<std::size_t>(1, options.batch);

  parallel_ranges(triples.size(), options.workers, [&](std::size_t tb, std::size_t te) {
    for (std::size_t b0 = tb; b0 < te; b0 += batch) {
      const std::size_t b1 = std::min(te, b0 + batch);
      std::vector<std::uint32_t> s, r;
      for (std::size_t i = b0; i < b1; ++i)
        for (auto rel : ids) {
          s.push_back(triples[i].s);
          r.push_back(rel);
        }
      const auto q = model.query(s, r, model::Mode::eval());
      const auto qv = q.data();
      const auto ev = entities.data();
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& t = triples[i];
        std::vector<double> scores(5);
        std::vector<std::uint8_t> keep(5, 1);
        std::size_t target = 0;
        for (std::size_t k = 0; k < 5; ++k) {
          const auto qrow = qv.subspan(((i - b0) * 5 + k) * d, d);
          const auto erow = ev.subspan(static_cast<std::size_t>(t.o) * d, d);
          float dot = 0.0f;
          for (std::size_t c = 0; c < d; ++c) dot += qrow[c] * erow[c];
          scores[k] = dot;
          if (ids[k] == t.r) target = k;
          else if (kb.contains({t.s, ids[k], t.o})) keep[k] = 0;
        }
        const std::size_t rank = rank_of_target(std::span<const double>(scores), target, keep);
        std::size_t kept = 0;
        for (auto k : keep) kept += k;
        rep.queries[i] = {t.s, t.r, t.o, rank, kept};
        double predicted;
        if (options.decoder == RatingDecoder::expectation) {
          predicted = expected_rating(scores, levels);
        } else {
          const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
          predicted = levels[static_cast<std::size_t>(best)];
        }
        const double err = predicted - levels[target];
        sq[i] = err * err;
      }
    }
  });
  finish(rep, options);
  double total = 0.0;
  for (double e : sq) total += e;
  rep.rmse = std::sqrt(total / static_cast<double>(std::max<std::size_t>(sq.size(), 1)));
  return rep;
}

nlohmann::json RankingReport::summary(const kg::MultimodalKB& kb) const {
  nlohmann::json j = overall.to_json();
  j["task"] = task;
  j["split"] = std::string(kg::split_name(split));
  j["tie_policy"] = kTiePolicy;
  j["filter_policy"] = kFilterPolicy;
  j["ranking_side"] = "object";
  if (rmse) {
    j["rmse"] = *rmse;
    j["rating_decoder"] = rating_decoder;
  }
  if (!per_relation.empty()) {
    auto rows = nlohmann::json::array();
    for (const auto& [r, m] : per_relation) {
      auto row = m.to_json();
      row["relation"] = kb.relations().name(r);
      rows.push_back(row);
    }
    j["per_relation"] = rows;
  }
  return j;
}

std::string RankingReport::queries_tsv(const kg::MultimodalKB& kb) const {
  std::ostringstream out;
  out << "subject\trelation\tobject\trank\tcandidates\n";
  for (const auto& q : queries) {
    out << kb.entities().name(q.s) << '\t' << kb.relations().name(q.r) << '\t' << kb.entities().name(q.target) << '\t'
        << q.rank << '\t' << q.candidates << '\n';
  }
  return out.str();
}

std::string RankingReport::per_relation_tsv(const kg::MultimodalKB& kb) const {
  std::ostringstream out;
  out.precision(6);
  out << "relation\tcount\tmrr";
  for (const auto& [k, v] : overall.hits) out << "\thits@" << k;
  out << '\n';
  for (const auto& [r, m] : per_relation) {
    out << kb.relations().name(r) << '\t' << m.count << '\t' << m.mrr;
    for (const auto& [k, v] : m.hits) out << '\t' << v;
    out << '\n';
  }
  return out.str();
}

}  // namespace mkbe::eval
