#include "mkbe/impute/impute.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "mkbe/ad/ops.hpp"
#include "mkbe/errors.hpp"
#include "mkbe/train/train.hpp"

namespace mkbe::impute {

using ad::Tensor;

nlohmann::json DecoderConfig::to_json() const {
  return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"hidden", hidden}, {"holdout", holdout}, {"seed", seed}};
}

DecoderConfig DecoderConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("decoder config must be an object");
  DecoderConfig c;
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "epochs") v.get_to(c.epochs);
      else if (k == "learning_rate") v.get_to(c.learning_rate);
      else if (k == "hidden") v.get_to(c.hidden);
      else if (k == "holdout") v.get_to(c.holdout);
      else if (k == "seed") v.get_to(c.seed);
      else throw InputError("unknown key '" + k + "' in decoder config");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("decoder config: " + std::string(e.what()));
    }
  }
  if (c.epochs < 1) throw InputError("decoder config: epochs must be at least 1");
  if (!(c.holdout > 0.0 && c.holdout < 1.0)) throw InputError("decoder config: holdout must be in (0, 1)");
  return c;
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) : out_(out) {
  std::mt19937_64 rng(seed);
  auto xavier = [&](std::size_t fan_in, std::size_t fan_out) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<float> v(fan_in * fan_out);
    for (auto& x : v) x = static_cast<float>(bound * u(rng));
    return Tensor<float>::from({fan_in, fan_out}, std::move(v), true);
  };
  params_.add("W1", xavier(in, hidden));
  params_.add("b1", Tensor<float>::zeros({hidden}, true));
  params_.add("W2", xavier(hidden, out));
  params_.add("b2", Tensor<float>::zeros({out}, true));
}

Tensor<float> Mlp::forward(const Tensor<float>& x) const {
  auto h = ad::relu(ad::add_row(ad::matmul(x, params_.at("W1")), params_.at("b1")));
  return ad::add_row(ad::matmul(h, params_.at("W2")), params_.at("b2"));
}

namespace {

template <class LossFn>
Mlp fit_mlp(std::span<const float> x, std::size_t d, std::size_t out, const DecoderConfig& cfg, LossFn loss_fn) {
  if (d == 0 || x.empty() || x.size() % d) throw std::invalid_argument("decoder inputs must be [n x d]");
  Mlp net(d, cfg.hidden ? cfg.hidden : d, out, cfg.seed);
  const auto input = Tensor<float>::from({x.size() / d, d}, std::vector<float>(x.begin(), x.end()));
  train::Adam adam(cfg.learning_rate);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    ad::Tape<float> tape;
    net.params().zero_grad();
    const auto loss = loss_fn(net.forward(input));
    if (!std::isfinite(loss.item()))
      throw train::DivergenceError("decoder loss became non-finite at epoch " + std::to_string(e + 1));
    tape.backward(loss);
    adam.step(net.params());
  }
  return net;
}

std::vector<float> embedding_rows(const model::Model<float>& model, const std::vector<kg::Triple>& triples) {
  const auto table = model.params().at("entity").data();
  const std::size_t d = model.config().dim;
  std::vector<float> x;
  x.reserve(triples.size() * d);
  for (const auto& t : triples) {
    const auto row = table.subspan(static_cast<std::size_t>(t.s) * d, d);
    x.insert(x.end(), row.begin(), row.end());
  }
  return x;
}

void require_modality(const kg::MultimodalKB& kb, std::uint32_t r, kg::Modality m) {
  if (r >= kb.num_relations() || kb.modality(r) != m)
    throw InputError("relation is not " + std::string(kg::modality_name(m)));
}

double rmse(std::span<const double> a, std::span<const double> b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(total / static_cast<double>(std::max<std::size_t>(a.size(), 1)));
}

}  // namespace

Mlp fit_regressor(std::span<const float> x, std::size_t d, std::span<const float> y, const DecoderConfig& cfg) {
  if (x.size() != y.size() * d) throw std::invalid_argument("fit_regressor: target count does not match inputs");
  std::vector<float> target(y.begin(), y.end());
  return fit_mlp(x, d, 1, cfg, [&](const Tensor<float>& pred) {
    return ad::mse(pred, std::span<const float>(target));
  });
}

Mlp fit_classifier(std::span<const float> x, std::size_t d, std::span<const std::int64_t> labels, std::size_t classes,
                   const DecoderConfig& cfg) {
  if (x.size() != labels.size() * d) throw std::invalid_argument("fit_classifier: label count does not match inputs");
  std::vector<std::int64_t> target(labels.begin(), labels.end());
  return fit_mlp(x, d, classes, cfg, [&](const Tensor<float>& logits) {
    return ad::softmax_cross_entropy(logits, std::span<const std::int64_t>(target));
  });
}

HoldoutSplit attribute_holdout(const kg::MultimodalKB& kb, std::uint32_t r, double fraction, std::uint64_t seed) {
  HoldoutSplit out;
  for (const auto& t : kb.triples(kg::Split::train))
    if (t.r == r) out.train.push_back(t);
  for (const auto& t : kb.triples(kg::Split::test))
    if (t.r == r) out.holdout.push_back(t);
  std::sort(out.train.begin(), out.train.end());
  if (!out.holdout.empty()) {
    std::sort(out.holdout.begin(), out.holdout.end());
    out.source = "test-split";
    return out;
  }
  out.source = "seeded-train-holdout";
  std::mt19937_64 rng(seed);
  auto pool = out.train;
  std::shuffle(pool.begin(), pool.end(), rng);
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  const std::size_t take = std::clamp<std::size_t>(n, 1, pool.size() > 1 ? pool.size() - 1 : 1);
  out.holdout.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(take, pool.size())));
  out.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(std::min(take, pool.size())), pool.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.holdout.begin(), out.holdout.end());
  return out;
}

NumericReport neural_numeric(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t r,
                             const DecoderConfig& cfg) {
  require_modality(kb, r, kg::Modality::numeric);
  const auto split = attribute_holdout(kb, r, cfg.holdout, cfg.seed);
  if (split.train.size() < 10)
    throw InputError("numeric decoder for '" + kb.relations().name(r) + "' needs at least 10 train values, has " +
                     std::to_string(split.train.size()));
  const std::size_t d = model.config().dim;
  std::vector<float> y;
  double mean_z = 0.0;
  for (const auto& t : split.train) {
    y.push_back(static_cast<float>(kb.numeric_z(t.o)));
    mean_z += kb.numeric_z(t.o);
  }
  mean_z /= static_cast<double>(split.train.size());
  const auto net = fit_regressor(embedding_rows(model, split.train), d, y, cfg);
  const auto xh = embedding_rows(model, split.holdout);
  const auto pred = net.forward(Tensor<float>::from({split.holdout.size(), d}, xh)).to_vector();

  NumericReport rep;
  rep.relation = r;
  rep.method = "neural";
  rep.holdout_source = split.source;
  rep.train_count = split.train.size();
  rep.holdout_count = split.holdout.size();
  std::vector<double> z_hat, z_true, v_hat, v_true, v_mean;
  for (std::size_t i = 0; i < split.holdout.size(); ++i) {
    const auto& t = split.holdout[i];
    z_hat.push_back(pred[i]);
    z_true.push_back(kb.numeric_z(t.o));
    v_hat.push_back(kb.destandardize(r, pred[i]));
    v_true.push_back(kb.numeric_value(t.o));
    v_mean.push_back(kb.destandardize(r, mean_z));
    rep.predictions.push_back({t.s, r, v_hat.back(), "", "neural", pred[i]});
  }
  rep.rmse = rmse(v_hat, v_true);
  rep.rmse_z = rmse(z_hat, z_true);
  rep.baseline_rmse = rmse(v_mean, v_true);
  return rep;
}

CategoricalReport neural_categorical(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t r,
                                     const DecoderConfig& cfg) {
  require_modality(kb, r, kg::Modality::categorical);
  const auto split = attribute_holdout(kb, r, cfg.holdout, cfg.seed);
  std::vector<std::uint32_t> classes;
  for (const auto& t : split.train) classes.push_back(t.o);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2)
    throw InputError("categorical decoder for '" + kb.relations().name(r) + "' needs at least 2 train classes");
  auto class_of = [&](std::uint32_t o) -> std::int64_t {
    const auto it = std::lower_bound(classes.begin(), classes.end(), o);
    return it != classes.end() && *it == o ? it - classes.begin() : -1;
  };
  std::vector<std::int64_t> labels;
  std::vector<std::size_t> freq(classes.size(), 0);
  std::map<std::uint32_t, std::set<std::int64_t>> known;
  for (const auto& t : split.train) {
    labels.push_back(class_of(t.o));
    ++freq[static_cast<std::size_t>(labels.back())];
    known[t.s].insert(labels.back());
  }
  const std::size_t d = model.config().dim;
  const auto net = fit_classifier(embedding_rows(model, split.train), d, labels, classes.size(), cfg);

  std::map<std::uint32_t, std::set<std::uint32_t>> held;
  for (const auto& t : split.holdout) held[t.s].insert(t.o);
  std::vector<kg::Triple> rows;
  for (const auto& [e, objs] : held) rows.push_back({e, r, 0});
  const auto logits = net.forward(Tensor<float>::from({rows.size(), d}, embedding_rows(model, rows))).to_vector();

  CategoricalReport rep;
  rep.relation = r;
  rep.holdout_source = split.source;
  rep.classes = classes.size();
  rep.train_count = split.train.size();
  rep.holdout_entities = rows.size();
  std::size_t hits = 0, baseline_hits = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto e = rows[i].s;
    const auto& have = known[e];
    std::int64_t best = -1, best_base = -1;
    double denom = 0.0;
    const float peak = *std::max_element(logits.begin() + i * classes.size(), logits.begin() + (i + 1) * classes.size());
    for (std::size_t c = 0; c < classes.size(); ++c) denom += std::exp(logits[i * classes.size() + c] - peak);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (have.count(static_cast<std::int64_t>(c))) continue;
      if (best < 0 || logits[i * classes.size() + c] > logits[i * classes.size() + static_cast<std::size_t>(best)])
        best = static_cast<std::int64_t>(c);
      if (best_base < 0 || freq[c] > freq[static_cast<std::size_t>(best_base)]) best_base = static_cast<std::int64_t>(c);
    }
    if (best < 0) continue;
    const auto id = classes[static_cast<std::size_t>(best)];
    hits += held[e].count(id);
    baseline_hits += held[e].count(classes[static_cast<std::size_t>(best_base)]);
    const double prob = std::exp(logits[i * classes.size() + static_cast<std::size_t>(best)] - peak) / denom;
    rep.predictions.push_back({e, r, 0.0, kb.categorical_label(id), "neural", prob});
  }
  rep.accuracy = static_cast<double>(hits) / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  rep.baseline_accuracy = static_cast<double>(baseline_hits) / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  return rep;
}

ImputationResult impute_by_search(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t s,
                                  std::uint32_t r, int lo, int hi) {
  require_modality(kb, r, kg::Modality::numeric);
  if (lo > hi) throw InputError("search range [" + std::to_string(lo) + ", " + std::to_string(hi) + "] is empty");
  if (s >= kb.num_entities()) throw std::out_of_range("search subject out of range");
  std::vector<double> z;
  z.reserve(static_cast<std::size_t>(hi - lo) + 1);
  for (int v = lo; v <= hi; ++v) z.push_back(kb.standardize(r, v));
  const std::vector<std::uint32_t> sv{s}, rv{r};
  const auto scores =
      model::Model<float>::score(model.query(sv, rv, model::Mode::eval()), model.encode_numeric(r, z)).to_vector();
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return {s, r, static_cast<double>(lo + static_cast<int>(best)), "", "search", scores[best]};
}

NumericReport search_numeric(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t r, int lo,
                             int hi, const DecoderConfig& cfg) {
  require_modality(kb, r, kg::Modality::numeric);
  const auto split = attribute_holdout(kb, r, cfg.holdout, cfg.seed);
  NumericReport rep;
  rep.relation = r;
  rep.method = "search";
  rep.holdout_source = split.source;
  rep.train_count = split.train.size();
  rep.holdout_count = split.holdout.size();
  double mean = 0.0;
  for (const auto& t : split.train) mean += kb.numeric_value(t.o);
  mean /= static_cast<double>(std::max<std::size_t>(split.train.size(), 1));
  std::vector<double> v_hat, v_true, v_mean;
  for (const auto& t : split.holdout) {
    rep.predictions.push_back(impute_by_search(kb, model, t.s, r, lo, hi));
    v_hat.push_back(rep.predictions.back().value);
    v_true.push_back(kb.numeric_value(t.o));
    v_mean.push_back(mean);
  }
  rep.rmse = rmse(v_hat, v_true);
  rep.rmse_z = rep.rmse / kb.numeric_stats(r).std;
  rep.baseline_rmse = rmse(v_mean, v_true);
  return rep;
}

nlohmann::json NumericReport::to_json(const kg::MultimodalKB& kb) const {
  return {{"relation", kb.relations().name(relation)},
          {"method", method},
          {"holdout_source", holdout_source},
          {"train_count", train_count},
          {"holdout_count", holdout_count},
          {"rmse", rmse},
          {"rmse_standardized", rmse_z},
          {"train_mean_rmse", baseline_rmse},
          {"embeddings", "frozen"}};
}

nlohmann::json CategoricalReport::to_json(const kg::MultimodalKB& kb) const {
  return {{"relation", kb.relations().name(relation)},
          {"method", "neural"},
          {"holdout_source", holdout_source},
          {"classes", classes},
          {"train_count", train_count},
          {"holdout_entities", holdout_entities},
          {"accuracy", accuracy},
          {"majority_accuracy", baseline_accuracy},
          {"embeddings", "frozen"}};
}

std::string predictions_tsv(const kg::MultimodalKB& kb, std::span<const ImputationResult> rows) {
  std::ostringstream out;
  out.precision(10);
  for (const auto& p : rows) {
    out << kb.entities().name(p.entity) << '\t' << kb.relations().name(p.relation) << '\t';
    if (p.label.empty()) out << p.value;
    else out << p.label;
    out << '\t' << p.method << '\n';
  }
  return out.str();
}

}  // namespace mkbe::impute
