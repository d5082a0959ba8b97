#include "mkbe/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

#include "mkbe/ad/ops.hpp"
#include "mkbe/eval/eval.hpp"

namespace mkbe::train {

using ad::Tensor;

namespace {

constexpr std::uint32_t kEntityPartition = std::numeric_limits<std::uint32_t>::max();

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw InputError(what + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InputError("unknown key '" + k + "' in " + what);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void TrainConfig::validate(const kg::MultimodalKB& kb) const {
  if (epochs < 1) throw InputError("epochs must be at least 1");
  if (batch_size < 1) throw InputError("batch_size must be at least 1");
  if (eval_every < 1) throw InputError("eval_every must be at least 1");
  if (max_candidates < 1) throw InputError("max_candidates must be at least 1");
  if (!(label_smoothing >= 0.0 && label_smoothing < 0.5)) throw InputError("label_smoothing must be in [0, 0.5)");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InputError("learning_rate must be >= 0");
  std::set<std::string> known;
  for (std::uint32_t r = 0; r < kb.num_relations(); ++r) known.insert(kb.relation(r).group);
  for (const auto& g : groups)
    if (!known.count(g)) throw InputError("modality group '" + g + "' matches no relation in the schema");
}

bool TrainConfig::enabled(const kg::MultimodalKB& kb, std::uint32_t r) const {
  return groups.empty() || std::find(groups.begin(), groups.end(), kb.relation(r).group) != groups.end();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"max_candidates", max_candidates},
          {"label_smoothing", label_smoothing},
          {"seed", seed},
          {"patience", patience},
          {"eval_every", eval_every},
          {"groups", groups}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"model", "learning_rate", "batch_size", "epochs", "max_candidates", "label_smoothing", "seed",
                       "patience", "eval_every", "groups"},
                      "train config");
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model"));
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("learning_rate", c.learning_rate);
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("max_candidates", c.max_candidates);
    get("label_smoothing", c.label_smoothing);
    get("seed", c.seed);
    get("patience", c.patience);
    get("eval_every", c.eval_every);
    get("groups", c.groups);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("train config: ") + e.what());
  }
  return c;
}

template <class Real>
Tensor<Real> bce_loss(const Tensor<Real>& scores, std::span<const Real> labels, double smoothing) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("bce_loss: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  if (!(smoothing >= 0.0 && smoothing < 0.5)) throw std::invalid_argument("bce_loss: smoothing must be in [0, 0.5)");
  std::vector<Real> t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != Real(0) && labels[i] != Real(1)) throw std::invalid_argument("bce_loss: labels must be 0 or 1");
    t[i] = static_cast<Real>(labels[i] * (1.0 - smoothing) + smoothing / 2.0);
  }
  return ad::bce_with_logits(scores, std::span<const Real>(t));
}

template Tensor<float> bce_loss(const Tensor<float>&, std::span<const float>, double);
template Tensor<double> bce_loss(const Tensor<double>&, std::span<const double>, double);

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(model::ParamStore<float>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr_ / bc1), root_bc2 = static_cast<float>(std::sqrt(bc2));
  const float eps = static_cast<float>(eps_);
  for (const auto& [name, tensor] : params.all()) {
    auto p = tensor;
    const auto g = p.grad();
    auto& [m, v] = state_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0f);
      v.assign(g.size(), 0.0f);
    }
    auto w = p.mutable_data();
    bool finite = true;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i]) / root_bc2 + eps);
      finite = finite && std::isfinite(w[i]);
    }
    if (!finite) throw DivergenceError("parameter '" + name + "' became non-finite at update " + std::to_string(t_));
  }
}

Trainer::Trainer(const kg::MultimodalKB& kb, TrainConfig config)
    : Trainer(kb, config, model::Model<float>(kb, config.model, config.seed)) {}

Trainer::Trainer(const kg::MultimodalKB& kb, TrainConfig config, model::Model<float> model)
    : kb_(kb), config_(std::move(config)), model_(std::move(model)), adam_(config_.learning_rate) {
  config_.validate(kb_);
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32), 7u};
  rng_.seed(seq);
  for (const auto& q : kb_.train_queries())
    if (config_.enabled(kb_, q.second)) queries_.push_back(q);
  if (queries_.empty()) throw InputError("no train triples in the enabled modality groups");
}

EpochStats Trainer::train_epoch() {
  ++epoch_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> order = queries_;
  std::shuffle(order.begin(), order.end(), rng_);
  EpochStats stats;
  stats.epoch = epoch_;
  stats.groups = order.size();
  double total = 0.0;
  for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
    const std::size_t e = std::min(order.size(), b + config_.batch_size);
    ++stats.steps;
    float loss;
    try {
      loss = train_batch(std::span(order.data() + b, e - b));
    } catch (const ad::NonFiniteError& err) {
      throw DivergenceError("non-finite value in " + err.op() + " at epoch " + std::to_string(epoch_) + " step " +
                            std::to_string(stats.steps));
    }
    if (!std::isfinite(loss))
      throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch_) + " step " +
                            std::to_string(stats.steps));
    total += loss;
  }
  stats.mean_loss = total / static_cast<double>(stats.steps);
  return stats;
}

float Trainer::train_batch(std::span<const std::pair<std::uint32_t, std::uint32_t>> batch) {
  std::map<std::uint32_t, std::vector<std::pair<std::uint32_t, std::uint32_t>>> parts;
  for (const auto& q : batch)
    parts[kb_.modality(q.second) == kg::Modality::entity ? kEntityPartition : q.second].push_back(q);

  ad::Tape<float> tape;
  model_.params().zero_grad();
  const model::Mode mode{true, &rng_};
  const float inv_batch = 1.0f / static_cast<float>(batch.size());
  Tensor<float> total;
  for (const auto& [key, items] : parts) {
    std::vector<std::uint32_t> s, r;
    for (const auto& [qs, qr] : items) {
      s.push_back(qs);
      r.push_back(qr);
    }
    const auto q = model_.query(s, r, mode);
    Tensor<float> candidates;
    std::vector<std::uint32_t> ids;
    if (key == kEntityPartition) {
      candidates = model_.params().at("entity");
    } else {
      const auto values = kb_.train_values(key);
      if (values.size() <= config_.max_candidates) {
        ids.assign(values.begin(), values.end());
      } else {
        std::set<std::uint32_t> pos;
        for (auto qs : s) {
          const auto o = kb_.objects(kg::Split::train, qs, key);
          pos.insert(o.begin(), o.end());
        }
        std::vector<std::uint32_t> rest;
        for (auto v : values)
          if (!pos.count(v)) rest.push_back(v);
        const std::size_t fill = config_.max_candidates > pos.size() ? config_.max_candidates - pos.size() : 0;
        std::sample(rest.begin(), rest.end(), std::back_inserter(ids), fill, rng_);
        ids.insert(ids.end(), pos.begin(), pos.end());
        std::sort(ids.begin(), ids.end());
      }
      candidates = model_.encode_objects(kb_, key, ids);
    }
    const std::size_t n = candidates.dim(0);
    std::vector<float> labels(items.size() * n, 0.0f);
    for (std::size_t i = 0; i < items.size(); ++i) {
      for (auto o : kb_.objects(kg::Split::train, s[i], r[i])) {
        if (key == kEntityPartition) {
          labels[i * n + o] = 1.0f;
        } else {
          const auto it = std::lower_bound(ids.begin(), ids.end(), o);
          labels[i * n + static_cast<std::size_t>(it - ids.begin())] = 1.0f;
        }
      }
    }
    const auto scores = model::Model<float>::score(q, candidates);
    const auto loss = ad::affine(bce_loss(scores, std::span<const float>(labels), config_.label_smoothing),
                                 static_cast<float>(items.size()) * inv_batch, 0.0f);
    total = total.defined() ? ad::add(total, loss) : loss;
  }
  const float value = total.item();
  if (!std::isfinite(value)) return value;
  tape.backward(total);
  adam_.step(model_.params());
  return value;
}

nlohmann::json vocab_hashes(const kg::MultimodalKB& kb) {
  auto hash_names = [](const std::vector<std::string>& names) {
    std::uint64_t h = io::fnv1a64("");
    for (const auto& n : names) h = io::fnv1a64(n + '\n', h);
    return hex64(h);
  };
  std::vector<std::string> relations, categorical;
  for (std::uint32_t r = 0; r < kb.num_relations(); ++r)
    relations.push_back(kb.relations().name(r) + '\t' + std::string(kg::modality_name(kb.modality(r))));
  for (std::uint32_t c = 0; c < kb.num_categorical(); ++c)
    categorical.push_back(kb.relations().name(kb.categorical_relation(c)) + '\t' + kb.categorical_label(c));
  return {{"entities", hash_names(kb.entities().names())},
          {"relations", hash_names(relations)},
          {"categorical", hash_names(categorical)},
          {"words", hash_names(kb.word_vocab().names())},
          {"feature_dim", kb.image_features().dim}};
}

Checkpoint Checkpoint::capture(const kg::MultimodalKB& kb, const TrainConfig& config,
                               const model::Model<float>& model) {
  Checkpoint c;
  c.config = config;
  c.shape = model.shape();
  for (const auto& [name, t] : model.params().all()) c.params.add(name, t.clone(true));
  c.sketch = model.sketch();
  c.vocab = vocab_hashes(kb);
  return c;
}

model::Model<float> Checkpoint::model() const {
  const model::Model<float> reference(config.model, shape, 0);
  const auto& want = reference.params().all();
  const auto& have = params.all();
  if (want.size() != have.size()) throw StateError("checkpoint parameter set does not match its model config");
  for (const auto& [name, t] : want) {
    if (!params.has(name)) throw StateError("checkpoint is missing parameter '" + name + "'");
    if (params.at(name).shape() != t.shape()) throw StateError("checkpoint parameter '" + name + "' has wrong shape");
  }
  model::ParamStore<float> copy;
  for (const auto& [name, t] : have) copy.add(name, t.clone(true));
  return model::Model<float>(config.model, shape, std::move(copy), sketch);
}

void Checkpoint::check_compatible(const kg::MultimodalKB& kb) const {
  const auto now = vocab_hashes(kb);
  for (const auto& [key, value] : now.items()) {
    if (!vocab.contains(key) || vocab.at(key) != value)
      throw StateError("checkpoint was trained on a different knowledge base (" + key + " differ)");
  }
  if (model::ModelShape::from_kb(kb) != shape) throw StateError("checkpoint shape does not match the knowledge base");
}

io::Container Checkpoint::to_container() const {
  io::Container c;
  c.kind = "CKPT";
  c.version = 1;
  c.header = {{"config", config.to_json()},         {"shape", shape.to_json()},
              {"epoch", epoch},                     {"valid_mrr", valid_mrr},
              {"valid_metric", valid_metric},       {"vocab", vocab},
              {"history", history},                 {"sketch_out_dim", sketch.out_dim}};
  for (const auto& [name, t] : params.all()) {
    const auto v = t.data();
    c.put<float>("param/" + name, std::vector<float>(v.begin(), v.end()),
                 std::vector<std::uint64_t>(t.shape().begin(), t.shape().end()));
  }
  if (!sketch.empty()) {
    auto signs = [](const std::vector<std::int8_t>& s) {
      std::vector<std::uint32_t> out;
      for (auto x : s) out.push_back(x > 0 ? 1u : 0u);
      return out;
    };
    c.put<std::uint32_t>("sketch/hash_a", sketch.hash_a);
    c.put<std::uint32_t>("sketch/hash_b", sketch.hash_b);
    c.put<std::uint32_t>("sketch/sign_a", signs(sketch.sign_a));
    c.put<std::uint32_t>("sketch/sign_b", signs(sketch.sign_b));
  }
  return c;
}

Checkpoint Checkpoint::from_container(const io::Container& c) {
  Checkpoint k;
  try {
    const auto& h = c.header;
    k.config = TrainConfig::from_json(h.at("config"));
    k.shape = model::ModelShape::from_json(h.at("shape"));
    k.epoch = h.at("epoch").get<std::size_t>();
    k.valid_mrr = h.at("valid_mrr").get<double>();
    k.valid_metric = h.at("valid_metric").get<std::string>();
    k.vocab = h.at("vocab");
    k.history = h.at("history");
    k.sketch.out_dim = h.at("sketch_out_dim").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw StateError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const InputError& e) {
    throw StateError(std::string("checkpoint config is malformed: ") + e.what());
  }
  for (const auto& [name, arr] : c.arrays) {
    if (name.rfind("param/", 0) != 0) continue;
    ad::Shape shape(arr.shape.begin(), arr.shape.end());
    try {
      k.params.add(name.substr(6), Tensor<float>::from(shape, arr.as<float>(), true));
    } catch (const std::exception& e) {
      throw StateError("checkpoint array '" + name + "' is malformed: " + e.what());
    }
  }
  if (c.has("sketch/hash_a")) {
    auto signs = [](const std::vector<std::uint32_t>& s) {
      std::vector<std::int8_t> out;
      for (auto x : s) out.push_back(x ? 1 : -1);
      return out;
    };
    k.sketch.hash_a = c.get<std::uint32_t>("sketch/hash_a");
    k.sketch.hash_b = c.get<std::uint32_t>("sketch/hash_b");
    k.sketch.sign_a = signs(c.get<std::uint32_t>("sketch/sign_a"));
    k.sketch.sign_b = signs(c.get<std::uint32_t>("sketch/sign_b"));
  }
  return k;
}

void Checkpoint::save(const std::string& path) const { io::save(path, to_container()); }

Checkpoint Checkpoint::load(const std::string& path) { return from_container(io::load(path, "CKPT")); }

double validation_mrr(const kg::MultimodalKB& kb, const TrainConfig& config, const model::Model<float>& model,
                      std::size_t workers, std::string* metric_name) {
  eval::EvalOptions opts;
  opts.workers = workers;
  bool ratings = false, all_ratings_enabled = true;
  for (std::uint32_t r = 0; r < kb.num_relations(); ++r) {
    if (kb.relation(r).rating == 0) continue;
    ratings = true;
    all_ratings_enabled = all_ratings_enabled && config.enabled(kb, r);
  }
  if (ratings && all_ratings_enabled) {
    const auto rep = eval::evaluate_ratings(kb, model, kg::Split::valid, opts);
    if (rep.queries.empty()) throw InputError("valid split has no rating triples");
    if (metric_name) *metric_name = "valid_ratings_mrr";
    return rep.overall.mrr;
  }
  for (std::uint32_t r = 0; r < kb.num_relations(); ++r)
    if (kb.modality(r) == kg::Modality::entity && config.enabled(kb, r)) opts.relations.push_back(r);
  if (opts.relations.empty()) throw InputError("no enabled entity relation to validate on");
  const auto rep = eval::evaluate_links(kb, model, kg::Split::valid, opts);
  if (rep.queries.empty()) throw InputError("valid split has no link triples in the enabled groups");
  if (metric_name) *metric_name = "valid_links_mrr";
  return rep.overall.mrr;
}

FitResult fit(const kg::MultimodalKB& kb, const TrainConfig& config, const FitOptions& options) {
  Trainer trainer(kb, config);
  FitResult result;
  bool have_best = false;
  std::size_t stale = 0;
  std::string metric;
  auto history = nlohmann::json::array();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto stats = trainer.train_epoch();
    result.epochs.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
    nlohmann::json row{{"epoch", epoch}, {"loss", stats.mean_loss}, {"steps", stats.steps}};
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      const double mrr = validation_mrr(kb, config, trainer.model(), options.workers, &metric);
      result.evaluations.emplace_back(epoch, mrr);
      row[metric] = mrr;
      if (options.on_eval) options.on_eval(epoch, mrr);
      if (!have_best || mrr > result.best.valid_mrr) {
        result.best = Checkpoint::capture(kb, config, trainer.model());
        result.best.epoch = epoch;
        result.best.valid_mrr = mrr;
        result.best.valid_metric = metric;
        have_best = true;
        stale = 0;
      } else {
        ++stale;
      }
      history.push_back(row);
      if (stale >= config.patience) break;
    } else {
      history.push_back(row);
    }
  }
  result.best.history = history;
  return result;
}

}  // namespace mkbe::train
