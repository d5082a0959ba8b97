#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkbe/ad/tensor.hpp"
#include "mkbe/errors.hpp"
#include "mkbe/io/container.hpp"
#include "mkbe/kg/kb.hpp"
#include "mkbe/model/model.hpp"

namespace mkbe::train {

struct TrainConfig {
  model::ModelConfig model;
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::size_t max_candidates = 256;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  std::size_t patience = 3;  // evaluation windows without improvement before stopping
  std::size_t eval_every = 5;
  /// Relation groups that participate; empty means all of them.
  std::vector<std::string> groups;

  /// Throws InputError on out-of-range values or groups unknown to the schema.
  void validate(const kg::MultimodalKB& kb) const;
  bool enabled(const kg::MultimodalKB& kb, std::uint32_t r) const;

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Raised when the loss or a parameter stops being finite.
class DivergenceError : public StateError {
 public:
  using StateError::StateError;
};

/// Negative mean of t' log p + (1 - t') log(1 - p) with p = σ(score) and
/// t' = t(1 - ε) + ε/2.
template <class Real>
ad::Tensor<Real> bce_loss(const ad::Tensor<Real>& scores, std::span<const Real> labels, double smoothing);

/// Adam with bias correction. State is keyed by parameter name.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Applies one update from the accumulated gradients. Throws
  /// DivergenceError naming the parameter if any value becomes non-finite.
  void step(model::ParamStore<float>& params);
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> state_;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::size_t groups = 0;
};

/// Exclusive owner of a model's parameters during training.
class Trainer {
 public:
  Trainer(const kg::MultimodalKB& kb, TrainConfig config);
  Trainer(const kg::MultimodalKB& kb, TrainConfig config, model::Model<float> model);

  /// One pass over the enabled train (s, r) groups in seeded shuffled order.
  EpochStats train_epoch();

  const model::Model<float>& model() const { return model_; }
  model::Model<float>& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t num_groups() const { return queries_.size(); }

 private:
  float train_batch(std::span<const std::pair<std::uint32_t, std::uint32_t>> batch);

  const kg::MultimodalKB& kb_;
  TrainConfig config_;
  model::Model<float> model_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> queries_;
  std::size_t epoch_ = 0;
};

/// Content hashes of the vocabularies a checkpoint's parameter rows index.
nlohmann::json vocab_hashes(const kg::MultimodalKB& kb);

struct Checkpoint {
  TrainConfig config;
  model::ModelShape shape;
  model::ParamStore<float> params;
  model::SketchTables sketch;
  std::size_t epoch = 0;
  double valid_mrr = 0.0;
  std::string valid_metric;
  nlohmann::json vocab;
  nlohmann::json history = nlohmann::json::array();

  static Checkpoint capture(const kg::MultimodalKB& kb, const TrainConfig& config, const model::Model<float>& model);
  model::Model<float> model() const;
  /// Throws StateError when the KB's vocabularies differ from the ones trained on.
  void check_compatible(const kg::MultimodalKB& kb) const;

  io::Container to_container() const;
  static Checkpoint from_container(const io::Container& c);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

struct FitOptions {
  std::size_t workers = 1;
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(std::size_t epoch, double metric)> on_eval;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochStats> epochs;
  std::vector<std::pair<std::size_t, double>> evaluations;  // (epoch, validation MRR)
};

/// Validation metric: ratings MRR when the KB declares rating relations and
/// they are enabled, else filtered link MRR over enabled entity relations.
double validation_mrr(const kg::MultimodalKB& kb, const TrainConfig& config, const model::Model<float>& model,
                      std::size_t workers, std::string* metric_name = nullptr);

/// Trains with early stopping on validation MRR, evaluated every
/// `eval_every` epochs and after the last one; returns the best snapshot.
FitResult fit(const kg::MultimodalKB& kb, const TrainConfig& config, const FitOptions& options = {});

}  // namespace mkbe::train
