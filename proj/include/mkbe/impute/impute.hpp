#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkbe/kg/kb.hpp"
#include "mkbe/model/model.hpp"

namespace mkbe::impute {

struct DecoderConfig {
  std::size_t epochs = 300;
  double learning_rate = 1e-2;
  std::size_t hidden = 0;  // 0: the embedding dimension
  double holdout = 0.1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DecoderConfig from_json(const nlohmann::json& j);
};

/// in -> hidden (relu) -> out.
class Mlp {
 public:
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed);
  ad::Tensor<float> forward(const ad::Tensor<float>& x) const;
  model::ParamStore<float>& params() { return params_; }
  std::size_t out_dim() const { return out_; }

 private:
  std::size_t out_;
  model::ParamStore<float> params_;
};

/// Full-batch Adam on mean squared error. `x` is [n x d] row-major.
Mlp fit_regressor(std::span<const float> x, std::size_t d, std::span<const float> y, const DecoderConfig& cfg);
/// Full-batch Adam on softmax cross-entropy over `classes` labels.
Mlp fit_classifier(std::span<const float> x, std::size_t d, std::span<const std::int64_t> labels, std::size_t classes,
                   const DecoderConfig& cfg);

/// Attribute triples of r used to fit a decoder and to score it. When the KB
/// already holds r's triples out in the test split those are the holdout;
/// otherwise a seeded fraction of the train triples is.
struct HoldoutSplit {
  std::vector<kg::Triple> train;
  std::vector<kg::Triple> holdout;
  std::string source;  // "test-split" or "seeded-train-holdout"
};
HoldoutSplit attribute_holdout(const kg::MultimodalKB& kb, std::uint32_t r, double fraction, std::uint64_t seed);

struct ImputationResult {
  std::uint32_t entity = 0;
  std::uint32_t relation = 0;
  double value = 0.0;       // numeric prediction in value units
  std::string label;        // categorical prediction
  std::string method;       // "neural" or "search"
  double diagnostic = 0.0;  // search: best score; neural: standardized prediction or class probability
};

struct NumericReport {
  std::uint32_t relation = 0;
  std::string method;
  std::string holdout_source;
  std::size_t train_count = 0;
  std::size_t holdout_count = 0;
  double rmse = 0.0;           // value units
  double rmse_z = 0.0;         // standardized units
  double baseline_rmse = 0.0;  // train-mean predictor, value units
  std::vector<ImputationResult> predictions;
  nlohmann::json to_json(const kg::MultimodalKB& kb) const;
};

struct CategoricalReport {
  std::uint32_t relation = 0;
  std::string holdout_source;
  std::size_t classes = 0;
  std::size_t train_count = 0;
  std::size_t holdout_entities = 0;
  double accuracy = 0.0;
  double baseline_accuracy = 0.0;  // most frequent train class
  std::vector<ImputationResult> predictions;
  nlohmann::json to_json(const kg::MultimodalKB& kb) const;
};

/// Entity embeddings are read, never written. Needs at least 10 train values.
NumericReport neural_numeric(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t r,
                             const DecoderConfig& cfg);
/// Predicts, per holdout entity, the highest-probability class it does not
/// already have in the decoder's train triples; correct when that class is
/// among the entity's held-out labels. Needs at least 2 train classes.
CategoricalReport neural_categorical(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t r,
                                     const DecoderConfig& cfg);

/// Scores ψ(s, r, v) for every integer v in [lo, hi] and returns the best,
/// the lowest v on ties.
ImputationResult impute_by_search(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t s,
                                  std::uint32_t r, int lo, int hi);
/// impute_by_search over the same holdout the neural decoder uses.
NumericReport search_numeric(const kg::MultimodalKB& kb, const model::Model<float>& model, std::uint32_t r, int lo,
                             int hi, const DecoderConfig& cfg);

/// entity<TAB>relation<TAB>prediction<TAB>method rows.
std::string predictions_tsv(const kg::MultimodalKB& kb, std::span<const ImputationResult> rows);

}  // namespace mkbe::impute
