#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkbe/ad/tensor.hpp"
#include "mkbe/kg/kb.hpp"

namespace mkbe::model {

enum class ScorerKind { distmult, conve };
std::string scorer_name(ScorerKind k);
ScorerKind parse_scorer(const std::string& s);

/// Hyperparameters of the encoders and scorer.
struct ModelConfig {
  ScorerKind scorer = ScorerKind::distmult;
  std::size_t dim = 64;
  bool numeric_selu = false;  // selu after the numeric affine map
  std::size_t char_dim = 32;
  std::size_t max_chars = 64;
  std::size_t word_dim = 64;
  std::size_t max_tokens = 128;
  std::size_t cnn_filters = 64;
  std::vector<std::size_t> cnn_widths{3, 5};
  std::size_t sketch_dim = 1024;
  std::size_t conv_filters = 32;
  std::size_t conv_kernel = 3;
  double input_dropout = 0.2;
  double feature_dropout = 0.3;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Sizes taken from the knowledge base that fix parameter shapes.
struct ModelShape {
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t categorical = 0;
  std::size_t words = 0;
  std::size_t feature_dim = 0;
  bool numeric = false;
  bool short_text = false;
  bool long_text = false;
  bool image = false;

  static ModelShape from_kb(const kg::MultimodalKB& kb);
  nlohmann::json to_json() const;
  static ModelShape from_json(const nlohmann::json& j);
  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Largest h dividing d with h <= sqrt(d); the embedding reshapes to h x d/h.
std::pair<std::size_t, std::size_t> reshape_dims(std::size_t d);

/// Fixed hash/sign tables of the two count sketches used for image pooling.
struct SketchTables {
  std::size_t out_dim = 0;
  std::vector<std::uint32_t> hash_a, hash_b;
  std::vector<std::int8_t> sign_a, sign_b;

  static SketchTables draw(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng);
  bool empty() const { return hash_a.empty(); }
};

/// Named learnable tensors, iterated in name order.
template <class Real>
class ParamStore {
 public:
  ad::Tensor<Real>& add(const std::string& name, ad::Tensor<Real> t);
  const ad::Tensor<Real>& at(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, ad::Tensor<Real>>& all() const { return params_; }
  std::size_t count() const;
  void zero_grad();

 private:
  std::map<std::string, ad::Tensor<Real>> params_;
};

/// Dropout switch and generator for one forward pass.
struct Mode {
  bool train = false;
  std::mt19937_64* rng = nullptr;
  static Mode eval() { return {}; }
};

/// ConvE parameter view.
template <class Real>
struct ConvEParams {
  std::size_t h = 0, w = 0;
  ad::Tensor<Real> kernels;    // [F x 1 x k x k]
  ad::Tensor<Real> conv_bias;  // [F]
  ad::Tensor<Real> proj;       // [flat x d]
  ad::Tensor<Real> proj_bias;  // [d]
  double input_dropout = 0.0;
  double feature_dropout = 0.0;
};

template <class Real>
ad::Tensor<Real> score_distmult(const ad::Tensor<Real>& e_s, const ad::Tensor<Real>& r_diag,
                                const ad::Tensor<Real>& e_o);

/// f(vec(f([ē_s; r̄] * w)) W) for a batch of [B x d] subjects and relations,
/// f = relu. The score against an object is the dot product with e_o.
template <class Real>
ad::Tensor<Real> conve_query(const ad::Tensor<Real>& e_s, const ad::Tensor<Real>& r, const ConvEParams<Real>& p,
                             const Mode& mode);
template <class Real>
ad::Tensor<Real> score_conve(const ad::Tensor<Real>& e_s, const ad::Tensor<Real>& r, const ad::Tensor<Real>& e_o,
                             const ConvEParams<Real>& p, const Mode& mode = Mode::eval());

/// Index of the single 1 in a one-hot vector; anything else is rejected.
template <class Real>
std::size_t one_hot_index(std::span<const Real> one_hot);

/// Encoder bank plus scorer. Every encoder maps to `dim` columns; both
/// scorers factor as <q(s, r), e_o>, so 1-N scoring is one matrix product.
template <class Real>
class Model {
 public:
  using T = ad::Tensor<Real>;

  Model(const kg::MultimodalKB& kb, ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, ModelShape shape, std::uint64_t seed);
  Model(ModelConfig config, ModelShape shape, ParamStore<Real> params, SketchTables sketch);

  const ModelConfig& config() const { return config_; }
  const ModelShape& shape() const { return shape_; }
  ParamStore<Real>& params() { return params_; }
  const ParamStore<Real>& params() const { return params_; }
  const SketchTables& sketch() const { return sketch_; }
  ConvEParams<Real> conve_params() const;

  T embed_entities(std::span<const std::uint32_t> ids) const;
  T embed_relations(std::span<const std::uint32_t> ids) const;
  /// [B x d] query vectors for (s_i, r_i).
  T query(std::span<const std::uint32_t> s, std::span<const std::uint32_t> r, const Mode& mode) const;
  /// [N x d] encodings of objects of relation r.
  T encode_objects(const kg::MultimodalKB& kb, std::uint32_t r, std::span<const std::uint32_t> objects) const;

  T encode_categorical(std::span<const std::uint32_t> ids) const;
  /// Standardized inputs z for numeric relation r.
  T encode_numeric(std::uint32_t r, std::span<const double> z) const;
  T encode_short_text(const std::vector<std::vector<std::int64_t>>& chars) const;
  T encode_long_text(const std::vector<std::vector<std::int64_t>>& words) const;
  /// Raw feature rows [N x F].
  T encode_image(const T& features) const;
  /// Pooled and normalized image representation before the affine map.
  T pool_image(const T& features) const;

  /// [B x N] scores of queries against encoded candidates.
  static T score(const T& queries, const T& candidates);

  /// Conversion between precisions; values are copied.
  template <class Other>
  Model<Other> cast() const;

 private:
  void init(std::uint64_t seed);
  T gru_layer(const std::vector<T>& inputs, const std::vector<std::vector<std::uint8_t>>& masks, const std::string& prefix,
              bool reverse, std::vector<T>* states) const;

  ModelConfig config_;
  ModelShape shape_;
  ParamStore<Real> params_;
  SketchTables sketch_;
};

}  // namespace mkbe::model
