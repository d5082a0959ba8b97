#include "mkbe/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mkbe/ad/ops.hpp"
#include "mkbe/errors.hpp"
#include "mkbe/kg/text.hpp"

namespace mkbe::model {

using ad::Shape;
using ad::Tensor;

std::string scorer_name(ScorerKind k) { return k == ScorerKind::distmult ? "distmult" : "conve"; }

ScorerKind parse_scorer(const std::string& s) {
  if (s == "distmult") return ScorerKind::distmult;
  if (s == "conve") return ScorerKind::conve;
  throw InputError("unknown scorer '" + s + "' (expected distmult or conve)");
}

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw InputError(what + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InputError("unknown key '" + k + "' in " + what);
}

template <class Real>
Tensor<Real> uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return Tensor<Real>::from(std::move(shape), std::move(v), true);
}

template <class Real>
Tensor<Real> xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return uniform<Real>(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

template <class Real>
Tensor<Real> zeros(Shape shape) {
  return Tensor<Real>::zeros(std::move(shape), true);
}

constexpr double kEmbeddingBound = 0.1;

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {{"scorer", scorer_name(scorer)},
          {"dim", dim},
          {"numeric_selu", numeric_selu},
          {"char_dim", char_dim},
          {"max_chars", max_chars},
          {"word_dim", word_dim},
          {"max_tokens", max_tokens},
          {"cnn_filters", cnn_filters},
          {"cnn_widths", cnn_widths},
          {"sketch_dim", sketch_dim},
          {"conv_filters", conv_filters},
          {"conv_kernel", conv_kernel},
          {"input_dropout", input_dropout},
          {"feature_dropout", feature_dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"scorer", "dim", "numeric_selu", "char_dim", "max_chars", "word_dim", "max_tokens",
                       "cnn_filters", "cnn_widths", "sketch_dim", "conv_filters", "conv_kernel", "input_dropout",
                       "feature_dropout"},
                      "model config");
  ModelConfig c;
  try {
    if (j.contains("scorer")) c.scorer = parse_scorer(j.at("scorer").get<std::string>());
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("dim", c.dim);
    get("numeric_selu", c.numeric_selu);
    get("char_dim", c.char_dim);
    get("max_chars", c.max_chars);
    get("word_dim", c.word_dim);
    get("max_tokens", c.max_tokens);
    get("cnn_filters", c.cnn_filters);
    get("cnn_widths", c.cnn_widths);
    get("sketch_dim", c.sketch_dim);
    get("conv_filters", c.conv_filters);
    get("conv_kernel", c.conv_kernel);
    get("input_dropout", c.input_dropout);
    get("feature_dropout", c.feature_dropout);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model config: ") + e.what());
  }
  if (c.dim == 0) throw InputError("model config: dim must be positive");
  if (c.cnn_widths.empty()) throw InputError("model config: cnn_widths is empty");
  if (c.input_dropout < 0 || c.input_dropout >= 1 || c.feature_dropout < 0 || c.feature_dropout >= 1)
    throw InputError("model config: dropout rates must be in [0, 1)");
  return c;
}

ModelShape ModelShape::from_kb(const kg::MultimodalKB& kb) {
  ModelShape s;
  s.entities = kb.num_entities();
  s.relations = kb.num_relations();
  s.categorical = kb.num_categorical();
  s.words = kb.word_vocab().size();
  for (const auto& r : kb.schema().relations()) {
    switch (r.modality) {
      case kg::Modality::numeric: s.numeric = true; break;
      case kg::Modality::short_text: s.short_text = true; break;
      case kg::Modality::long_text: s.long_text = true; break;
      case kg::Modality::image: s.image = kb.image_features().dim > 0; break;
      default: break;
    }
  }
  s.feature_dim = s.image ? kb.image_features().dim : 0;
  if (s.long_text && s.words == 0) s.words = 1;
  return s;
}

nlohmann::json ModelShape::to_json() const {
  return {{"entities", entities}, {"relations", relations}, {"categorical", categorical},
          {"words", words},       {"feature_dim", feature_dim}, {"numeric", numeric},
          {"short_text", short_text}, {"long_text", long_text}, {"image", image}};
}

ModelShape ModelShape::from_json(const nlohmann::json& j) {
  ModelShape s;
  s.entities = j.at("entities");
  s.relations = j.at("relations");
  s.categorical = j.at("categorical");
  s.words = j.at("words");
  s.feature_dim = j.at("feature_dim");
  s.numeric = j.at("numeric");
  s.short_text = j.at("short_text");
  s.long_text = j.at("long_text");
  s.image = j.at("image");
  return s;
}

std::pair<std::size_t, std::size_t> reshape_dims(std::size_t d) {
  if (d == 0) throw std::invalid_argument("reshape_dims: d must be positive");
  std::size_t h = 1;
  for (std::size_t c = 1; c * c <= d; ++c)
    if (d % c == 0) h = c;
  return {h, d / h};
}

SketchTables SketchTables::draw(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng) {
  if (in_dim == 0 || out_dim == 0) throw std::invalid_argument("sketch dims must be positive");
  SketchTables t;
  t.out_dim = out_dim;
  std::uniform_int_distribution<std::uint32_t> bucket(0, static_cast<std::uint32_t>(out_dim - 1));
  std::bernoulli_distribution coin(0.5);
  auto fill = [&](std::vector<std::uint32_t>& h, std::vector<std::int8_t>& s) {
    h.resize(in_dim);
    s.resize(in_dim);
    for (std::size_t j = 0; j < in_dim; ++j) {
      h[j] = bucket(rng);
      s[j] = coin(rng) ? 1 : -1;
    }
  };
  fill(t.hash_a, t.sign_a);
  fill(t.hash_b, t.sign_b);
  return t;
}

template <class Real>
Tensor<Real>& ParamStore<Real>::add(const std::string& name, Tensor<Real> t) {
  if (params_.count(name)) throw std::logic_error("parameter '" + name + "' registered twice");
  t.set_requires_grad(true);
  return params_.emplace(name, std::move(t)).first->second;
}

template <class Real>
const Tensor<Real>& ParamStore<Real>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <class Real>
std::size_t ParamStore<Real>::count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : params_) n += v.size();
  return n;
}

template <class Real>
void ParamStore<Real>::zero_grad() {
  for (auto& [k, v] : params_) {
    auto p = v;
    p.zero_grad();
  }
}

template <class Real>
Tensor<Real> score_distmult(const Tensor<Real>& e_s, const Tensor<Real>& r_diag, const Tensor<Real>& e_o) {
  if (e_s.shape() != r_diag.shape() || e_s.shape() != e_o.shape()) {
    throw std::invalid_argument("score_distmult: dim mismatch " + ad::shape_str(e_s.shape()) + ", " +
                                ad::shape_str(r_diag.shape()) + ", " + ad::shape_str(e_o.shape()));
  }
  return ad::sum(ad::mul(ad::mul(e_s, r_diag), e_o));
}

template <class Real>
Tensor<Real> conve_query(const Tensor<Real>& e_s, const Tensor<Real>& r, const ConvEParams<Real>& p,
                         const Mode& mode) {
  if (e_s.rank() != 2 || e_s.shape() != r.shape())
    throw std::invalid_argument("conve_query: subject and relation batches must be equal [B x d] matrices");
  const std::size_t batch = e_s.dim(0), d = e_s.dim(1);
  if (p.h * p.w != d) throw std::invalid_argument("conve_query: reshape dims do not multiply to d");
  auto x = ad::reshape(ad::concat_cols(e_s, r), {batch, 1, 2 * p.h, p.w});
  if (mode.train && p.input_dropout > 0) x = ad::dropout(x, p.input_dropout, *mode.rng);
  auto c = ad::relu(ad::add_channel_bias(ad::conv2d(x, p.kernels), p.conv_bias));
  if (mode.train && p.feature_dropout > 0) c = ad::dropout(c, p.feature_dropout, *mode.rng);
  const std::size_t flat = c.size() / batch;
  if (flat != p.proj.dim(0))
    throw std::invalid_argument("conve_query: flattened feature length " + std::to_string(flat) +
                                " does not match projection " + ad::shape_str(p.proj.shape()));
  return ad::relu(ad::add_row(ad::matmul(ad::reshape(c, {batch, flat}), p.proj), p.proj_bias));
}

template <class Real>
Tensor<Real> score_conve(const Tensor<Real>& e_s, const Tensor<Real>& r, const Tensor<Real>& e_o,
                         const ConvEParams<Real>& p, const Mode& mode) {
  if (e_s.rank() != 1 || e_s.shape() != r.shape() || e_s.shape() != e_o.shape())
    throw std::invalid_argument("score_conve: expected three vectors of equal dim");
  const std::size_t d = e_s.dim(0);
  auto q = conve_query(ad::reshape(e_s, {1, d}), ad::reshape(r, {1, d}), p, mode);
  return ad::sum(ad::mul(ad::reshape(q, {d}), e_o));
}

template <class Real>
std::size_t one_hot_index(std::span<const Real> one_hot) {
  std::size_t hot = one_hot.size(), count = 0;
  for (std::size_t i = 0; i < one_hot.size(); ++i) {
    if (one_hot[i] == Real(1)) {
      hot = i;
      ++count;
    } else if (one_hot[i] != Real(0)) {
      throw std::invalid_argument("one-hot vector has a value other than 0 or 1");
    }
  }
  if (count != 1) throw std::invalid_argument("one-hot vector must have exactly one hot entry, has " +
                                              std::to_string(count));
  return hot;
}

template <class Real>
Model<Real>::Model(const kg::MultimodalKB& kb, ModelConfig config, std::uint64_t seed)
    : Model(std::move(config), ModelShape::from_kb(kb), seed) {}

template <class Real>
Model<Real>::Model(ModelConfig config, ModelShape shape, std::uint64_t seed)
    : config_(std::move(config)), shape_(shape) {
  init(seed);
}

template <class Real>
Model<Real>::Model(ModelConfig config, ModelShape shape, ParamStore<Real> params, SketchTables sketch)
    : config_(std::move(config)), shape_(shape), params_(std::move(params)), sketch_(std::move(sketch)) {
  if (shape_.image && (sketch_.hash_a.size() != shape_.feature_dim || sketch_.out_dim != config_.sketch_dim))
    throw StateError("sketch tables do not match the image feature dimension");
}

template <class Real>
void Model<Real>::init(std::uint64_t seed) {
  const std::size_t d = config_.dim;
  if (shape_.entities == 0 || shape_.relations == 0) throw InputError("model needs at least one entity and relation");
  std::mt19937_64 rng(seed);
  params_.add("entity", uniform<Real>({shape_.entities, d}, kEmbeddingBound, rng));
  params_.add("relation", uniform<Real>({shape_.relations, d}, kEmbeddingBound, rng));
  if (shape_.categorical > 0) {
    params_.add("categorical.W", xavier<Real>({shape_.categorical, d}, shape_.categorical, d, rng));
    params_.add("categorical.b", zeros<Real>({d}));
  }
  if (shape_.numeric) {
    params_.add("numeric.w", xavier<Real>({shape_.relations, d}, 1, d, rng));
    params_.add("numeric.b", zeros<Real>({shape_.relations, d}));
  }
  if (shape_.short_text) {
    if (d % 2) throw InputError("short text encoder needs an even embedding dim");
    const std::size_t hidden = d / 2;
    params_.add("char.embed", uniform<Real>({kg::kCharVocabSize, config_.char_dim}, kEmbeddingBound, rng));
    for (int layer = 0; layer < 2; ++layer) {
      const std::size_t in = layer == 0 ? config_.char_dim : 2 * hidden;
      for (const char* dir : {"f", "b"}) {
        const std::string pre = "gru.l" + std::to_string(layer) + "." + dir + ".";
        params_.add(pre + "Wx", xavier<Real>({in, 3 * hidden}, in, 3 * hidden, rng));
        params_.add(pre + "Wh", xavier<Real>({hidden, 3 * hidden}, hidden, 3 * hidden, rng));
        params_.add(pre + "bx", zeros<Real>({3 * hidden}));
        params_.add(pre + "bh", zeros<Real>({3 * hidden}));
      }
    }
  }
  if (shape_.long_text) {
    const std::size_t dw = config_.word_dim, f = config_.cnn_filters;
    params_.add("word.embed", uniform<Real>({shape_.words, dw}, kEmbeddingBound, rng));
    for (auto w : config_.cnn_widths) {
      const std::string pre = "cnn.w" + std::to_string(w) + ".";
      params_.add(pre + "k", xavier<Real>({f, 1, w, dw}, w * dw, f * w * dw, rng));
      params_.add(pre + "b", zeros<Real>({f}));
    }
    const std::size_t feat = f * config_.cnn_widths.size();
    params_.add("cnn.proj.W", xavier<Real>({feat, d}, feat, d, rng));
    params_.add("cnn.proj.b", zeros<Real>({d}));
  }
  if (shape_.image) {
    sketch_ = SketchTables::draw(shape_.feature_dim, config_.sketch_dim, rng);
    params_.add("image.proj.W", xavier<Real>({config_.sketch_dim, d}, config_.sketch_dim, d, rng));
    params_.add("image.proj.b", zeros<Real>({d}));
  }
  if (config_.scorer == ScorerKind::conve) {
    const auto [h, w] = reshape_dims(d);
    const std::size_t k = config_.conv_kernel, c = config_.conv_filters;
    if (2 * h < k || w < k)
      throw InputError("ConvE kernel " + std::to_string(k) + " does not fit the " + std::to_string(2 * h) + "x" +
                       std::to_string(w) + " stacked input for dim " + std::to_string(d));
    const std::size_t flat = c * (2 * h - k + 1) * (w - k + 1);
    params_.add("conve.kernels", xavier<Real>({c, 1, k, k}, k * k, c * k * k, rng));
    params_.add("conve.conv_bias", zeros<Real>({c}));
    params_.add("conve.proj.W", xavier<Real>({flat, d}, flat, d, rng));
    params_.add("conve.proj.b", zeros<Real>({d}));
  }
}

template <class Real>
ConvEParams<Real> Model<Real>::conve_params() const {
  const auto [h, w] = reshape_dims(config_.dim);
  return {h,
          w,
          params_.at("conve.kernels"),
          params_.at("conve.conv_bias"),
          params_.at("conve.proj.W"),
          params_.at("conve.proj.b"),
          config_.input_dropout,
          config_.feature_dropout};
}

namespace {

std::vector<std::int64_t> to_ids(std::span<const std::uint32_t> ids) { return {ids.begin(), ids.end()}; }

}  // namespace

template <class Real>
Tensor<Real> Model<Real>::embed_entities(std::span<const std::uint32_t> ids) const {
  const auto v = to_ids(ids);
  return ad::gather_rows(params_.at("entity"), std::span<const std::int64_t>(v));
}

template <class Real>
Tensor<Real> Model<Real>::embed_relations(std::span<const std::uint32_t> ids) const {
  const auto v = to_ids(ids);
  return ad::gather_rows(params_.at("relation"), std::span<const std::int64_t>(v));
}

template <class Real>
Tensor<Real> Model<Real>::query(std::span<const std::uint32_t> s, std::span<const std::uint32_t> r,
                                const Mode& mode) const {
  if (s.size() != r.size()) throw std::invalid_argument("query: subject and relation lists differ in length");
  auto es = embed_entities(s);
  auto rr = embed_relations(r);
  if (config_.scorer == ScorerKind::distmult) return ad::mul(es, rr);
  if (mode.train && !mode.rng) throw std::invalid_argument("training mode needs a random generator");
  return conve_query(es, rr, conve_params(), mode);
}

template <class Real>
Tensor<Real> Model<Real>::score(const Tensor<Real>& queries, const Tensor<Real>& candidates) {
  return ad::matmul_nt(queries, candidates);
}

template <class Real>
Tensor<Real> Model<Real>::encode_categorical(std::span<const std::uint32_t> ids) const {
  const auto v = to_ids(ids);
  return ad::selu(ad::add_row(ad::gather_rows(params_.at("categorical.W"), std::span<const std::int64_t>(v)),
                              params_.at("categorical.b")));
}

template <class Real>
Tensor<Real> Model<Real>::encode_numeric(std::uint32_t r, std::span<const double> z) const {
  if (!params_.has("numeric.w")) throw std::invalid_argument("model has no numeric encoder");
  if (r >= shape_.relations) throw std::out_of_range("numeric relation id out of range");
  const std::vector<std::int64_t> row{r};
  const std::size_t d = config_.dim;
  auto w = ad::gather_rows(params_.at("numeric.w"), std::span<const std::int64_t>(row));
  auto b = ad::reshape(ad::gather_rows(params_.at("numeric.b"), std::span<const std::int64_t>(row)), {d});
  std::vector<Real> zs(z.begin(), z.end());
  auto zt = Tensor<Real>::from({z.size(), 1}, std::move(zs));
  auto out = ad::add_row(ad::matmul(zt, w), b);
  return config_.numeric_selu ? ad::selu(out) : out;
}

template <class Real>
Tensor<Real> Model<Real>::gru_layer(const std::vector<Tensor<Real>>& inputs,
                                    const std::vector<std::vector<std::uint8_t>>& masks, const std::string& prefix,
                                    bool reverse, std::vector<Tensor<Real>>* states) const {
  const std::size_t steps = inputs.size(), n = inputs.front().dim(0), hidden = config_.dim / 2;
  const auto& wx = params_.at(prefix + "Wx");
  const auto& wh = params_.at(prefix + "Wh");
  const auto& bx = params_.at(prefix + "bx");
  const auto& bh = params_.at(prefix + "bh");
  auto h = Tensor<Real>::zeros({n, hidden});
  if (states) states->assign(steps, {});
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = reverse ? steps - 1 - k : k;
    auto gx = ad::add_row(ad::matmul(inputs[t], wx), bx);
    auto gh = ad::add_row(ad::matmul(h, wh), bh);
    auto reset = ad::sigmoid(ad::add(ad::slice_cols(gx, 0, hidden), ad::slice_cols(gh, 0, hidden)));
    auto update = ad::sigmoid(ad::add(ad::slice_cols(gx, hidden, hidden), ad::slice_cols(gh, hidden, hidden)));
    auto cand = ad::tanh(
        ad::add(ad::slice_cols(gx, 2 * hidden, hidden), ad::mul(reset, ad::slice_cols(gh, 2 * hidden, hidden))));
    auto next = ad::add(cand, ad::mul(update, ad::sub(h, cand)));
    h = ad::where_rows(std::span<const std::uint8_t>(masks[t]), next, h);
    if (states) (*states)[t] = h;
  }
  return h;
}

template <class Real>
Tensor<Real> Model<Real>::encode_short_text(const std::vector<std::vector<std::int64_t>>& chars) const {
  if (!params_.has("char.embed")) throw std::invalid_argument("model has no short text encoder");
  if (chars.empty()) throw std::invalid_argument("encode_short_text: empty batch");
  const std::size_t n = chars.size();
  std::size_t steps = 0;
  for (const auto& c : chars) {
    if (c.empty()) throw std::invalid_argument("encode_short_text: empty string");
    steps = std::max(steps, std::min(c.size(), config_.max_chars));
  }
  std::vector<Tensor<Real>> inputs(steps);
  std::vector<std::vector<std::uint8_t>> masks(steps, std::vector<std::uint8_t>(n, 0));
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<std::int64_t> ids(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
      if (t < std::min(chars[i].size(), config_.max_chars)) {
        ids[i] = chars[i][t];
        masks[t][i] = 1;
      }
    }
    inputs[t] = ad::gather_rows(params_.at("char.embed"), std::span<const std::int64_t>(ids));
  }
  std::vector<Tensor<Real>> fwd, bwd;
  gru_layer(inputs, masks, "gru.l0.f.", false, &fwd);
  gru_layer(inputs, masks, "gru.l0.b.", true, &bwd);
  std::vector<Tensor<Real>> upper(steps);
  for (std::size_t t = 0; t < steps; ++t) upper[t] = ad::concat_cols(fwd[t], bwd[t]);
  auto top_f = gru_layer(upper, masks, "gru.l1.f.", false, nullptr);
  auto top_b = gru_layer(upper, masks, "gru.l1.b.", true, nullptr);
  return ad::concat_cols(top_f, top_b);
}

template <class Real>
Tensor<Real> Model<Real>::encode_long_text(const std::vector<std::vector<std::int64_t>>& words) const {
  if (!params_.has("word.embed")) throw std::invalid_argument("model has no long text encoder");
  if (words.empty()) throw std::invalid_argument("encode_long_text: empty batch");
  const std::size_t widest = *std::max_element(config_.cnn_widths.begin(), config_.cnn_widths.end());
  const std::size_t dw = config_.word_dim, filters = config_.cnn_filters;

  // Texts sharing a padded length are convolved together.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i].empty()) throw std::invalid_argument("encode_long_text: empty token sequence");
    by_len[std::max(widest, std::min(words[i].size(), config_.max_tokens))].push_back(i);
  }
  Tensor<Real> stacked;
  std::vector<std::int64_t> position(words.size());
  std::size_t row = 0;
  for (const auto& [len, members] : by_len) {
    std::vector<std::int64_t> ids;
    ids.reserve(members.size() * len);
    for (auto i : members) {
      const std::size_t keep = std::min(words[i].size(), config_.max_tokens);
      ids.insert(ids.end(), len - keep, -1);
      ids.insert(ids.end(), words[i].begin(), words[i].begin() + static_cast<std::ptrdiff_t>(keep));
      position[i] = static_cast<std::int64_t>(row++);
    }
    const std::size_t m = members.size();
    auto x = ad::reshape(ad::gather_rows(params_.at("word.embed"), std::span<const std::int64_t>(ids)), {m, 1, len, dw});
    Tensor<Real> feats;
    for (auto w : config_.cnn_widths) {
      const std::string pre = "cnn.w" + std::to_string(w) + ".";
      auto c = ad::relu(ad::add_channel_bias(ad::conv2d(x, params_.at(pre + "k")), params_.at(pre + "b")));
      auto pooled = ad::reshape(ad::max_over_cols(ad::reshape(c, {m * filters, len - w + 1})), {m, filters});
      feats = feats.defined() ? ad::concat_cols(feats, pooled) : pooled;
    }
    stacked = stacked.defined() ? ad::concat_rows(stacked, feats) : feats;
  }
  auto ordered = ad::gather_rows(stacked, std::span<const std::int64_t>(position));
  return ad::add_row(ad::matmul(ordered, params_.at("cnn.proj.W")), params_.at("cnn.proj.b"));
}

template <class Real>
Tensor<Real> Model<Real>::pool_image(const Tensor<Real>& features) const {
  if (!shape_.image) throw std::invalid_argument("model has no image encoder");
  if (features.rank() != 2 || features.dim(1) != shape_.feature_dim)
    throw std::invalid_argument("image features must be [N x " + std::to_string(shape_.feature_dim) + "], got " +
                                ad::shape_str(features.shape()));
  const auto& s = sketch_;
  auto a = ad::count_sketch(features, std::span<const std::uint32_t>(s.hash_a), std::span<const std::int8_t>(s.sign_a),
                            s.out_dim);
  auto b = ad::count_sketch(features, std::span<const std::uint32_t>(s.hash_b), std::span<const std::int8_t>(s.sign_b),
                            s.out_dim);
  return ad::l2_normalize_rows(ad::signed_sqrt(ad::circular_convolution(a, b)));
}

template <class Real>
Tensor<Real> Model<Real>::encode_image(const Tensor<Real>& features) const {
  return ad::add_row(ad::matmul(pool_image(features), params_.at("image.proj.W")), params_.at("image.proj.b"));
}

template <class Real>
Tensor<Real> Model<Real>::encode_objects(const kg::MultimodalKB& kb, std::uint32_t r,
                                         std::span<const std::uint32_t> objects) const {
  if (objects.empty()) throw std::invalid_argument("encode_objects: no objects");
  switch (kb.modality(r)) {
    case kg::Modality::entity: return embed_entities(objects);
    case kg::Modality::categorical: return encode_categorical(objects);
    case kg::Modality::numeric: {
      std::vector<double> z;
      z.reserve(objects.size());
      for (auto o : objects) z.push_back(kb.numeric_z(o));
      return encode_numeric(r, z);
    }
    case kg::Modality::short_text:
    case kg::Modality::long_text: {
      std::vector<std::vector<std::int64_t>> seqs;
      seqs.reserve(objects.size());
      for (auto o : objects) {
        const auto& tok = kb.text_tokens(o);
        seqs.push_back(tok.empty() ? std::vector<std::int64_t>{0} : tok);
      }
      return kb.modality(r) == kg::Modality::short_text ? encode_short_text(seqs) : encode_long_text(seqs);
    }
    case kg::Modality::image: {
      const auto& fm = kb.image_features();
      std::vector<Real> rows;
      rows.reserve(objects.size() * fm.dim);
      for (auto o : objects) {
        const auto row = fm.row(o);
        rows.insert(rows.end(), row.begin(), row.end());
      }
      return encode_image(Tensor<Real>::from({objects.size(), fm.dim}, std::move(rows)));
    }
  }
  throw std::logic_error("unhandled modality");
}

template <class Real>
template <class Other>
Model<Other> Model<Real>::cast() const {
  ParamStore<Other> p;
  for (const auto& [name, t] : params_.all()) {
    const auto v = t.data();
    p.add(name, Tensor<Other>::from(t.shape(), std::vector<Other>(v.begin(), v.end()), true));
  }
  return Model<Other>(config_, shape_, std::move(p), sketch_);
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;

#define MKBE_INSTANTIATE_SCORERS(R)                                                                         \
  template Tensor<R> score_distmult(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);                 \
  template Tensor<R> conve_query(const Tensor<R>&, const Tensor<R>&, const ConvEParams<R>&, const Mode&);  \
  template Tensor<R> score_conve(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, const ConvEParams<R>&, \
                                 const Mode&);                                                             \
  template std::size_t one_hot_index(std::span<const R>);

MKBE_INSTANTIATE_SCORERS(float)
MKBE_INSTANTIATE_SCORERS(double)

#undef MKBE_INSTANTIATE_SCORERS

}  // namespace mkbe::model
