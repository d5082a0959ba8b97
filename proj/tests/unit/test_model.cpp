#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mkbe/ad/gradcheck.hpp"
#include "mkbe/ad/ops.hpp"
#include "mkbe/model/model.hpp"
#include "support/multimodal_kb.hpp"
#include "support/oracles.hpp"

using namespace mkbe;
using namespace mkbe::model;
using ad::Tensor;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

std::vector<std::uint32_t> all_ids(std::size_t n) {
  std::vector<std::uint32_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint32_t>(i);
  return v;
}

template <class Real>
void randomize(const Tensor<Real>& t, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  auto copy = t;
  for (auto& x : copy.mutable_data()) x = static_cast<Real>(u(rng));
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One GRU step from a zero state, by scalar loops.
std::vector<double> gru_step_from_zero(const std::vector<double>& x, const TD& wx, const TD& bx, const TD& bh,
                                       std::size_t hidden) {
  const std::size_t in = x.size();
  std::vector<double> gx(3 * hidden);
  for (std::size_t j = 0; j < 3 * hidden; ++j) {
    gx[j] = bx.at(j);
    for (std::size_t i = 0; i < in; ++i) gx[j] += x[i] * wx.at(i * 3 * hidden + j);
  }
  std::vector<double> h(hidden);
  for (std::size_t j = 0; j < hidden; ++j) {
    const double r = sigm(gx[j] + bh.at(j));
    const double z = sigm(gx[hidden + j] + bh.at(hidden + j));
    const double n = std::tanh(gx[2 * hidden + j] + r * bh.at(2 * hidden + j));
    h[j] = (1 - z) * n;
  }
  return h;
}

}  // namespace

TEST(ReshapeDims, LargestDivisorBelowRoot) {
  EXPECT_EQ(reshape_dims(200), (std::pair<std::size_t, std::size_t>{10, 20}));
  EXPECT_EQ(reshape_dims(64), (std::pair<std::size_t, std::size_t>{8, 8}));
  EXPECT_EQ(reshape_dims(8), (std::pair<std::size_t, std::size_t>{2, 4}));
  EXPECT_EQ(reshape_dims(4), (std::pair<std::size_t, std::size_t>{2, 2}));
  EXPECT_EQ(reshape_dims(7), (std::pair<std::size_t, std::size_t>{1, 7}));
}

TEST(EmbedEntity, InitRangeAndDeterminism) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<float> m(kb, {}, 3);
  for (float v : m.params().at("entity").data()) {
    EXPECT_GE(v, -0.1f);
    EXPECT_LE(v, 0.1f);
  }
  const std::vector<std::uint32_t> id{4};
  EXPECT_EQ(m.embed_entities(id).to_vector(), m.embed_entities(id).to_vector());
  const std::vector<std::uint32_t> bad{static_cast<std::uint32_t>(kb.num_entities())};
  EXPECT_THROW(m.embed_entities(bad), std::out_of_range);
}

TEST(EmbedEntity, LookupGradientIsOneHotRow) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  const std::vector<std::uint32_t> id{2};
  ad::Tape<double> tape;
  tape.backward(ad::sum(m.embed_entities(id)));
  const auto g = m.params().at("entity").grad();
  const std::size_t d = m.config().dim;
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], i / d == 2 ? 1.0 : 0.0);
}

TEST(XavierInit, DenseWeightsWithinBound) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<float> m(kb, {}, 3);
  const auto& w = m.params().at("cnn.proj.W");
  const double bound = std::sqrt(6.0 / static_cast<double>(w.dim(0) + w.dim(1)));
  for (float v : w.data()) EXPECT_LE(std::abs(v), bound);
  for (float v : m.params().at("cnn.proj.b").data()) EXPECT_EQ(v, 0.0f);
}

TEST(EncodeCategorical, ZeroWeightsGiveZero) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 1);
  auto w = m.params().at("categorical.W");
  for (auto& x : w.mutable_data()) x = 0;
  const std::vector<std::uint32_t> id{1};
  for (double v : m.encode_categorical(id).to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeCategorical, OneHotSelectsColumn) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 1);
  std::mt19937_64 rng(2);
  randomize(m.params().at("categorical.b"), rng);
  const std::vector<double> one_hot{0.0, 1.0};
  const auto j = one_hot_index(std::span<const double>(one_hot));
  const std::vector<std::uint32_t> id{static_cast<std::uint32_t>(j)};
  const auto got = m.encode_categorical(id).to_vector();
  const auto& w = m.params().at("categorical.W");
  const auto& b = m.params().at("categorical.b");
  const std::size_t d = m.config().dim;
  for (std::size_t k = 0; k < d; ++k) {
    const double x = w.at(j * d + k) + b.at(k);
    const double want = x > 0 ? ad::kSeluLambda * x : ad::kSeluLambda * ad::kSeluAlpha * (std::exp(x) - 1);
    EXPECT_NEAR(got[k], want, 1e-12);
  }
  const std::vector<double> none{0.0, 0.0}, two{1.0, 1.0};
  EXPECT_THROW(one_hot_index(std::span<const double>(none)), std::invalid_argument);
  EXPECT_THROW(one_hot_index(std::span<const double>(two)), std::invalid_argument);
}

TEST(EncodeCategorical, GradientCheck) {
  const auto kb = mkbe::testing::multimodal_kb();
  ModelConfig cfg;
  cfg.dim = 8;
  Model<double> m(kb, cfg, 4);
  std::mt19937_64 rng(5);
  randomize(m.params().at("categorical.b"), rng);
  const std::vector<std::uint32_t> ids{0, 1, 1};
  auto target = TD::from({3, 8}, mkbe::testing::random_vector(24, rng));
  const auto r = ad::check_gradients(
      [&] { return ad::sum(ad::mul(m.encode_categorical(ids), target)); },
      {m.params().at("categorical.W"), m.params().at("categorical.b")});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(EncodeNumeric, MeanMapsToBiasAndMapIsAffine) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 1);
  std::mt19937_64 rng(6);
  randomize(m.params().at("numeric.b"), rng);
  const auto r = kb.relations().id("bornIn");
  const auto& st = kb.numeric_stats(r);
  const std::size_t d = m.config().dim;
  const std::vector<double> z0{kb.standardize(r, st.mean)};
  const auto at_mean = m.encode_numeric(r, z0).to_vector();
  for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(at_mean[k], m.params().at("numeric.b").at(r * d + k), 1e-12);
  const std::vector<double> z12{kb.standardize(r, st.mean + st.std), kb.standardize(r, st.mean + 2 * st.std)};
  const auto e = m.encode_numeric(r, z12).to_vector();
  for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(e[d + k] - e[k], m.params().at("numeric.w").at(r * d + k), 1e-12);
}

TEST(EncodeNumeric, NeighbouringYearsAreCloserThanAnyEntityPair) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<float> m(kb, {}, 9);
  const auto r = kb.relations().id("bornIn");
  const std::vector<double> z{kb.standardize(r, 1977), kb.standardize(r, 1978)};
  const auto years = m.encode_numeric(r, z);
  const std::size_t d = m.config().dim;
  const auto yv = years.data();
  const double year_cos = cosine(yv.subspan(0, d), yv.subspan(d, d));
  const auto ent = m.params().at("entity").data();
  double best = -1;
  for (std::size_t a = 0; a < kb.num_entities(); ++a)
    for (std::size_t b = a + 1; b < kb.num_entities(); ++b)
      best = std::max(best, cosine(ent.subspan(a * d, d), ent.subspan(b * d, d)));
  EXPECT_GT(year_cos, best);
}

TEST(EncodeNumeric, MissingStatsRejected) {
  const auto kb = mkbe::testing::multimodal_kb();
  EXPECT_THROW(kb.numeric_stats(kb.relations().id("gender")), std::invalid_argument);
}

TEST(EncodeShortText, SingleCharEqualsOneStepEachWay) {
  const auto kb = mkbe::testing::multimodal_kb();
  ModelConfig cfg;
  cfg.dim = 8;
  cfg.char_dim = 6;
  Model<double> m(kb, cfg, 11);
  std::mt19937_64 rng(12);
  for (const auto& [name, t] : m.params().all())
    if (name.rfind("gru.", 0) == 0 && name.back() != 'x' && name.back() != 'h') randomize(t, rng);
  const std::size_t hidden = 4;
  const std::int64_t c = 'Q' - 31;
  const auto& P = m.params();
  std::vector<double> x(6);
  for (std::size_t i = 0; i < 6; ++i) x[i] = P.at("char.embed").at(static_cast<std::size_t>(c) * 6 + i);
  auto step = [&](const std::string& pre, const std::vector<double>& in) {
    return gru_step_from_zero(in, P.at(pre + "Wx"), P.at(pre + "bx"), P.at(pre + "bh"), hidden);
  };
  auto f0 = step("gru.l0.f.", x), b0 = step("gru.l0.b.", x);
  std::vector<double> in1 = f0;
  in1.insert(in1.end(), b0.begin(), b0.end());
  auto want = step("gru.l1.f.", in1);
  const auto b1 = step("gru.l1.b.", in1);
  want.insert(want.end(), b1.begin(), b1.end());
  const auto got = m.encode_short_text({{c}}).to_vector();
  ASSERT_EQ(got.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(EncodeShortText, DeterministicAndBatchIndependent) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<float> m(kb, {}, 2);
  const std::vector<std::int64_t> a{40, 41, 42}, b{50, 60, 70, 80, 1, 2};
  const auto one = m.encode_short_text({a}).to_vector();
  EXPECT_EQ(one, m.encode_short_text({a}).to_vector());
  const auto both = m.encode_short_text({b, a}).to_vector();
  const std::size_t d = m.config().dim;
  for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(both[d + k], one[k]);
  EXPECT_THROW(m.encode_short_text({{}}), std::invalid_argument);
}

TEST(EncodeShortText, TruncatesToMaxChars) {
  const auto kb = mkbe::testing::multimodal_kb();
  ModelConfig cfg;
  cfg.max_chars = 4;
  Model<float> m(kb, cfg, 2);
  EXPECT_EQ(m.encode_short_text({{1, 2, 3, 4, 5, 6}}).to_vector(), m.encode_short_text({{1, 2, 3, 4}}).to_vector());
}

TEST(EncodeShortText, GradientCheckFourChars) {
  const auto kb = mkbe::testing::multimodal_kb();
  ModelConfig cfg;
  cfg.dim = 6;
  cfg.char_dim = 4;
  Model<double> m(kb, cfg, 13);
  std::mt19937_64 rng(14);
  std::vector<TD> params;
  for (const auto& [name, t] : m.params().all()) {
    if (name.rfind("gru.", 0) == 0 || name == "char.embed") {
      randomize(t, rng, 0.8);
      params.push_back(t);
    }
  }
  auto target = TD::from({2, 6}, mkbe::testing::random_vector(12, rng));
  const auto r = ad::check_gradients(
      [&] { return ad::sum(ad::mul(m.encode_short_text({{5, 9, 33, 7}, {12, 3}}), target)); }, params);
  EXPECT_LT(r.max_rel_error, 1e-4) << "param " << r.worst_param << " index " << r.worst_index;
}

TEST(EncodeLongText, ShortSequenceIsLeftPaddedToWidestFilter) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  auto embed = m.params().at("word.embed");
  const std::size_t dw = m.config().word_dim;
  for (std::size_t k = 0; k < dw; ++k) embed.mutable_data()[k] = 0.0;  // UNK row
  const auto padded = m.encode_long_text({{0, 0, 0, 2, 3}}).to_vector();
  const auto shorter = m.encode_long_text({{2, 3}}).to_vector();
  for (std::size_t k = 0; k < padded.size(); ++k) EXPECT_NEAR(padded[k], shorter[k], 1e-12);
}

TEST(EncodeLongText, WindowPermutationCanChangeOutput) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  EXPECT_NE(m.encode_long_text({{1, 2, 3, 1, 2}}).to_vector(), m.encode_long_text({{2, 1, 3, 1, 2}}).to_vector());
}

TEST(EncodeLongText, MaxPoolIsIdempotentUnderDuplication) {
  std::mt19937_64 rng(4);
  auto x = TD::from({7, 5}, mkbe::testing::random_vector(35, rng));
  EXPECT_EQ(ad::max_over_rows(ad::concat_rows(x, x)).to_vector(), ad::max_over_rows(x).to_vector());
  auto xt = ad::transpose(x);
  EXPECT_EQ(ad::max_over_cols(ad::concat_cols(xt, xt)).to_vector(), ad::max_over_cols(xt).to_vector());
}

TEST(EncodeLongText, BatchedEqualsIndividual) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  const std::vector<std::vector<std::int64_t>> seqs{{1, 2}, {3, 1, 2, 3, 1, 2, 1}, {2, 2, 2}, {1, 1, 1, 1, 1, 1, 1}};
  const auto batched = m.encode_long_text(seqs).to_vector();
  const std::size_t d = m.config().dim;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto one = m.encode_long_text({seqs[i]}).to_vector();
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(batched[i * d + k], one[k], 1e-12);
  }
}

TEST(EncodeLongText, GradientCheckSixTokens) {
  const auto kb = mkbe::testing::multimodal_kb();
  ModelConfig cfg;
  cfg.dim = 6;
  cfg.word_dim = 4;
  cfg.cnn_filters = 3;
  Model<double> m(kb, cfg, 21);
  std::mt19937_64 rng(22);
  std::vector<TD> params;
  for (const auto& [name, t] : m.params().all()) {
    if (name.rfind("cnn.", 0) == 0 || name == "word.embed") {
      randomize(t, rng, 0.8);
      params.push_back(t);
    }
  }
  auto target = TD::from({1, 6}, mkbe::testing::random_vector(6, rng));
  const auto r = ad::check_gradients(
      [&] { return ad::sum(ad::mul(m.encode_long_text({{1, 2, 3, 2, 1, 3}}), target)); }, params, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4) << "param " << r.worst_param << " index " << r.worst_index;
}

TEST(CountSketchEncoder, EstimatesInnerProductsUnbiased) {
  std::mt19937_64 rng(31);
  const std::size_t n = 32, D = 64, draws = 2000;
  const auto x = mkbe::testing::random_vector(n, rng);
  auto y = x;
  for (auto& v : y) v += 0.3 * std::uniform_real_distribution<double>(-1, 1)(rng);
  double truth = 0;
  for (std::size_t i = 0; i < n; ++i) truth += x[i] * y[i];
  auto xt = TD::from({n}, x), yt = TD::from({n}, y);
  double acc = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    const auto t = SketchTables::draw(n, D, rng);
    auto cx = ad::count_sketch(xt, std::span<const std::uint32_t>(t.hash_a), std::span<const std::int8_t>(t.sign_a), D);
    auto cy = ad::count_sketch(yt, std::span<const std::uint32_t>(t.hash_a), std::span<const std::int8_t>(t.sign_a), D);
    acc += ad::sum(ad::mul(cx, cy)).item();
  }
  EXPECT_LT(std::abs(acc / draws - truth) / std::abs(truth), 0.05);
}

TEST(ImageEncoder, ZeroFeatureGivesBias) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  std::mt19937_64 rng(1);
  randomize(m.params().at("image.proj.b"), rng);
  const auto out = m.encode_image(TD::zeros({1, 16})).to_vector();
  const auto b = m.params().at("image.proj.b").to_vector();
  for (std::size_t k = 0; k < out.size(); ++k) EXPECT_EQ(out[k], b[k]);
}

TEST(ImageEncoder, PoolingIsQuadraticThenScaleInvariant) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  std::mt19937_64 rng(2);
  const auto v = mkbe::testing::random_vector(16, rng);
  std::vector<double> v3(v);
  for (auto& x : v3) x *= 3.0;
  const auto& s = m.sketch();
  auto raw = [&](const std::vector<double>& f) {
    auto t = TD::from({1, 16}, f);
    auto a = ad::count_sketch(t, std::span<const std::uint32_t>(s.hash_a), std::span<const std::int8_t>(s.sign_a), s.out_dim);
    auto b = ad::count_sketch(t, std::span<const std::uint32_t>(s.hash_b), std::span<const std::int8_t>(s.sign_b), s.out_dim);
    return ad::circular_convolution(a, b).to_vector();
  };
  const auto p1 = raw(v), p3 = raw(v3);
  for (std::size_t k = 0; k < p1.size(); ++k) EXPECT_NEAR(p3[k], 9.0 * p1[k], 1e-9 * (1 + std::abs(p3[k])));
  const auto n1 = m.pool_image(TD::from({1, 16}, v)).to_vector();
  const auto n3 = m.pool_image(TD::from({1, 16}, v3)).to_vector();
  // Exact zeros of the convolution come back from the FFT as roundoff, which signed sqrt lifts to ~1e-9.
  for (std::size_t k = 0; k < n1.size(); ++k) EXPECT_NEAR(n1[k], n3[k], 1e-7);
}

TEST(ImageEncoder, WrongFeatureDimRejected) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<double> m(kb, {}, 3);
  EXPECT_THROW(m.encode_image(TD::zeros({1, 15})), std::invalid_argument);
}

TEST(EncoderBank, EveryRelationEncodesToDim) {
  const auto kb = mkbe::testing::multimodal_kb();
  for (auto scorer : {ScorerKind::distmult, ScorerKind::conve}) {
    ModelConfig cfg;
    cfg.scorer = scorer;
    cfg.dim = 16;
    Model<float> m(kb, cfg, 5);
    for (std::uint32_t r = 0; r < kb.num_relations(); ++r) {
      const auto values = kb.train_values(r);
      const auto enc = m.encode_objects(kb, r, values);
      EXPECT_EQ(enc.shape(), (ad::Shape{values.size(), 16})) << kb.relations().name(r);
    }
    const std::vector<std::uint32_t> s{0, 1}, r{0, 0};
    EXPECT_EQ(m.query(s, r, Mode::eval()).shape(), (ad::Shape{2, 16}));
  }
}

TEST(EncoderBank, PrecisionCastCopiesValues) {
  const auto kb = mkbe::testing::multimodal_kb();
  Model<float> m(kb, {}, 5);
  const auto d = m.cast<double>();
  for (const auto& [name, t] : m.params().all()) {
    const auto a = t.data();
    const auto b = d.params().at(name).data();
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(static_cast<double>(a[i]), b[i]);
  }
}

TEST(DistMult, IdentityRelationIsDotProduct) {
  auto es = TD::from({3}, {1, 2, 3}), eo = TD::from({3}, {4, -1, 2});
  EXPECT_DOUBLE_EQ(score_distmult(es, TD::full({3}, 1.0), eo).item(), 8.0);
}

TEST(DistMult, HandArithmetic) {
  EXPECT_DOUBLE_EQ(score_distmult(TD::from({2}, {1, 2}), TD::from({2}, {1, 0.5}), TD::from({2}, {2, 1})).item(), 3.0);
}

TEST(DistMult, ZeroArgumentAndSymmetry) {
  std::mt19937_64 rng(8);
  auto a = TD::from({6}, mkbe::testing::random_vector(6, rng));
  auto r = TD::from({6}, mkbe::testing::random_vector(6, rng));
  auto b = TD::from({6}, mkbe::testing::random_vector(6, rng));
  EXPECT_EQ(score_distmult(a, TD::zeros({6}), b).item(), 0.0);
  EXPECT_EQ(score_distmult(a, r, b).item(), score_distmult(b, r, a).item());
  EXPECT_THROW(score_distmult(a, r, TD::zeros({5})), std::invalid_argument);
}

TEST(ConvE, ZeroNetworkScoresZero) {
  std::mt19937_64 rng(3);
  ConvEParams<double> p{2, 2, TD::zeros({1, 1, 2, 2}), TD::zeros({1}), TD::zeros({3, 4}), TD::zeros({4})};
  auto v = [&] { return TD::from({4}, mkbe::testing::random_vector(4, rng)); };
  EXPECT_EQ(score_conve(v(), v(), v(), p).item(), 0.0);
}

TEST(ConvE, HandSizedInstanceMatchesStepwiseOracle) {
  const std::vector<double> es{0.5, -1.0, 2.0, 0.25}, rv{1.5, 0.5, -0.5, 1.0}, eo{1.0, -2.0, 0.5, 3.0};
  const std::vector<double> k{0.3, -0.2, 0.7, 0.1}, proj{0.2, -0.4, 0.6, 0.1, -0.3, 0.5, 0.2, 0.9, 0.4, -0.1, 0.3, -0.7};
  const double conv_b = 0.05;
  const std::vector<double> proj_b{0.1, -0.2, 0.0, 0.3};
  // Stacked 4x2 image: rows (es0 es1) (es2 es3) (r0 r1) (r2 r3).
  const double img[4][2] = {{es[0], es[1]}, {es[2], es[3]}, {rv[0], rv[1]}, {rv[2], rv[3]}};
  double feat[3];
  for (int i = 0; i < 3; ++i) {
    const double c = img[i][0] * k[0] + img[i][1] * k[1] + img[i + 1][0] * k[2] + img[i + 1][1] * k[3] + conv_b;
    feat[i] = std::max(c, 0.0);
  }
  double want = 0;
  for (int j = 0; j < 4; ++j) {
    double h = proj_b[j];
    for (int i = 0; i < 3; ++i) h += feat[i] * proj[i * 4 + j];
    want += std::max(h, 0.0) * eo[j];
  }
  ConvEParams<double> p{2, 2, TD::from({1, 1, 2, 2}, k), TD::from({1}, {conv_b}), TD::from({3, 4}, proj),
                        TD::from({4}, proj_b)};
  const double got = score_conve(TD::from({4}, es), TD::from({4}, rv), TD::from({4}, eo), p).item();
  EXPECT_NEAR(got, want, 1e-6);
  EXPECT_NE(want, 0.0);
}

TEST(ConvE, EvalModeIsDeterministicAndBatchIndependent) {
  const auto kb = mkbe::testing::multimodal_kb();
  ModelConfig cfg;
  cfg.scorer = ScorerKind::conve;
  cfg.dim = 16;
  Model<float> m(kb, cfg, 6);
  const std::vector<std::uint32_t> s{3, 1, 7}, r{0, 0, 0}, s1{3}, r1{0};
  const auto a = m.query(s, r, Mode::eval()).to_vector();
  EXPECT_EQ(a, m.query(s, r, Mode::eval()).to_vector());
  const auto one = m.query(s1, r1, Mode::eval()).to_vector();
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(a[k], one[k]);
  std::mt19937_64 rng(1);
  Mode train{true, &rng};
  EXPECT_NE(m.query(s, r, train).to_vector(), a);
}

TEST(OneToN, MatchesPointwiseForEveryModality) {
  const auto kb = mkbe::testing::multimodal_kb(20);
  for (auto scorer : {ScorerKind::distmult, ScorerKind::conve}) {
    ModelConfig cfg;
    cfg.scorer = scorer;
    cfg.dim = 16;
    Model<float> m(kb, cfg, 8);
    const std::vector<std::uint32_t> s{5};
    for (std::uint32_t r = 0; r < kb.num_relations(); ++r) {
      const std::vector<std::uint32_t> rr{r};
      auto q = m.query(s, rr, Mode::eval());
      const auto cand = kb.modality(r) == kg::Modality::entity ? all_ids(kb.num_entities())
                                                                : std::vector<std::uint32_t>(kb.train_values(r).begin(),
                                                                                             kb.train_values(r).end());
      const auto batched = Model<float>::score(q, m.encode_objects(kb, r, cand)).to_vector();
      ASSERT_EQ(batched.size(), cand.size());
      for (std::size_t i = 0; i < cand.size(); ++i) {
        const std::vector<std::uint32_t> one{cand[i]};
        const auto single = Model<float>::score(q, m.encode_objects(kb, r, one)).item();
        EXPECT_NEAR(batched[i], single, 1e-5) << kb.relations().name(r);
      }
    }
  }
}

TEST(OneToN, EntityScoresMatchDistMultPointwise) {
  const auto kb = mkbe::testing::multimodal_kb(20);
  Model<double> m(kb, {}, 8);
  const std::vector<std::uint32_t> s{2}, r{0};
  const auto scores = Model<double>::score(m.query(s, r, Mode::eval()), m.embed_entities(all_ids(20))).to_vector();
  ASSERT_EQ(scores.size(), kb.num_entities());
  const std::size_t d = m.config().dim;
  auto row = [&](const char* table, std::size_t i) {
    const auto v = m.params().at(table).data().subspan(i * d, d);
    return TD::from({d}, std::vector<double>(v.begin(), v.end()));
  };
  for (std::size_t o = 0; o < 20; ++o)
    EXPECT_NEAR(scores[o], score_distmult(row("entity", 2), row("relation", 0), row("entity", o)).item(), 1e-6);
}

TEST(ScoringGraph, DistMultGradientCheck) {
  const auto kb = mkbe::testing::multimodal_kb(10);
  ModelConfig cfg;
  cfg.dim = 8;
  Model<double> m(kb, cfg, 10);
  const std::vector<std::uint32_t> s{1, 4}, r{0, 0};
  std::vector<double> labels(2 * kb.num_entities(), 0.0);
  labels[2] = labels[10 + 5] = 1.0;
  const auto res = ad::check_gradients(
      [&] {
        auto sc = Model<double>::score(m.query(s, r, Mode::eval()), m.embed_entities(all_ids(kb.num_entities())));
        return ad::bce_with_logits(sc, std::span<const double>(labels));
      },
      {m.params().at("entity"), m.params().at("relation")});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(ScoringGraph, ConvEGradientCheck) {
  const auto kb = mkbe::testing::multimodal_kb(10);
  ModelConfig cfg;
  cfg.scorer = ScorerKind::conve;
  cfg.dim = 16;
  cfg.conv_filters = 4;
  Model<double> m(kb, cfg, 10);
  std::mt19937_64 rng(3);
  randomize(m.params().at("conve.conv_bias"), rng, 0.1);
  randomize(m.params().at("conve.proj.b"), rng, 0.1);
  const std::vector<std::uint32_t> s{1, 4}, r{0, 0};
  std::vector<double> labels(2 * kb.num_entities(), 0.0);
  labels[2] = labels[10 + 5] = 1.0;
  std::vector<TD> params;
  for (const auto& [name, t] : m.params().all())
    if (name == "entity" || name == "relation" || name.rfind("conve.", 0) == 0) params.push_back(t);
  const auto res = ad::check_gradients(
      [&] {
        auto sc = Model<double>::score(m.query(s, r, Mode::eval()), m.embed_entities(all_ids(kb.num_entities())));
        return ad::bce_with_logits(sc, std::span<const double>(labels));
      },
      params, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-4) << "param " << res.worst_param << " index " << res.worst_index;
}
