#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "mkbe/errors.hpp"
#include "mkbe/io/container.hpp"
#include "mkbe/kg/kb.hpp"
#include "mkbe/kg/targets.hpp"
#include "mkbe/kg/text.hpp"
#include "support/random_kb.hpp"
#include "support/temp_dir.hpp"

using namespace mkbe;
using namespace mkbe::kg;
using mkbe::testing::TempDir;

namespace {

ModalitySchema yago_schema() {
  return ModalitySchema::parse(
      "playsFor\tentity\n"
      "isAffiliatedTo\tentity\t\tS\n"
      "wasBornOnDate\tnumeric\tyear\n"
      "hasGender\tcategorical\n"
      "hasName\tshort_text\n"
      "hasDescription\tlong_text\n"
      "hasImage\timage\n");
}

}  // namespace

TEST(Schema, ParsesFlagsAndGroups) {
  const auto s = ModalitySchema::parse("rated_5\tentity\trating=5\tR\nage\tnumeric\tyear,\nocc\tcategorical\t\tU\n");
  EXPECT_EQ(s.at("rated_5").rating, 5);
  EXPECT_EQ(s.at("rated_5").group, "R");
  EXPECT_TRUE(s.at("age").year);
  EXPECT_EQ(s.at("age").group, "N");
  EXPECT_EQ(s.at("occ").group, "U");
  EXPECT_EQ(ModalitySchema::parse(s.to_tsv()).to_tsv(), s.to_tsv());
}

TEST(Schema, RejectsBadLines) {
  EXPECT_THROW(ModalitySchema::parse("a\n"), InputError);
  EXPECT_THROW(ModalitySchema::parse("a\tpicture\n"), InputError);
  EXPECT_THROW(ModalitySchema::parse("a\tentity\tyear\n"), InputError);
  EXPECT_THROW(ModalitySchema::parse("a\tentity\na\tnumeric\n"), InputError);
  EXPECT_THROW(ModalitySchema::parse("a\timage\nb\timage\n"), InputError);
  try {
    ModalitySchema::parse("a\tentity\nb\tentity\tbogus\n", "s.tsv");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("s.tsv:2"), std::string::npos);
  }
}

TEST(LoadTriples, SingleEntityTriple) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  const auto c = kb.load_triples(dir.write("t.tsv", "CarlesPuyol\tplaysFor\tBarcelona\n"), Split::train);
  EXPECT_EQ(c.added, 1u);
  ASSERT_EQ(kb.triples(Split::train).size(), 1u);
  const auto t = kb.triples(Split::train)[0];
  EXPECT_EQ(kb.entities().name(t.s), "CarlesPuyol");
  EXPECT_EQ(kb.relations().name(t.r), "playsFor");
  EXPECT_EQ(kb.modality(t.r), Modality::entity);
  EXPECT_EQ(kb.entities().name(t.o), "Barcelona");
}

TEST(LoadTriples, EmptyFileIsAnError) {
  TempDir dir;
  MultimodalKB kb;
  EXPECT_THROW(kb.load_triples(dir.write("t.tsv", ""), Split::train), InputError);
}

TEST(LoadTriples, MalformedLineNamesTheLine) {
  TempDir dir;
  MultimodalKB kb;
  const auto path = dir.write("t.tsv", "a\tr\tb\nc\td\n");
  try {
    kb.load_triples(path, Split::train);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(path + ":2"), std::string::npos) << e.what();
  }
}

TEST(LoadTriples, MissingFileIsInputError) {
  MultimodalKB kb;
  EXPECT_THROW(kb.load_triples("/nonexistent/t.tsv", Split::train), InputError);
}

TEST(LoadTriples, HeldOutSplitsRejectUnknownRelationsAndSkipUnknownEntities) {
  TempDir dir;
  MultimodalKB kb;
  kb.load_triples(dir.write("train.tsv", "a\tr\tb\nb\tr\tc\n"), Split::train);
  EXPECT_THROW(kb.load_triples(dir.write("bad.tsv", "a\tq\tb\n"), Split::valid), InputError);
  const auto c = kb.load_triples(dir.write("test.tsv", "a\tr\tc\nz\tr\ta\na\tr\tb\n"), Split::test);
  EXPECT_EQ(c.rows, 3u);
  EXPECT_EQ(c.added, 1u);
  EXPECT_EQ(c.unknown_entity, 1u);
  EXPECT_EQ(c.duplicates, 1u);
  EXPECT_EQ(kb.num_entities(), 3u);
}

TEST(LoadTriples, TrainAddsUnseenRelationsAsEntityLinks) {
  MultimodalKB kb;
  kb.add_link("a", "likes", "b");
  ASSERT_NE(kb.schema().find("likes"), nullptr);
  EXPECT_EQ(kb.schema().at("likes").modality, Modality::entity);
}

TEST(LoadTriples, DuplicatesAreCountedAndSplitsStayDisjoint) {
  MultimodalKB kb;
  EXPECT_TRUE(kb.add_link("a", "r", "b"));
  EXPECT_FALSE(kb.add_link("a", "r", "b"));
  EXPECT_FALSE(kb.add_link("a", "r", "b", Split::test));
  kb.finalize();
  EXPECT_EQ(kb.triples(Split::train).size(), 1u);
  EXPECT_TRUE(kb.triples(Split::test).empty());
}

TEST(Attributes, NumericRowKeepsRawValue) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  kb.add_link("CarlesPuyol", "playsFor", "Barcelona");
  AttributeFiles f;
  f.numeric = dir.write("num.tsv", "CarlesPuyol\twasBornOnDate\t1978\n");
  kb.attach_attributes(f);
  ASSERT_EQ(kb.triples(Split::train).size(), 2u);
  const auto t = kb.triples(Split::train)[1];
  EXPECT_EQ(kb.modality(t.r), Modality::numeric);
  EXPECT_EQ(kb.numeric_value(t.o), 1978.0);
}

TEST(Attributes, YearFilterDropsOldValues) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  AttributeFiles f;
  f.numeric = dir.write("num.tsv", "a\twasBornOnDate\t900\nb\twasBornOnDate\t1950\nzz\twasBornOnDate\t1950\n");
  f.year_filter = true;
  const auto counts = kb.attach_attributes(f);
  ASSERT_EQ(counts.size(), 1u);
  EXPECT_EQ(counts[0].year_filtered, 1u);
  EXPECT_EQ(counts[0].unknown_entity, 1u);
  EXPECT_EQ(counts[0].added, 1u);
}

TEST(Attributes, WrongModalityFileIsRejected) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  AttributeFiles f;
  f.categorical = dir.write("cat.tsv", "a\twasBornOnDate\tx\n");
  EXPECT_THROW(kb.attach_attributes(f), InputError);
}

TEST(Attributes, EmptyFeatureFileGivesEmptyImageStore) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  AttributeFiles f;
  f.image_features = dir.file("feat.bin");
  write_features(f.image_features, FeatureMatrix{0, 4096, {}});
  f.image_map = dir.write("feat.tsv", "");
  EXPECT_NO_THROW(kb.attach_attributes(f));
  EXPECT_EQ(kb.image_features().rows, 0u);
  EXPECT_EQ(kb.store_size(Modality::image), 0u);
}

TEST(Attributes, FeatureDimMismatchIsAnError) {
  TempDir dir;
  auto bytes = encode_features(FeatureMatrix{2, 3, {1, 2, 3, 4, 5, 6}});
  bytes.resize(bytes.size() - 4);
  const auto path = dir.write("feat.bin", bytes);
  EXPECT_THROW(read_features(path), InputError);
}

TEST(Attributes, IngestionReconciles) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  kb.add_link("c", "playsFor", "b");
  AttributeFiles f;
  f.numeric = dir.write("n.tsv", "a\twasBornOnDate\t1980\nc\twasBornOnDate\t1990\nx\twasBornOnDate\t1\n");
  f.categorical = dir.write("c.tsv", "a\thasGender\tmale\na\thasGender\tmale\nc\thasGender\tfemale\n");
  f.text = dir.write("t.tsv", "a\thasName\tCarles Puyol\nb\thasDescription\tfootball club in spain\n");
  f.image_features = dir.file("f.bin");
  write_features(f.image_features, FeatureMatrix{2, 2, {1, 0, 0, 1}});
  f.image_map = dir.write("f.tsv", "a\t0\nb\t1\nq\t1\n");
  const auto counts = kb.attach_attributes(f);
  std::size_t rows = 0, accounted = 0;
  for (const auto& c : counts) {
    rows += c.rows;
    accounted += c.added + c.unknown_entity + c.year_filtered + c.duplicates;
    EXPECT_EQ(c.rows, c.added + c.unknown_entity + c.year_filtered + c.duplicates) << c.source;
  }
  EXPECT_EQ(rows, accounted);
  kb.finalize();
  const auto stats = kb_stats(kb);
  EXPECT_EQ(stats["attribute_triples"].get<std::size_t>(), 2u + 2u + 2u + 2u);
  EXPECT_EQ(stats["link_triples"].get<std::size_t>(), 2u);
}

TEST(Attributes, TextIsTokenizedByModality) {
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  kb.add_link("c", "playsFor", "b");
  kb.add_text("a", "hasName", "Ab");
  kb.add_text("a", "hasDescription", "The club the CLUB");
  kb.add_text("c", "hasDescription", "a club");
  kb.finalize();
  const auto& chars = kb.text_tokens(0);
  EXPECT_EQ(chars, (std::vector<std::int64_t>{'A' - 31, 'b' - 31}));
  // "the" and "club" occur at least twice; "a" once.
  EXPECT_EQ(kb.word_vocab().size(), 3u);
  const auto& words = kb.text_tokens(2);
  EXPECT_EQ(words, (std::vector<std::int64_t>{0, *kb.word_vocab().find("club")}));
}

TEST(Text, CharAndWordIds) {
  EXPECT_EQ(char_ids(" ~\x01"), (std::vector<std::int64_t>{1, 95, 0}));
  const auto v = build_word_vocab({"x y", "X z", "y"});
  EXPECT_EQ(v.name(0), kUnkWord);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(word_ids(v, "Y q x"), (std::vector<std::int64_t>{*v.find("y"), 0, *v.find("x")}));
}

TEST(Standardize, SymmetricCase) {
  MultimodalKB kb(yago_schema());
  for (auto e : {"a", "b", "c"}) kb.add_link(e, "playsFor", "club");
  kb.add_numeric("a", "wasBornOnDate", 1990);
  kb.add_numeric("b", "wasBornOnDate", 2000);
  kb.add_numeric("c", "wasBornOnDate", 2010);
  kb.finalize();
  const auto r = kb.relations().id("wasBornOnDate");
  EXPECT_DOUBLE_EQ(kb.numeric_stats(r).mean, 2000.0);
  EXPECT_NEAR(kb.numeric_stats(r).std, 8.1650, 1e-4);
  EXPECT_DOUBLE_EQ(kb.standardize(r, 2000.0), 0.0);
}

TEST(Standardize, SingleValueIsAnError) {
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  kb.add_numeric("a", "wasBornOnDate", 1990);
  EXPECT_THROW(kb.finalize(), InputError);
}

TEST(Standardize, ZeroVarianceNamesRelation) {
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  kb.add_numeric("a", "wasBornOnDate", 1990);
  kb.add_numeric("b", "wasBornOnDate", 1990);
  try {
    kb.finalize();
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("wasBornOnDate"), std::string::npos);
  }
}

TEST(Standardize, TransformedTrainValuesHaveUnitMoments) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> year(1950.0, 40.0);
  MultimodalKB kb(yago_schema());
  for (int i = 0; i < 300; ++i) kb.add_link("p" + std::to_string(i), "playsFor", "club");
  for (int i = 0; i < 300; ++i)
    kb.add_numeric("p" + std::to_string(i), "wasBornOnDate", std::round(year(rng)), i % 5 ? Split::train : Split::test);
  kb.finalize();
  const auto r = kb.relations().id("wasBornOnDate");
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& t : kb.triples(Split::train)) {
    if (t.r != r) continue;
    const double z = kb.numeric_z(t.o);
    sum += z;
    sq += z * z;
    ++n;
  }
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 1e-9);
  EXPECT_NEAR(std::sqrt(sq / n - mean * mean), 1.0, 1e-9);
}

TEST(Standardize, UsesTrainValuesOnly) {
  MultimodalKB kb(yago_schema());
  for (auto e : {"a", "b", "c"}) kb.add_link(e, "playsFor", "club");
  kb.add_numeric("a", "wasBornOnDate", 10);
  kb.add_numeric("b", "wasBornOnDate", 20);
  kb.add_numeric("c", "wasBornOnDate", 1000, Split::test);
  kb.finalize();
  const auto r = kb.relations().id("wasBornOnDate");
  EXPECT_DOUBLE_EQ(kb.numeric_stats(r).mean, 15.0);
  EXPECT_DOUBLE_EQ(kb.numeric_stats(r).std, 5.0);
}

TEST(Targets, EntityLabelsReadOffTrain) {
  MultimodalKB kb;
  kb.add_link("a", "r", "b");
  kb.add_link("a", "r", "c");
  kb.finalize();
  const auto lv = one_to_n_targets(kb, kb.entities().id("a"), kb.relations().id("r"), 256);
  EXPECT_EQ(lv.candidates, (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_EQ(lv.labels, (std::vector<float>{0, 1, 1}));
}

TEST(Targets, TextRelationIsOneHotOverObservedDescriptions) {
  MultimodalKB kb(yago_schema());
  for (int i = 0; i < 5; ++i) kb.add_link("p" + std::to_string(i), "playsFor", "club");
  for (int i = 0; i < 5; ++i) kb.add_text("p" + std::to_string(i), "hasName", "name " + std::to_string(i));
  kb.finalize();
  const auto r = kb.relations().id("hasName");
  const auto lv = one_to_n_targets(kb, kb.entities().id("p3"), r, 256);
  EXPECT_EQ(lv.candidates.size(), 5u);
  EXPECT_EQ(lv.positives(), 1u);
  const auto hot = std::find(lv.labels.begin(), lv.labels.end(), 1.0f) - lv.labels.begin();
  EXPECT_EQ(kb.text(lv.candidates[static_cast<std::size_t>(hot)]), "name 3");
}

TEST(Targets, SubsamplingRetainsPositive) {
  MultimodalKB kb(yago_schema());
  for (int i = 0; i < 10; ++i) kb.add_link("p" + std::to_string(i), "playsFor", "club");
  for (int i = 0; i < 10; ++i) kb.add_categorical("p" + std::to_string(i), "hasGender", "g" + std::to_string(i));
  kb.finalize();
  const auto r = kb.relations().id("hasGender");
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto lv = one_to_n_targets(kb, kb.entities().id("p" + std::to_string(i)), r, 2, &rng);
    ASSERT_EQ(lv.candidates.size(), 2u);
    ASSERT_EQ(lv.positives(), 1u);
  }
  EXPECT_THROW(one_to_n_targets(kb, 0, r, 2, nullptr), std::invalid_argument);
}

TEST(Targets, PositivesAreCandidatesOfOneModality) {
  std::mt19937_64 rng(77);
  MultimodalKB kb(yago_schema());
  for (int i = 0; i < 40; ++i) kb.add_link("p" + std::to_string(i), "playsFor", "c" + std::to_string(i % 7));
  std::uniform_int_distribution<int> g(0, 5), p(0, 39);
  for (int i = 0; i < 120; ++i)
    kb.add_categorical("p" + std::to_string(p(rng)), "hasGender", "g" + std::to_string(g(rng)));
  kb.finalize();
  for (const auto& [s, r] : kb.train_queries()) {
    const auto lv = one_to_n_targets(kb, s, r, 3, &rng);
    const auto pos = kb.objects(Split::train, s, r);
    for (auto o : pos) ASSERT_TRUE(std::binary_search(lv.candidates.begin(), lv.candidates.end(), o));
    ASSERT_EQ(lv.positives(), pos.size());
    for (auto c : lv.candidates) ASSERT_LT(c, kb.store_size(kb.modality(r)));
    if (kb.modality(r) != Modality::entity)
      for (auto c : lv.candidates) ASSERT_EQ(kb.categorical_relation(c), r);
  }
}

TEST(Filter, NothingToFilter) {
  MultimodalKB kb;
  kb.add_link("a", "r", "b");
  kb.add_link("c", "r", "d");
  kb.finalize();
  const auto m = filtered_candidates(kb, kb.entities().id("a"), 0, kb.entities().id("b"));
  EXPECT_EQ(m, (std::vector<std::uint8_t>(4, 1)));
}

TEST(Filter, OtherTrueTriplesAreMasked) {
  MultimodalKB kb;
  kb.add_link("s", "r", "b");
  kb.add_link("x", "r", "c");
  kb.add_link("s", "r", "c", Split::test);
  kb.finalize();
  const auto m = filtered_candidates(kb, kb.entities().id("s"), 0, kb.entities().id("c"));
  EXPECT_EQ(m[kb.entities().id("b")], 0);
  EXPECT_EQ(m[kb.entities().id("c")], 1);
  EXPECT_EQ(m[kb.entities().id("s")], 1);
}

TEST(Filter, MatchesSetScanOnRandomKb) {
  const auto kb = mkbe::testing::random_link_kb(20, 3, 400, 5);
  std::set<std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>> all;
  for (auto split : kSplits)
    for (const auto& t : kb.triples(split)) all.emplace(t.s, t.r, t.o);
  std::size_t checked = 0;
  for (const auto& t : kb.triples(Split::test)) {
    const auto mask = filtered_candidates(kb, t.s, t.r, t.o);
    for (std::uint32_t o = 0; o < kb.num_entities(); ++o) {
      const bool keep = o == t.o || !all.count({t.s, t.r, o});
      ASSERT_EQ(mask[o], keep ? 1 : 0);
    }
    ++checked;
  }
  EXPECT_GT(checked, 30u);
}

TEST(HoldOut, SeededAndFromAttributesOnly) {
  auto build = [](std::uint64_t seed) {
    MultimodalKB kb(yago_schema());
    for (int i = 0; i < 50; ++i) kb.add_link("p" + std::to_string(i), "playsFor", "club");
    for (int i = 0; i < 50; ++i) kb.add_numeric("p" + std::to_string(i), "wasBornOnDate", 1900 + i);
    const auto moved = kb.hold_out_attributes(0.1, seed);
    kb.finalize();
    EXPECT_EQ(moved, 5u);
    return kb;
  };
  const auto a = build(3), b = build(3), c = build(4);
  EXPECT_EQ(a.triples(Split::test), b.triples(Split::test));
  EXPECT_NE(a.triples(Split::test), c.triples(Split::test));
  for (const auto& t : a.triples(Split::test)) EXPECT_EQ(a.modality(t.r), Modality::numeric);
}

TEST(Serialization, RoundTripPreservesIdsAndBytes) {
  TempDir dir;
  MultimodalKB kb(yago_schema());
  kb.add_link("a", "playsFor", "b");
  kb.add_link("c", "isAffiliatedTo", "b");
  kb.add_link("a", "isAffiliatedTo", "c", Split::valid);
  kb.add_numeric("a", "wasBornOnDate", 1978.5);
  kb.add_numeric("c", "wasBornOnDate", 1980);
  kb.add_categorical("a", "hasGender", "male");
  kb.add_text("b", "hasDescription", "a club in Barcelona");
  kb.set_image_features(FeatureMatrix{1, 3, {0.5f, -1.0f, 2.0f}});
  kb.add_image("b", 0);
  kb.finalize();
  kb.save(dir.file("kb.bin"));
  const auto back = MultimodalKB::load(dir.file("kb.bin"));
  EXPECT_EQ(back.entities().names(), kb.entities().names());
  EXPECT_EQ(back.relations().names(), kb.relations().names());
  for (auto split : kSplits) EXPECT_EQ(back.triples(split), kb.triples(split));
  EXPECT_EQ(back.numeric_z(0), kb.numeric_z(0));
  EXPECT_EQ(back.image_features().values, kb.image_features().values);
  EXPECT_EQ(io::encode(back.to_container()), io::encode(kb.to_container()));
}

TEST(Serialization, CorruptionIsStateError) {
  TempDir dir;
  MultimodalKB kb;
  kb.add_link("a", "r", "b");
  kb.finalize();
  auto bytes = io::encode(kb.to_container());
  bytes[bytes.size() / 2] ^= 0x5a;
  dir.write("kb.bin", bytes);
  EXPECT_THROW(MultimodalKB::load(dir.file("kb.bin")), StateError);
  dir.write("short.bin", bytes.substr(0, 10));
  EXPECT_THROW(MultimodalKB::load(dir.file("short.bin")), StateError);
  EXPECT_THROW(MultimodalKB::load(dir.file("absent.bin")), StateError);
}

TEST(Features, RoundTripAndHeaderArithmetic) {
  TempDir dir;
  const FeatureMatrix m{3, 4, std::vector<float>(12, 0.25f)};
  write_features(dir.file("f.bin"), m);
  EXPECT_EQ(std::filesystem::file_size(dir.file("f.bin")), kFeatureHeaderBytes + 3 * 4 * 4);
  const auto back = read_features(dir.file("f.bin"));
  EXPECT_EQ(back.rows, 3u);
  EXPECT_EQ(back.dim, 4u);
  EXPECT_EQ(back.values, m.values);
  dir.write("bad.bin", "MKBEFEAX" + std::string(12, '\0'));
  EXPECT_THROW(read_features(dir.file("bad.bin")), InputError);
}

TEST(Features, NonFiniteRowIsNamed) {
  TempDir dir;
  write_features(dir.file("f.bin"), FeatureMatrix{2, 2, {1, 2, NAN, 0}});
  try {
    read_features(dir.file("f.bin"));
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}
