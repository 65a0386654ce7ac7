#include "fixtures.hpp"

#include <bdisc/data.hpp>
#include <bdisc/synth.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <set>
#include <sstream>

using namespace bdisc;

namespace {

std::string csv_row(const std::string& id, int label, double fill = 0.5, int n_values = kValuesPerSnippet) {
  std::string row = id + "," + std::to_string(label);
  for (int i = 0; i < n_values; ++i) row += "," + format_double(fill);
  return row;
}

Dataset parse(const std::string& body, const std::map<int, std::string>& classes = {}) {
  std::istringstream in(csv_header() + "\n" + body);
  return parse_csv(in, classes);
}

std::set<std::string> ids_of(const Dataset& d) {
  std::set<std::string> out;
  for (const auto& s : d.snippets) out.insert(s.id);
  return out;
}

}  // namespace

TEST(LoadCsv, MapsLabelAndValues) {
  auto d = parse(csv_row("a", 4) + "\n", {{4, "Float"}});
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.snippets[0].id, "a");
  ASSERT_TRUE(d.snippets[0].label);
  EXPECT_EQ(*d.snippets[0].label, 4);
  EXPECT_EQ(d.class_name(4), "Float");
  EXPECT_TRUE((d.snippets[0].values.array() == 0.5).all());
}

TEST(LoadCsv, ValueColumnsAreChannelMajor) {
  std::string row = "x,0";
  for (int i = 0; i < kValuesPerSnippet; ++i) row += "," + std::to_string(i);
  auto d = parse(row + "\n");
  EXPECT_EQ(d.snippets[0].values(kAccelX, 0), 0.0);
  EXPECT_EQ(d.snippets[0].values(kAccelY, 0), 20.0);
  EXPECT_EQ(d.snippets[0].values(kSpeed, 19), 79.0);
}

TEST(LoadCsv, MinusOneIsUnlabeled) {
  auto d = parse(csv_row("u", -1) + "\n" + csv_row("l", 2) + "\n");
  EXPECT_FALSE(d.snippets[0].label.has_value());
  EXPECT_EQ(d.snippets[1].label, 2);
}

TEST(LoadCsv, RowOrderPreserved) {
  auto d = parse(csv_row("z", 0) + "\n" + csv_row("a", 0) + "\n" + csv_row("m", 0) + "\n");
  EXPECT_EQ(d.snippets[0].id, "z");
  EXPECT_EQ(d.snippets[1].id, "a");
  EXPECT_EQ(d.snippets[2].id, "m");
}

TEST(LoadCsv, ShortRowNamesExpectedCountAndLine) {
  try {
    parse(csv_row("a", 0) + "\n" + csv_row("b", 0, 0.5, 79) + "\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("expected 80 values"), std::string::npos);
  }
}

TEST(LoadCsv, NonNumericCellIsParseError) {
  std::string row = csv_row("a", 0);
  row.replace(row.rfind("0.5"), 3, "abc");
  EXPECT_THROW(parse(row + "\n"), ParseError);
}

TEST(LoadCsv, WrongHeaderIsParseError) {
  std::istringstream in("id,label,ax_0\n");
  EXPECT_THROW(parse_csv(in), ParseError);
}

TEST(LoadCsv, UndeclaredClassIsValidationError) {
  EXPECT_THROW(parse(csv_row("a", 5) + "\n", {{0, "A"}, {1, "B"}}), ValidationError);
}

TEST(LoadCsv, GappedClassSetIsLegal) {
  std::map<int, std::string> classes{{0, "Flap"}, {6, "TerLoco"}, {8, "Manouvre"}};
  auto d = parse(csv_row("a", 8) + "\n" + csv_row("b", 0) + "\n", classes);
  EXPECT_EQ(d.class_indices(), (std::vector<int>{0, 6, 8}));
  EXPECT_EQ(d.class_counts().at(6), 0u);
}

TEST(LoadCsv, RoundTripThroughFileWithSidecar) {
  test::TempDir dir("csv");
  auto d = synth_generate(test::two_class_spec(3, 2), 11);
  d.class_names[7] = "Unused";
  save_csv(dir / "d.csv", d);
  EXPECT_TRUE(std::filesystem::exists(dir / "d.meta.json"));
  auto back = load_csv(dir / "d.csv");
  EXPECT_EQ(back.class_names, d.class_names);
  EXPECT_TRUE(back.preprocessed);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.snippets[i].id, d.snippets[i].id);
    EXPECT_EQ(back.snippets[i].label, d.snippets[i].label);
    EXPECT_TRUE(back.snippets[i].values == d.snippets[i].values) << "row " << i;
  }
}

TEST(Preprocess, ClampsAccelAndScalesSpeed) {
  Dataset d;
  d.class_names = {{0, "A"}};
  MotionSnippet s;
  s.id = "a";
  s.values.setConstant(1.5);
  s.values(kAccelX, 0) = 3.0;
  s.values(kAccelY, 1) = -7.0;
  s.values(kSpeed, 2) = 11.0;
  d.snippets.push_back(s);
  auto p = preprocess(d);
  const auto& v = p.snippets[0].values;
  EXPECT_EQ(v(kAccelX, 0), 2.0);
  EXPECT_EQ(v(kAccelY, 1), -2.0);
  EXPECT_EQ(v(kAccelZ, 5), 1.5);
  EXPECT_EQ(v(kSpeed, 2), 0.5);
  EXPECT_DOUBLE_EQ(v(kSpeed, 0), 1.5 / 22.0);
  EXPECT_TRUE(p.preprocessed);
}

TEST(Preprocess, SecondApplicationIsAnError) {
  Dataset d;
  d.class_names = {{0, "A"}};
  d.snippets.push_back({"a", SnippetValues::Constant(0.1), 0});
  auto p = preprocess(d);
  EXPECT_THROW(preprocess(p), ValidationError);
}

TEST(Preprocess, IsPureAndClampIdempotent) {
  auto d = synth_generate(test::two_class_spec(4, 4), 3);
  d.preprocessed = false;
  for (auto& s : d.snippets) s.values.topRows<3>() *= 3.0;
  auto a = preprocess(d);
  auto b = preprocess(d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_TRUE(a.snippets[i].values == b.snippets[i].values);
    SnippetValues twice = a.snippets[i].values;
    twice.topRows<3>() = twice.topRows<3>().cwiseMax(-kAccelClip).cwiseMin(kAccelClip);
    EXPECT_TRUE(twice == a.snippets[i].values);
  }
}

TEST(Preprocess, RejectsNonFinite) {
  Dataset d;
  d.class_names = {{0, "A"}};
  d.snippets.push_back({"a", SnippetValues::Zero(), 0});
  d.snippets[0].values(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(preprocess(d), ValidationError);
}

TEST(Split, WithheldClassGoesEntirelyUnlabeled) {
  auto d = synth_generate(synth_preset_9class(), 5);
  auto s = split_discovery(d, {0, 17, 0.5});
  EXPECT_FALSE(s.labeled.has_class(0));
  EXPECT_EQ(s.labeled.class_names.size(), 8u);
  std::size_t withheld_unlabeled = 0;
  for (const auto& t : s.truth) withheld_unlabeled += t == 0;
  EXPECT_EQ(withheld_unlabeled, d.class_counts().at(0));
  for (const auto& sn : s.labeled.snippets) EXPECT_NE(sn.label, 0);
  for (const auto& sn : s.unlabeled.snippets) EXPECT_FALSE(sn.label.has_value());
}

TEST(Split, NegativeControlHoldsOnlyKnownClasses) {
  auto d = synth_generate(synth_preset_5class(), 5);
  auto s = split_discovery(d, {std::nullopt, 3, 0.5});
  std::set<int> lab;
  for (const auto& sn : s.labeled.snippets) lab.insert(*sn.label);
  for (const auto& t : s.truth) EXPECT_TRUE(lab.count(*t));
}

TEST(Split, OddCountGivesLabeledTheExtra) {
  auto spec = test::two_class_spec(5, 4);
  auto d = synth_generate(spec, 1);
  auto s = split_discovery(d, {std::nullopt, 9, 0.5});
  auto lab = s.labeled.class_counts();
  EXPECT_EQ(lab.at(0), 3u);
  EXPECT_EQ(lab.at(1), 2u);
  std::size_t unl0 = 0;
  for (const auto& t : s.truth) unl0 += t == 0;
  EXPECT_EQ(unl0, 2u);
}

TEST(Split, PartitionsIdsForEverySeedAndWithheldClass) {
  auto d = synth_generate(synth_preset_5class(), 2);
  const auto all = ids_of(d);
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    for (std::optional<int> w : {std::optional<int>{}, std::optional<int>{0}, std::optional<int>{4}}) {
      auto s = split_discovery(d, {w, seed, 0.5});
      auto lab = ids_of(s.labeled);
      auto unl = ids_of(s.unlabeled);
      std::set<std::string> both;
      std::set_intersection(lab.begin(), lab.end(), unl.begin(), unl.end(), std::inserter(both, both.end()));
      EXPECT_TRUE(both.empty());
      std::set<std::string> merged = lab;
      merged.insert(unl.begin(), unl.end());
      EXPECT_EQ(merged, all);
      EXPECT_EQ(s.truth.size(), s.unlabeled.size());
    }
  }
}

TEST(Split, DeterministicAndSeedSensitive) {
  auto d = synth_generate(synth_preset_5class(), 2);
  auto a = split_discovery(d, {std::nullopt, 4, 0.5});
  auto b = split_discovery(d, {std::nullopt, 4, 0.5});
  auto c = split_discovery(d, {std::nullopt, 5, 0.5});
  EXPECT_EQ(ids_of(a.labeled), ids_of(b.labeled));
  EXPECT_NE(ids_of(a.labeled), ids_of(c.labeled));
}

TEST(Split, Errors) {
  auto d = synth_generate(test::two_class_spec(4, 4), 1);
  EXPECT_THROW(split_discovery(d, {5, 0, 0.5}), ValidationError);
  d.class_names[3] = "Empty";
  EXPECT_THROW(split_discovery(d, {3, 0, 0.5}), ValidationError);
  EXPECT_THROW(split_discovery(d, {std::nullopt, 0, 1.0}), ConfigError);
  EXPECT_THROW(split_discovery(d, {std::nullopt, 0, 0.0}), ConfigError);
}

TEST(Synth, FlatTemplateHasTinyDynamicRange) {
  SynthSpec spec;
  auto flat = detail::wave({0.0, 0.0, 1.0, 0.0}, {0.0, 0.0, 0.0, 0.0}, 0.0, 0.01);
  flat.offset_jitter = {};
  spec.classes = {detail::wave_class(0, "Flat", 50, {flat})};
  auto d = synth_generate(spec, 8);
  for (const auto& s : d.snippets)
    for (int c = 0; c < 3; ++c) {
      const double mean = s.values.row(c).mean();
      EXPECT_LT((s.values.row(c).array() - mean).abs().maxCoeff(), 0.05);
    }
}

TEST(Synth, DeterministicPerSeed) {
  auto a = synth_generate(synth_preset_5class(), 42);
  auto b = synth_generate(synth_preset_5class(), 42);
  auto c = synth_generate(synth_preset_5class(), 43);
  ASSERT_EQ(a.size(), b.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.snippets[i].id, b.snippets[i].id);
    EXPECT_EQ(0, std::memcmp(a.snippets[i].values.data(), b.snippets[i].values.data(), sizeof(double) * kValuesPerSnippet));
    any_diff |= !(a.snippets[i].values == c.snippets[i].values);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Synth, HonorsImbalancedCounts) {
  auto d = synth_generate(test::two_class_spec(), 1, {1500, 38});
  EXPECT_EQ(d.class_counts().at(0), 1500u);
  EXPECT_EQ(d.class_counts().at(1), 38u);
}

TEST(Synth, OutputIsInPreprocessedRange) {
  for (const auto& name : synth_preset_names()) {
    auto d = synth_generate(*synth_preset(name), 6);
    EXPECT_TRUE(d.preprocessed);
    for (const auto& s : d.snippets) {
      EXPECT_TRUE(s.values.allFinite());
      EXPECT_LE(s.values.topRows<3>().cwiseAbs().maxCoeff(), 2.0);
      EXPECT_GE(s.values.row(kSpeed).minCoeff(), 0.0);
      EXPECT_LE(s.values.row(kSpeed).maxCoeff(), 1.5);
    }
  }
}

TEST(Synth, PresetsMatchTheirDescriptions) {
  auto five = synth_preset_5class();
  EXPECT_EQ(five.classes.size(), 5u);
  ASSERT_TRUE(five.transition_class && five.well_separated_class);
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& c : five.classes) {
    lo = std::min(lo, c.count);
    hi = std::max(hi, c.count);
  }
  EXPECT_GT(hi, 4 * lo);
  EXPECT_LE(hi, 40 * lo);

  auto nine = synth_preset_9class();
  std::vector<int> idx;
  for (const auto& c : nine.classes) idx.push_back(c.index);
  EXPECT_EQ(idx, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 8, 9}));
}

TEST(Synth, StreamWindowsCarryTheNovelClass) {
  auto spec = synth_preset_deploy();
  auto st = synth_stream(spec, 3, 4, 25, 10, {2});
  ASSERT_EQ(st.size(), 100u);
  for (std::size_t i = 0; i < st.size(); ++i) {
    const bool novel_window = i / 25 == 2;
    EXPECT_EQ(*st.snippets[i].label == 10, novel_window) << i;
  }
  EXPECT_THROW(synth_stream(spec, 3, 4, 25, std::nullopt, {1}), ConfigError);
}

TEST(Synth, SpecJsonRoundTrip) {
  auto spec = synth_preset_5class();
  auto back = synth_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back).dump(), to_json(spec).dump());
  auto a = synth_generate(spec, 4);
  auto b = synth_generate(back, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a.snippets[i].values == b.snippets[i].values);
}

TEST(Synth, InvalidSpecsRejected) {
  SynthSpec empty;
  EXPECT_THROW(empty.validate(), ConfigError);
  auto dup = test::two_class_spec();
  dup.classes[1].index = 0;
  EXPECT_THROW(dup.validate(), ConfigError);
  auto bad = synth_preset_5class();
  bad.classes[4].transition->max_switch = kTimesteps;
  EXPECT_THROW(bad.validate(), ConfigError);
}
