#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace bdisc;
using bdisc::test::fast_trial;
using bdisc::test::three_class_spec;

namespace {

const Dataset& three_class_data() {
  static const Dataset d = synth_generate(three_class_spec(), 3);
  return d;
}

}  // namespace

TEST(Discovery, WithheldClassIsNeverLabeled) {
  auto cfg = fast_trial();
  cfg.withheld = 1;
  auto r = run_existing_discovery(three_class_data(), cfg);
  EXPECT_EQ(r.kind, TrialKind::existing_novel);
  EXPECT_EQ(r.name, "1:Beat");
  for (std::size_t i = 0; i < r.embeddings.size(); ++i)
    EXPECT_NE(r.embeddings.labeled_class[i], std::optional<int>(1));
  EXPECT_EQ(r.encoder->classes.globals(), (std::vector<int>{0, 2}));
  EXPECT_EQ(r.embeddings.size(), three_class_data().size());
}

TEST(Discovery, FreeClusterLabelFollowsDeclaredClasses) {
  auto cfg = fast_trial();
  cfg.withheld = 2;
  auto r = run_existing_discovery(three_class_data(), cfg);
  EXPECT_EQ(r.free_cluster, 3);
  EXPECT_EQ(r.discovered_cluster, 2);
  ASSERT_TRUE(r.accuracy.has_value());
  EXPECT_GE(*r.accuracy, 0.0);
  EXPECT_LE(*r.accuracy, 1.0);
}

TEST(Discovery, AccuracyMatchesConfusionRow) {
  auto cfg = fast_trial();
  cfg.withheld = 1;
  auto r = run_existing_discovery(three_class_data(), cfg);
  const auto& cm = r.confusion;
  const auto row = std::find(cm.truth_classes.begin(), cm.truth_classes.end(), 1) - cm.truth_classes.begin();
  const auto col = std::find(cm.cluster_labels.begin(), cm.cluster_labels.end(), r.free_cluster) - cm.cluster_labels.begin();
  ASSERT_LT(row, static_cast<long>(cm.truth_classes.size()));
  ASSERT_LT(col, static_cast<long>(cm.cluster_labels.size()));
  ASSERT_TRUE(r.accuracy.has_value());
  EXPECT_DOUBLE_EQ(*r.accuracy, static_cast<double>(cm.counts(row, col)) / cm.counts.row(row).sum());
  ASSERT_TRUE(r.containment_score.has_value());
  EXPECT_GE(*r.containment_score, 0.0);
  EXPECT_LE(*r.containment_score, 1.0);
  EXPECT_EQ(r.novel, *r.containment_score < 0.3);
}

TEST(Discovery, ConfusionCoversUnlabeledPool) {
  auto cfg = fast_trial();
  cfg.withheld = 0;
  auto r = run_existing_discovery(three_class_data(), cfg);
  int unlabeled = 0;
  for (std::size_t i = 0; i < r.embeddings.size(); ++i) unlabeled += !r.embeddings.is_labeled(i);
  EXPECT_EQ(r.confusion.counts.sum(), unlabeled);
  EXPECT_EQ(r.confusion.counts.cols(), 3);
}

TEST(Discovery, SameSeedSameResult) {
  auto cfg = fast_trial(4);
  cfg.withheld = 0;
  auto a = run_existing_discovery(three_class_data(), cfg);
  auto b = run_existing_discovery(three_class_data(), cfg);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(a.pool.clusters.assignments, b.pool.clusters.assignments);
  EXPECT_TRUE(a.pool.projection.coords == b.pool.projection.coords);
  EXPECT_EQ(a.containment_score, b.containment_score);
}

TEST(Discovery, Preconditions) {
  auto cfg = fast_trial();
  EXPECT_THROW(run_existing_discovery(three_class_data(), cfg), ConfigError);
  cfg.withheld = 1;
  cfg.kmeans.n_free = 0;
  EXPECT_THROW(run_existing_discovery(three_class_data(), cfg), ConfigError);
  cfg.kmeans.n_free = 1;
  cfg.withheld = 7;
  EXPECT_THROW(run_existing_discovery(three_class_data(), cfg), StageError);
}

TEST(Control, UnlabeledPoolHoldsOnlyKnownClasses) {
  auto cfg = fast_trial();
  cfg.withheld = 2;
  auto r = run_negative_control(three_class_data(), cfg);
  EXPECT_EQ(r.kind, TrialKind::negative_control);
  EXPECT_FALSE(r.accuracy.has_value());
  for (std::size_t i = 0; i < r.embeddings.size(); ++i) EXPECT_NE(r.embeddings.hidden_truth[i], std::optional<int>(2));
  EXPECT_EQ(r.discovered_cluster, r.free_cluster);
}

TEST(Control, WithoutWithheldClassUsesWholeDataset) {
  auto r = run_negative_control(three_class_data(), fast_trial());
  EXPECT_EQ(r.name, "none");
  EXPECT_EQ(r.embeddings.size(), three_class_data().size());
  EXPECT_EQ(r.encoder->classes.size(), 3u);
}

TEST(Control, ConfigHashIgnoresWithheldClass) {
  auto a = fast_trial();
  auto b = a;
  b.withheld = 1;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.encoder.epochs = 31;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Deployment, WindowsTileTheStream) {
  auto spec = three_class_spec();
  auto labeled = synth_generate(spec, 1);
  auto stream = synth_stream(spec, 2, 3, 20, 1, {1});
  DeployConfig cfg;
  cfg.trial = fast_trial();
  cfg.window = 20;
  cfg.stride = 20;
  auto labeled_known = without_class(labeled, 1);
  auto out = run_deployment(labeled_known, stream, cfg);
  EXPECT_EQ(out.n_known, 2);
  EXPECT_EQ(out.k, 3);
  ASSERT_EQ(out.windows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(out.windows[i].start, 20 * i);
    EXPECT_EQ(out.windows[i].size, 20u);
    EXPECT_FALSE(out.windows[i].short_window);
    EXPECT_EQ(out.windows[i].trial.kind, TrialKind::deployment_window);
  }
}

TEST(Deployment, ShortFinalWindowIsFlagged) {
  auto spec = three_class_spec();
  auto labeled = synth_generate(spec, 1);
  auto stream = synth_stream(spec, 2, 2, 15, std::nullopt, {});
  stream.snippets.resize(25);
  DeployConfig cfg;
  cfg.trial = fast_trial();
  cfg.window = 15;
  cfg.stride = 15;
  auto out = run_deployment(labeled, stream, cfg);
  ASSERT_EQ(out.windows.size(), 2u);
  EXPECT_TRUE(out.windows[1].short_window);
  EXPECT_EQ(out.windows[1].size, 10u);
}

TEST(Deployment, ExplicitKMustExceedKnownClasses) {
  auto spec = three_class_spec();
  auto labeled = synth_generate(spec, 1);
  auto stream = synth_stream(spec, 2, 1, 20, std::nullopt, {});
  DeployConfig cfg;
  cfg.trial = fast_trial();
  cfg.window = 20;
  cfg.stride = 20;
  cfg.k = 3;
  EXPECT_THROW(run_deployment(labeled, stream, cfg), ConfigError);
  cfg.k = 5;
  auto out = run_deployment(labeled, stream, cfg);
  EXPECT_EQ(out.k, 5);
  EXPECT_EQ(out.windows[0].trial.pool.clusters.n_free, 2);
}

TEST(Deployment, EmptyStreamGivesNoWindows) {
  DeployConfig cfg;
  cfg.trial = fast_trial();
  Dataset empty;
  empty.class_names = three_class_data().class_names;
  EXPECT_TRUE(run_deployment(three_class_data(), empty, cfg).windows.empty());
}

TEST(Suite, OneDiscoveryAndOneControlPerClass) {
  auto cfg = fast_trial();
  cfg.encoder.epochs = 10;
  auto s = run_suite(three_class_data(), cfg);
  ASSERT_EQ(s.existing.size(), 3u);
  ASSERT_EQ(s.control.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(s.existing[i].removed_class, std::optional<int>(static_cast<int>(i)));
    EXPECT_EQ(s.control[i].kind, TrialKind::negative_control);
    EXPECT_FALSE(s.existing[i].error.has_value());
  }
}

TEST(Suite, ThreadCountDoesNotChangeResults) {
  auto cfg = fast_trial();
  cfg.encoder.epochs = 5;
  cfg.tsne.n_iter = 100;
  auto a = run_suite(three_class_data(), cfg, 1);
  auto b = run_suite(three_class_data(), cfg, 2);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.existing[i].pool.clusters.assignments, b.existing[i].pool.clusters.assignments);
    EXPECT_EQ(a.control[i].containment_score, b.control[i].containment_score);
  }
}

TEST(Suite, NeedsThreeClasses) {
  auto two = synth_generate(bdisc::test::two_class_spec(), 1);
  EXPECT_THROW(run_suite(two, fast_trial()), ValidationError);
}
