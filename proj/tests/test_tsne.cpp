#include "fixtures.hpp"

#include <bdisc/tsne.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

using namespace bdisc;
using bdisc::test::silhouette;
using bdisc::test::two_blobs;

namespace {

// exp(-sum p log p), computed directly from the probabilities.
double perplexity_of(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return std::exp(h);
}

TsneConfig quick(int n_iter = 300) {
  TsneConfig c;
  c.n_iter = n_iter;
  c.exaggeration_iters = std::min(100, n_iter);
  return c;
}

}  // namespace

TEST(PerplexitySearch, RowsHitTargetOnRandomData) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0 + static_cast<double>(seed));
    Eigen::MatrixXd x(80, 8);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    TsneConfig cfg;
    auto aff = conditional_affinities(x, cfg);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(x.rows()));
      for (Eigen::Index j = 0; j < x.rows(); ++j) row[static_cast<std::size_t>(j)] = aff.cond(i, j);
      EXPECT_NEAR(perplexity_of(row), 30.0, 1e-3) << "seed " << seed << " row " << i;
      EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
      EXPECT_EQ(aff.cond(i, i), 0.0);
      EXPECT_NEAR(aff.achieved_perplexity[static_cast<std::size_t>(i)], perplexity_of(row), 1e-9);
    }
  }
}

TEST(PerplexitySearch, ThreePointsMatchSigmaGridSearch) {
  // one near and one far neighbour: perplexity lies in (1, 2)
  const std::vector<double> d{0.0, 1.0, 9.0};
  const double target = 1.5;
  auto r = perplexity_search(d, 0, target, 1e-12, 200);
  EXPECT_NEAR(r.perplexity, target, 1e-9);
  double best_sigma = 0.0, best_gap = 1e9;
  for (double sigma = 0.01; sigma < 10.0; sigma += 1e-5) {
    const double a = std::exp(-1.0 / (2 * sigma * sigma)), b = std::exp(-9.0 / (2 * sigma * sigma));
    const double gap = std::abs(perplexity_of({0.0, a / (a + b), b / (a + b)}) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best_sigma = sigma;
    }
  }
  EXPECT_NEAR(std::sqrt(1.0 / (2.0 * r.beta)), best_sigma, 1e-4);
  for (double t : {1.01, 1.99}) {
    auto q = perplexity_search(d, 0, t, 1e-12, 200);
    EXPECT_GT(q.perplexity, 1.0);
    EXPECT_LT(q.perplexity, 2.0);
  }
}

TEST(PerplexitySearch, EqualDistancesGiveUniformRow) {
  std::vector<double> d{0.0, 4.0, 4.0, 4.0, 4.0};
  auto r = perplexity_search(d, 0, 3.0);
  EXPECT_TRUE(r.degenerate);
  EXPECT_DOUBLE_EQ(r.perplexity, 4.0);
  EXPECT_NEAR(perplexity_of(r.probs), 4.0, 1e-12);
  EXPECT_EQ(r.probs[0], 0.0);
}

TEST(PerplexitySearch, DuplicatePointsAreHandled) {
  // row 0 has two exact duplicates and far points
  std::vector<double> d{0.0, 0.0, 0.0, 100.0, 101.0, 102.0, 103.0};
  auto r = perplexity_search(d, 0, 2.0);
  EXPECT_FALSE(r.degenerate);
  EXPECT_NEAR(r.perplexity, 2.0, 1e-3);
  EXPECT_NEAR(r.probs[1], 0.5, 1e-3);
}

TEST(PerplexitySearch, LargerTargetMeansSmallerPrecision) {
  std::vector<double> d{0.0, 1.0, 2.0, 4.0, 8.0, 9.0, 11.0, 15.0};
  auto a = perplexity_search(d, 0, 2.0);
  auto b = perplexity_search(d, 0, 5.0);
  EXPECT_GT(a.beta, b.beta);
}

TEST(PerplexitySearch, Errors) {
  std::vector<double> d{0.0, 1.0, 2.0, 3.0};
  EXPECT_THROW(perplexity_search(d, 0, 4.0), ValidationError);
  EXPECT_THROW(perplexity_search(d, 0, 0.5), ValidationError);
  EXPECT_THROW(perplexity_search(std::vector<double>{0.0, 1.0}, 0, 1.0), ValidationError);
}

TEST(Affinities, JointIsSymmetricAndSumsToOne) {
  auto x = two_blobs(20, 3, 5.0, 1);
  TsneConfig cfg;
  cfg.perplexity = 10.0;
  auto p = joint_affinities(conditional_affinities(x, cfg).cond);
  EXPECT_TRUE(p.isApprox(p.transpose(), 1e-15));
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  EXPECT_TRUE((p.array() >= 0.0).all());
}

TEST(Affinities, SquaredDistancesMatchDirectSum) {
  auto x = two_blobs(5, 4, 2.0, 3);
  auto d = squared_distances(x);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.rows(); ++j) EXPECT_NEAR(d(i, j), (x.row(i) - x.row(j)).squaredNorm(), 1e-10);
}

TEST(TsneFit, TwoBlobsSeparate) {
  std::vector<int> label;
  auto x = two_blobs(50, 10, 10.0, 4, &label);
  auto proj = tsne_fit(x, quick(500));
  EXPECT_GT(silhouette(proj.coords, label), 0.8);
  EXPECT_TRUE(proj.coords.allFinite());
}

TEST(TsneFit, DeterministicForSameSeed) {
  auto x = two_blobs(20, 5, 3.0, 5);
  auto cfg = quick(200);
  cfg.init = TsneInit::random;
  cfg.seed = 7;
  auto a = tsne_fit(x, cfg);
  auto b = tsne_fit(x, cfg);
  EXPECT_TRUE(a.coords == b.coords);
  cfg.seed = 8;
  auto c = tsne_fit(x, cfg);
  EXPECT_FALSE(a.coords == c.coords);
}

TEST(TsneFit, KlTraceIsRecordedAndEndsLow) {
  auto x = two_blobs(20, 5, 6.0, 6);
  auto cfg = quick(300);
  cfg.perplexity = 10.0;
  auto proj = tsne_fit(x, cfg);
  ASSERT_EQ(proj.kl_trace.size(), 6u);
  EXPECT_EQ(proj.kl_trace.front().first, 50);
  EXPECT_EQ(proj.kl_trace.back().first, 300);
  EXPECT_DOUBLE_EQ(proj.kl, proj.kl_trace.back().second);
  // after exaggeration ends, KL keeps going down
  EXPECT_LT(proj.kl_trace.back().second, proj.kl_trace[2].second);
  EXPECT_GE(proj.kl, 0.0);
}

TEST(TsneFit, PcaInitPreservesOrderAlongMainAxis) {
  Eigen::MatrixXd x(6, 2);
  x << 0, 0, 1, 0.01, 2, 0, 3, 0.01, 4, 0, 5, 0.01;
  TsneConfig cfg = quick(1);
  cfg.perplexity = 2.0;
  cfg.learning_rate = 1e-12;
  auto proj = tsne_fit(x, cfg);
  for (Eigen::Index i = 1; i < 6; ++i) EXPECT_GT(proj.coords(i, 0), proj.coords(i - 1, 0));
}

TEST(TsneFit, Errors) {
  Eigen::MatrixXd small(4, 3);
  small.setRandom();
  EXPECT_THROW(tsne_fit(small, quick()), ValidationError);
  auto x = two_blobs(10, 3, 2.0, 1);
  auto cfg = quick();
  cfg.perplexity = 20.0;
  EXPECT_THROW(tsne_fit(x, cfg), ValidationError);
  x(3, 1) = std::nan("");
  cfg.perplexity = 5.0;
  EXPECT_THROW(tsne_fit(x, cfg), ValidationError);
}

TEST(TsneFit, CoordsCsv) {
  Eigen::MatrixX2d c(2, 2);
  c << 0.5, -1.0, 2.0, 0.0;
  std::ostringstream out;
  write_coords_csv(out, {"a", "b"}, c);
  const std::string text = out.str();
  EXPECT_EQ(text.substr(0, 7), "id,x,y\n");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
