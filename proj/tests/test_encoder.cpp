#include "fixtures.hpp"
#include "grad_check.hpp"

#include <bdisc/encoder.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace bdisc;

namespace {

EncoderParams random_params(int n_classes, std::uint64_t seed = 1, EncoderConfig cfg = {}) {
  std::vector<int> classes(static_cast<std::size_t>(n_classes));
  std::iota(classes.begin(), classes.end(), 0);
  Rng rng(seed);
  return init_params(cfg, ClassMap(classes), rng);
}

Eigen::MatrixXd random_input(int batch, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd x(kChannels, batch * kTimesteps);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
  return x;
}

Dataset separable(std::uint64_t seed = 4) { return synth_generate(test::two_class_spec(), seed); }

}  // namespace

TEST(Forward, ZeroNetworkGivesZeroLogits) {
  auto p = random_params(4);
  for (auto& b : p.weights.blocks) {
    b.weight.setZero();
    b.bias.setZero();
    b.bn_shift.setZero();
  }
  p.weights.head_weight.setZero();
  p.weights.head_bias.setZero();
  auto logits = forward(p, random_input(3, 2), Mode::infer);
  EXPECT_TRUE((logits.array() == 0.0).all());
}

TEST(Forward, LogitShapeIsBatchByClasses) {
  auto p = random_params(8);
  auto logits = forward(p, random_input(7, 2), Mode::infer);
  EXPECT_EQ(logits.rows(), 7);
  EXPECT_EQ(logits.cols(), 8);
}

TEST(Forward, InferModeIsDeterministic) {
  auto p = random_params(5);
  auto x = random_input(4, 9);
  auto a = forward(p, x, Mode::infer);
  auto b = forward(p, x, Mode::infer);
  EXPECT_TRUE(a == b);
}

TEST(Forward, WiderKernelPreservesLength) {
  EncoderConfig cfg;
  cfg.kernel = 5;
  cfg.padding = 2;
  auto p = random_params(3, 1, cfg);
  ForwardCache cache;
  Rng rng(3);
  auto masks = draw_dropout_masks(p, cfg.dropout_rate, 2, rng);
  forward(p, random_input(2, 1), Mode::train, &masks, &cache);
  for (const auto& b : cache.blocks) EXPECT_EQ(b.bn_out.cols(), 2 * kTimesteps);
}

TEST(Forward, TrainModeRejectsSingleSampleBatch) {
  auto p = random_params(3);
  Rng rng(1);
  auto masks = draw_dropout_masks(p, 0.25, 1, rng);
  EXPECT_THROW(forward(p, random_input(1, 1), Mode::train, &masks), ValidationError);
}

TEST(Loss, UniformLogitsGiveLogC) {
  Eigen::MatrixXd logits = Eigen::MatrixXd::Constant(3, 8, 0.7);
  std::vector<int> labels{0, 3, 7};
  EXPECT_NEAR(loss_softmax_ce(logits, labels), std::log(8.0), 1e-15);
  EXPECT_NEAR(std::log(8.0), 2.0794, 1e-4);
}

TEST(Loss, MarginBelowLogC) {
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(2, 4);
  logits(0, 1) = 3.0;
  logits(1, 2) = 3.0;
  std::vector<int> labels{1, 2};
  EXPECT_LT(loss_softmax_ce(logits, labels), std::log(4.0));
}

TEST(Loss, MatchesExtendedPrecisionEvaluation) {
  Rng rng(77);
  std::normal_distribution<double> g(0.0, 3.0);
  Eigen::MatrixXd logits(3, 4);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
  std::vector<int> labels{2, 0, 3};
  long double total = 0.0L;
  for (int n = 0; n < 3; ++n) {
    long double z = 0.0L;
    for (int c = 0; c < 4; ++c) z += std::exp(static_cast<long double>(logits(n, c)));
    total += std::log(z) - static_cast<long double>(logits(n, labels[static_cast<std::size_t>(n)]));
  }
  EXPECT_NEAR(loss_softmax_ce(logits, labels), static_cast<double>(total / 3.0L), 1e-12);
}

TEST(Loss, StableForHugeLogits) {
  Eigen::MatrixXd logits(1, 3);
  logits << 1000.0, 0.0, -1000.0;
  std::vector<int> labels{0};
  EXPECT_NEAR(loss_softmax_ce(logits, labels), 0.0, 1e-12);
  labels[0] = 1;
  EXPECT_NEAR(loss_softmax_ce(logits, labels), 1000.0, 1e-9);
}

TEST(Backward, MatchesFiniteDifferencesOnSmallNetwork) {
  EncoderConfig cfg;
  cfg.channels_per_layer = 6;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto f = test::make_grad_fixture(seed, 2 + static_cast<int>(seed % 3), 3, cfg);
    auto r = test::check_gradients(f);
    EXPECT_EQ(r.unresolved, 0u);
    EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " worst " << r.worst_tensor;
  }
}

TEST(Backward, DuplicatedBatchGivesSameGradient) {
  auto p = random_params(3, 5);
  auto x = random_input(2, 6);
  Eigen::MatrixXd xx(kChannels, 4 * kTimesteps);
  xx << x, x;
  DropoutMasks m2, m4;
  for (const auto& b : p.weights.blocks) {
    m2.push_back(Eigen::MatrixXd::Ones(b.weight.rows(), 2 * kTimesteps));
    m4.push_back(Eigen::MatrixXd::Ones(b.weight.rows(), 4 * kTimesteps));
  }
  std::vector<int> l2{0, 2}, l4{0, 2, 0, 2};
  ForwardCache c2, c4;
  forward(p, x, Mode::train, &m2, &c2);
  forward(p, xx, Mode::train, &m4, &c4);
  auto g2 = backward(p, c2, l2);
  auto g4 = backward(p, c4, l4);
  auto t2 = tensors(g2);
  auto t4 = tensors(g4);
  for (std::size_t k = 0; k < t2.size(); ++k)
    for (std::size_t i = 0; i < t2[k].data.size(); ++i)
      EXPECT_NEAR(t2[k].data[i], t4[k].data[i], 1e-12 + 1e-9 * std::abs(t2[k].data[i])) << t2[k].name;
}

TEST(Backward, DeadUnitHasZeroWeightGradient) {
  auto p = random_params(3, 8);
  const int dead = 4;
  p.weights.blocks[1].bn_shift(dead) = -100.0;
  Rng rng(2);
  auto masks = draw_dropout_masks(p, 0.25, 3, rng);
  ForwardCache cache;
  forward(p, random_input(3, 3), Mode::train, &masks, &cache);
  std::vector<int> labels{0, 1, 2};
  auto g = backward(p, cache, labels);
  EXPECT_TRUE((g.blocks[1].weight.row(dead).array() == 0.0).all());
  EXPECT_EQ(g.blocks[1].bias(dead), 0.0);
  EXPECT_NE(g.blocks[1].weight.row(dead + 1).cwiseAbs().sum(), 0.0);
}

TEST(AdamW, ZeroGradientWithoutDecayIsFixedPoint) {
  auto p = random_params(3);
  auto before = p.weights;
  auto grads = p.weights.zeros_like();
  auto state = adam_init(p.weights);
  EncoderConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(p.weights, grads, state, 1, cfg);
  EXPECT_TRUE(p.weights.head_weight == before.head_weight);
  EXPECT_TRUE(p.weights.blocks[2].weight == before.blocks[2].weight);
}

TEST(AdamW, DecoupledDecayScalesWeightsOnly) {
  auto p = random_params(3);
  p.weights.head_bias.setConstant(0.5);
  p.weights.blocks[0].bn_scale.setConstant(1.5);
  auto before = p.weights;
  auto grads = p.weights.zeros_like();
  auto state = adam_init(p.weights);
  EncoderConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(p.weights, grads, state, 1, cfg);
  const double f = 1.0 - cfg.learning_rate * cfg.weight_decay;
  EXPECT_TRUE(p.weights.head_weight.isApprox(before.head_weight * f, 1e-15));
  EXPECT_TRUE(p.weights.blocks[1].weight.isApprox(before.blocks[1].weight * f, 1e-15));
  EXPECT_TRUE(p.weights.head_bias == before.head_bias);
  EXPECT_TRUE(p.weights.blocks[0].bn_scale == before.blocks[0].bn_scale);
}

TEST(AdamW, FirstStepFromUnitWeightAndGradient) {
  EncoderWeights w;
  w.head_weight = Eigen::MatrixXd::Ones(1, 1);
  w.head_bias = Eigen::VectorXd::Zero(1);
  auto g = w.zeros_like();
  g.head_weight(0, 0) = 1.0;
  auto state = adam_init(w);
  EncoderConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(w, g, state, 1, cfg);
  // m_hat = 1, v_hat = 1 after bias correction
  EXPECT_DOUBLE_EQ(w.head_weight(0, 0), 1.0 - 3e-4 * (1.0 / (1.0 + 1e-8)));
  EXPECT_NEAR(w.head_weight(0, 0), 0.9997, 1e-9);
  EXPECT_THROW(adamw_step(w, g, state, 0, cfg), ValidationError);
}

TEST(Train, SeparableClassesReachFullAccuracy) {
  auto d = separable();
  EncoderConfig cfg;
  cfg.epochs = 200;
  cfg.seed = 3;
  auto r = train(d, cfg);
  EXPECT_EQ(training_accuracy(r.params, d), 1.0);
  ASSERT_EQ(r.loss_trace.size(), 200u);
  std::size_t windows = 0, non_increasing = 0;
  for (std::size_t t = 0; t + 50 < r.loss_trace.size(); ++t) {
    ++windows;
    non_increasing += r.loss_trace[t + 50] <= r.loss_trace[t];
  }
  EXPECT_GE(static_cast<double>(non_increasing), 0.95 * static_cast<double>(windows));
  for (const auto& rs : r.params.running) {
    EXPECT_TRUE(rs.mean.allFinite());
    EXPECT_TRUE((rs.var.array() >= 0.0).all());
  }
}

TEST(Train, SameSeedSameParameters) {
  auto d = separable();
  EncoderConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.seed = 21;
  auto a = train(d, cfg);
  auto b = train(d, cfg);
  EXPECT_EQ(checkpoint_json(a.params).dump(), checkpoint_json(b.params).dump());
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  cfg.seed = 22;
  auto c = train(d, cfg);
  EXPECT_NE(checkpoint_json(a.params).dump(), checkpoint_json(c.params).dump());
}

TEST(Train, TrailingSingletonBatchIsMerged) {
  auto d = synth_generate(test::two_class_spec(5, 4), 1);  // 9 samples, batch 4 -> 4 + 5
  EncoderConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  EXPECT_NO_THROW(train(d, cfg));
}

TEST(Train, Preconditions) {
  auto d = separable();
  EncoderConfig cfg;
  cfg.epochs = 1;
  auto one = without_class(d, 1);
  one.class_names.erase(1);
  try {
    train(one, cfg);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("need >= 2 classes"), std::string::npos);
  }
  auto raw = d;
  raw.preprocessed = false;
  EXPECT_THROW(train(raw, cfg), ValidationError);
  cfg.batch_size = 1;
  EXPECT_THROW(train(d, cfg), ConfigError);
  cfg = {};
  cfg.kernel = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.padding = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.dropout_rate = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Embed, DimensionProvenanceAndRowOrder) {
  auto d = synth_generate(synth_preset_9class(), 2);
  auto known = without_class(d, 0);
  known.class_names.erase(0);
  EncoderConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  auto r = train(known, cfg);
  auto e = embed(r.params, known);
  EXPECT_EQ(e.vectors.cols(), 8);
  EXPECT_EQ(e.size(), known.size());
  EXPECT_TRUE(e.vectors.allFinite());
  for (std::size_t i = 0; i < known.size(); ++i) EXPECT_EQ(e.labeled_class[i], known.snippets[i].label);

  Dataset rev = known;
  std::reverse(rev.snippets.begin(), rev.snippets.end());
  auto er = embed(r.params, rev);
  const auto n = static_cast<Eigen::Index>(known.size());
  for (Eigen::Index i = 0; i < n; ++i) EXPECT_TRUE(er.vectors.row(n - 1 - i) == e.vectors.row(i));

  EXPECT_THROW(embed(r.params, d), ValidationError);  // class 0 unknown to the encoder
}

TEST(Checkpoint, JsonRoundTrip) {
  auto d = separable();
  EncoderConfig cfg;
  cfg.epochs = 3;
  auto r = train(d, cfg);
  auto back = checkpoint_from_json(nlohmann::json::parse(checkpoint_json(r.params).dump()));
  EXPECT_TRUE(infer_logits(back, d) == infer_logits(r.params, d));
  EXPECT_EQ(back.classes, r.params.classes);
  auto bad = checkpoint_json(r.params);
  bad["version"] = 99;
  EXPECT_THROW(checkpoint_from_json(bad), ParseError);
}

TEST(ClassMapTest, GappedGlobalsMapToContiguousLocals) {
  ClassMap m({9, 0, 6, 8});
  EXPECT_EQ(m.local(0), 0);
  EXPECT_EQ(m.local(6), 1);
  EXPECT_EQ(m.local(9), 3);
  EXPECT_EQ(m.global(2), 8);
  EXPECT_THROW(m.local(7), ValidationError);
  EXPECT_THROW(ClassMap({1, 1}), ValidationError);
}
