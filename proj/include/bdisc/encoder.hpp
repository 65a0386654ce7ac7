#pragma once

// Temporal convolutional classifier whose pre-softmax logits serve as the
// embedding of a motion snippet. Forward and backward passes are written out
// by hand; every activation is a (channels x batch*timesteps) matrix whose
// column n*T + t holds sample n at time t.

#include "data.hpp"
#include "json_util.hpp"

#include <Eigen/Core>

#include <numeric>
#include <span>

namespace bdisc {

struct EncoderConfig {
  int in_channels = kChannels;
  int conv_layers = 3;
  int channels_per_layer = 30;
  int kernel = 3;
  int padding = 1;
  double dropout_rate = 0.25;
  int epochs = 2000;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 0;  // 0 = full batch
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels != kChannels) throw ConfigError("encoder.in_channels must be 4");
    if (conv_layers < 1) throw ConfigError("encoder.conv_layers must be >= 1");
    if (channels_per_layer < 1) throw ConfigError("encoder.channels_per_layer must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("encoder.kernel must be odd");
    if (padding != (kernel - 1) / 2)
      throw ConfigError("encoder.padding must equal (kernel-1)/2 to preserve length");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("encoder.dropout_rate must lie in [0,1)");
    if (epochs < 0) throw ConfigError("encoder.epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("encoder.learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("encoder.weight_decay must be >= 0");
    if (batch_size < 0 || batch_size == 1)
      throw ConfigError("encoder.batch_size must be 0 (full batch) or >= 2");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
      throw ConfigError("encoder.bn_momentum must lie in (0,1]");
  }
};

/// Maps the (possibly gapped) global class indices of a trial onto contiguous
/// local indices 0..C-1.
class ClassMap {
public:
  ClassMap() = default;
  explicit ClassMap(std::vector<int> globals) : globals_(std::move(globals)) {
    std::sort(globals_.begin(), globals_.end());
    if (std::adjacent_find(globals_.begin(), globals_.end()) != globals_.end())
      throw ValidationError("class map contains duplicate class indices");
  }

  std::size_t size() const noexcept { return globals_.size(); }
  const std::vector<int>& globals() const noexcept { return globals_; }
  int global(int local) const { return globals_.at(static_cast<std::size_t>(local)); }
  bool contains(int global) const {
    return std::binary_search(globals_.begin(), globals_.end(), global);
  }
  int local(int global) const {
    auto it = std::lower_bound(globals_.begin(), globals_.end(), global);
    if (it == globals_.end() || *it != global)
      throw ValidationError("class " + std::to_string(global) + " is not in the class map");
    return static_cast<int>(it - globals_.begin());
  }
  bool operator==(const ClassMap&) const = default;

private:
  std::vector<int> globals_;
};

struct ConvBlock {
  Eigen::MatrixXd weight;  // out x (in*kernel), column ci*kernel + k
  Eigen::VectorXd bias;
  Eigen::VectorXd bn_scale;
  Eigen::VectorXd bn_shift;
};

/// The optimized tensors. Also used as the gradient and moment containers.
struct EncoderWeights {
  std::vector<ConvBlock> blocks;
  Eigen::MatrixXd head_weight;  // classes x channels
  Eigen::VectorXd head_bias;

  EncoderWeights zeros_like() const {
    EncoderWeights z = *this;
    for (auto& b : z.blocks) {
      b.weight.setZero();
      b.bias.setZero();
      b.bn_scale.setZero();
      b.bn_shift.setZero();
    }
    z.head_weight.setZero();
    z.head_bias.setZero();
    return z;
  }
};

struct TensorView {
  std::string name;
  std::span<double> data;
  bool decay;  // subject to weight decay
};

namespace detail {
inline std::span<double> span_of(Eigen::MatrixXd& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> span_of(Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
}  // namespace detail

/// Flat views over every trainable tensor, in a fixed order.
inline std::vector<TensorView> tensors(EncoderWeights& w) {
  std::vector<TensorView> out;
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto p = "conv" + std::to_string(i) + ".";
    out.push_back({p + "weight", detail::span_of(w.blocks[i].weight), true});
    out.push_back({p + "bias", detail::span_of(w.blocks[i].bias), false});
    out.push_back({p + "bn_scale", detail::span_of(w.blocks[i].bn_scale), false});
    out.push_back({p + "bn_shift", detail::span_of(w.blocks[i].bn_shift), false});
  }
  out.push_back({"head.weight", detail::span_of(w.head_weight), true});
  out.push_back({"head.bias", detail::span_of(w.head_bias), false});
  return out;
}

struct BatchNormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

struct EncoderParams {
  EncoderWeights weights;
  std::vector<BatchNormStats> running;
  ClassMap classes;
  int kernel = 3;
  double bn_epsilon = 1e-5;

  std::size_t n_classes() const { return static_cast<std::size_t>(weights.head_bias.size()); }
};

/// Fan-in scaled uniform weights, zero biases, unit BN scale, zero BN shift.
inline EncoderParams init_params(const EncoderConfig& cfg, const ClassMap& classes, Rng& rng) {
  cfg.validate();
  if (classes.size() < 2) throw ValidationError("need >= 2 classes");
  EncoderParams p;
  p.classes = classes;
  p.kernel = cfg.kernel;
  p.bn_epsilon = cfg.bn_epsilon;
  int in = cfg.in_channels;
  const int ch = cfg.channels_per_layer;
  auto uniform_fill = [&rng](Eigen::MatrixXd& m, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
  };
  for (int l = 0; l < cfg.conv_layers; ++l) {
    ConvBlock b;
    b.weight.resize(ch, in * cfg.kernel);
    uniform_fill(b.weight, 1.0 / std::sqrt(static_cast<double>(in * cfg.kernel)));
    b.bias = Eigen::VectorXd::Zero(ch);
    b.bn_scale = Eigen::VectorXd::Ones(ch);
    b.bn_shift = Eigen::VectorXd::Zero(ch);
    p.weights.blocks.push_back(std::move(b));
    p.running.push_back({Eigen::VectorXd::Zero(ch), Eigen::VectorXd::Ones(ch)});
    in = ch;
  }
  p.weights.head_weight.resize(static_cast<Eigen::Index>(classes.size()), ch);
  uniform_fill(p.weights.head_weight, 1.0 / std::sqrt(static_cast<double>(ch)));
  p.weights.head_bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(classes.size()));
  return p;
}

/// Pack snippets into a channels x (N*T) input matrix.
inline Eigen::MatrixXd pack_batch(const std::vector<const MotionSnippet*>& batch) {
  Eigen::MatrixXd x(kChannels, static_cast<Eigen::Index>(batch.size()) * kTimesteps);
  for (std::size_t n = 0; n < batch.size(); ++n)
    for (int c = 0; c < kChannels; ++c)
      for (int t = 0; t < kTimesteps; ++t)
        x(c, static_cast<Eigen::Index>(n) * kTimesteps + t) = batch[n]->values(c, t);
  return x;
}

inline Eigen::MatrixXd pack_batch(const Dataset& d, std::span<const std::size_t> rows) {
  std::vector<const MotionSnippet*> ptrs;
  ptrs.reserve(rows.size());
  for (auto r : rows) ptrs.push_back(&d.snippets.at(r));
  return pack_batch(ptrs);
}

inline Eigen::MatrixXd pack_batch(const Dataset& d) {
  std::vector<std::size_t> rows(d.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return pack_batch(d, rows);
}

enum class Mode { train, infer };

/// One inverted-dropout mask per conv block (0 or 1/(1-p) per activation).
using DropoutMasks = std::vector<Eigen::MatrixXd>;

inline DropoutMasks draw_dropout_masks(const EncoderParams& p, double rate, Eigen::Index batch,
                                       Rng& rng) {
  DropoutMasks masks;
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (const auto& b : p.weights.blocks) {
    Eigen::MatrixXd m(b.weight.rows(), batch * kTimesteps);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = keep(rng) ? scale : 0.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

struct BlockCache {
  Eigen::MatrixXd input_cols;  // im2col of the block input
  Eigen::MatrixXd xhat;        // normalized pre-activation
  Eigen::VectorXd inv_std;
  Eigen::MatrixXd bn_out;  // before ReLU
  BatchNormStats batch_stats;
};

struct ForwardCache {
  Mode mode = Mode::infer;
  Eigen::Index batch = 0;
  std::vector<BlockCache> blocks;
  Eigen::MatrixXd pooled;  // channels x N
  Eigen::MatrixXd logits;  // N x C
  const DropoutMasks* masks = nullptr;
};

namespace detail {

inline Eigen::MatrixXd im2col(const Eigen::MatrixXd& x, int kernel, int pad) {
  const Eigen::Index cin = x.rows();
  const Eigen::Index cols = x.cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(cin * kernel, cols);
  for (Eigen::Index col = 0; col < cols; ++col) {
    const Eigen::Index t = col % kTimesteps;
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index src_t = t + k - pad;
      if (src_t < 0 || src_t >= kTimesteps) continue;
      const Eigen::Index src = col - t + src_t;
      for (Eigen::Index ci = 0; ci < cin; ++ci) out(ci * kernel + k, col) = x(ci, src);
    }
  }
  return out;
}

inline Eigen::MatrixXd col2im(const Eigen::MatrixXd& cols_grad, Eigen::Index cin, int kernel,
                              int pad) {
  const Eigen::Index cols = cols_grad.cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(cin, cols);
  for (Eigen::Index col = 0; col < cols; ++col) {
    const Eigen::Index t = col % kTimesteps;
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index src_t = t + k - pad;
      if (src_t < 0 || src_t >= kTimesteps) continue;
      const Eigen::Index src = col - t + src_t;
      for (Eigen::Index ci = 0; ci < cin; ++ci) out(ci, src) += cols_grad(ci * kernel + k, col);
    }
  }
  return out;
}

inline void check_finite(const Eigen::MatrixXd& m, const std::string& where) {
  if (!m.allFinite()) throw NumericalError("non-finite activation in " + where);
}

}  // namespace detail

/// Forward pass. `input` is channels x (N*T). In train mode batch statistics
/// are used and `masks` must be supplied; in infer mode running statistics are
/// used and dropout is off. Returns logits N x C.
inline Eigen::MatrixXd forward(const EncoderParams& p, const Eigen::MatrixXd& input, Mode mode,
                               const DropoutMasks* masks = nullptr, ForwardCache* cache = nullptr) {
  if (input.rows() != kChannels || input.cols() % kTimesteps != 0)
    throw ValidationError("forward: input must be 4 x (N*20)");
  const Eigen::Index batch = input.cols() / kTimesteps;
  const int pad = (p.kernel - 1) / 2;
  if (mode == Mode::train) {
    if (batch < 2) throw ValidationError("batch norm in train mode needs a batch of >= 2 samples");
    if (!masks || masks->size() != p.weights.blocks.size())
      throw ValidationError("train mode requires one dropout mask per conv block");
    for (std::size_t l = 0; l < masks->size(); ++l)
      if ((*masks)[l].rows() != p.weights.blocks[l].weight.rows() ||
          (*masks)[l].cols() != batch * kTimesteps)
        throw ValidationError("dropout mask " + std::to_string(l) + " has the wrong shape");
  }
  if (cache) {
    cache->mode = mode;
    cache->batch = batch;
    cache->blocks.clear();
    cache->masks = masks;
  }
  Eigen::MatrixXd x = input;
  for (std::size_t l = 0; l < p.weights.blocks.size(); ++l) {
    const auto& b = p.weights.blocks[l];
    const std::string where = "conv block " + std::to_string(l);
    Eigen::MatrixXd cols = detail::im2col(x, p.kernel, pad);
    Eigen::MatrixXd y = b.weight * cols;
    y.colwise() += b.bias;
    if (y.cols() != batch * kTimesteps) throw ValidationError(where + ": temporal length changed");
    BlockCache bc;
    Eigen::VectorXd mean, var;
    if (mode == Mode::train) {
      const double m = static_cast<double>(y.cols());
      mean = y.rowwise().mean();
      var = (y.colwise() - mean).array().square().rowwise().sum() / m;
    } else {
      mean = p.running[l].mean;
      var = p.running[l].var;
    }
    Eigen::VectorXd inv_std = (var.array() + p.bn_epsilon).rsqrt();
    Eigen::MatrixXd xhat = (y.colwise() - mean).array().colwise() * inv_std.array();
    Eigen::MatrixXd bn = (xhat.array().colwise() * b.bn_scale.array()).colwise() +
                         b.bn_shift.array();
    Eigen::MatrixXd act = bn.cwiseMax(0.0);
    if (mode == Mode::train) act = act.cwiseProduct((*masks)[l]);
    detail::check_finite(act, where);
    if (cache) {
      bc.input_cols = std::move(cols);
      bc.xhat = std::move(xhat);
      bc.inv_std = std::move(inv_std);
      bc.bn_out = std::move(bn);
      bc.batch_stats = {std::move(mean), std::move(var)};
      cache->blocks.push_back(std::move(bc));
    }
    x = std::move(act);
  }
  Eigen::MatrixXd pooled(x.rows(), batch);
  for (Eigen::Index n = 0; n < batch; ++n)
    pooled.col(n) = x.middleCols(n * kTimesteps, kTimesteps).rowwise().mean();
  Eigen::MatrixXd logits = ((p.weights.head_weight * pooled).colwise() + p.weights.head_bias).transpose();
  detail::check_finite(logits, "classifier head");
  if (cache) {
    cache->pooled = std::move(pooled);
    cache->logits = logits;
  }
  return logits;
}

/// Mean softmax cross-entropy; labels are local class indices.
inline double loss_softmax_ce(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw ValidationError("loss: label count does not match batch size");
  double total = 0.0;
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= logits.cols()) throw ValidationError("loss: label out of range");
    const double mx = logits.row(n).maxCoeff();
    const double lse = mx + std::log((logits.row(n).array() - mx).exp().sum());
    total += lse - logits(n, y);
  }
  return total / static_cast<double>(logits.rows());
}

/// d loss / d logits for the mean cross-entropy.
inline Eigen::MatrixXd loss_softmax_ce_grad(const Eigen::MatrixXd& logits,
                                            std::span<const int> labels) {
  Eigen::MatrixXd g(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const double mx = logits.row(n).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(n).array() - mx).exp();
    g.row(n) = e / e.sum();
    g(n, labels[static_cast<std::size_t>(n)]) -= 1.0;
    g.row(n) *= inv_n;
  }
  return g;
}

/// Exact gradient of the mean cross-entropy through a train-mode forward pass.
inline EncoderWeights backward(const EncoderParams& p, const ForwardCache& cache,
                               std::span<const int> labels) {
  if (cache.mode != Mode::train || cache.blocks.size() != p.weights.blocks.size() ||
      cache.logits.cols() != p.weights.head_weight.rows() || cache.masks == nullptr)
    throw ValidationError("backward: cache does not come from a train-mode forward of these params");
  EncoderWeights g = p.weights.zeros_like();
  const Eigen::MatrixXd dlogits = loss_softmax_ce_grad(cache.logits, labels);  // N x C
  g.head_weight = dlogits.transpose() * cache.pooled.transpose();
  g.head_bias = dlogits.colwise().sum().transpose();
  const Eigen::MatrixXd dpooled = p.weights.head_weight.transpose() * dlogits.transpose();  // ch x N

  const Eigen::Index batch = cache.batch;
  const int pad = (p.kernel - 1) / 2;
  Eigen::MatrixXd dact(dpooled.rows(), batch * kTimesteps);
  for (Eigen::Index n = 0; n < batch; ++n)
    dact.middleCols(n * kTimesteps, kTimesteps).colwise() = dpooled.col(n) / kTimesteps;

  for (std::size_t li = p.weights.blocks.size(); li-- > 0;) {
    const auto& b = p.weights.blocks[li];
    const auto& bc = cache.blocks[li];
    auto& gb = g.blocks[li];
    Eigen::MatrixXd dbn = dact.cwiseProduct((*cache.masks)[li]);
    dbn = (bc.bn_out.array() > 0.0).select(dbn.array(), 0.0).matrix();
    gb.bn_shift = dbn.rowwise().sum();
    gb.bn_scale = dbn.cwiseProduct(bc.xhat).rowwise().sum();
    const Eigen::MatrixXd dxhat = dbn.array().colwise() * b.bn_scale.array();
    const double m = static_cast<double>(dxhat.cols());
    const Eigen::VectorXd sum_dxhat = dxhat.rowwise().sum();
    const Eigen::VectorXd sum_dxhat_xhat = dxhat.cwiseProduct(bc.xhat).rowwise().sum();
    Eigen::MatrixXd dy = (m * dxhat).colwise() - sum_dxhat;
    dy -= (bc.xhat.array().colwise() * sum_dxhat_xhat.array()).matrix();
    dy = dy.array().colwise() * (bc.inv_std.array() / m);
    gb.weight = dy * bc.input_cols.transpose();
    gb.bias = dy.rowwise().sum();
    if (li > 0) {
      const Eigen::MatrixXd dcols = b.weight.transpose() * dy;
      dact = detail::col2im(dcols, b.weight.cols() / p.kernel, p.kernel, pad);
    }
  }
  return g;
}

struct AdamState {
  EncoderWeights m;
  EncoderWeights v;
  long step = 0;
};

inline AdamState adam_init(const EncoderWeights& w) { return {w.zeros_like(), w.zeros_like(), 0}; }

/// One AdamW step with decoupled weight decay. `t` is the 1-based step index.
inline void adamw_step(EncoderWeights& params, EncoderWeights& grads, AdamState& state, long t,
                       const EncoderConfig& cfg) {
  if (t < 1) throw ValidationError("adamw: step index must be >= 1");
  state.step = t;
  auto pv = tensors(params);
  auto gv = tensors(grads);
  auto mv = tensors(state.m);
  auto vv = tensors(state.v);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < pv.size(); ++k) {
    auto w = pv[k].data;
    auto g = gv[k].data;
    auto m = mv[k].data;
    auto v = vv[k].data;
    if (g.size() != w.size()) throw ValidationError("adamw: gradient shape mismatch for " + pv[k].name);
    const double decay = pv[k].decay ? cfg.learning_rate * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= decay * w[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
    }
  }
}

struct TrainResult {
  EncoderParams params;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

/// Trial-local labels for a fully labeled dataset.
inline std::vector<int> local_labels(const Dataset& d, const ClassMap& classes) {
  std::vector<int> out;
  out.reserve(d.size());
  for (const auto& s : d.snippets) {
    if (!s.label) throw ValidationError("snippet '" + s.id + "' is unlabeled");
    out.push_back(classes.local(*s.label));
  }
  return out;
}

/// Train on a labeled dataset. Deterministic for a fixed cfg.seed.
inline TrainResult train(const Dataset& labeled, const EncoderConfig& cfg) {
  cfg.validate();
  if (!labeled.preprocessed) throw ValidationError("train: dataset must be preprocessed");
  const auto counts = labeled.class_counts();
  std::vector<int> present;
  for (const auto& [cls, n] : counts) {
    if (n == 0)
      throw ValidationError("train: class " + std::to_string(cls) + " has no labeled samples");
    present.push_back(cls);
  }
  if (present.size() < 2) throw ValidationError("need >= 2 classes");
  ClassMap classes(present);
  const auto labels = local_labels(labeled, classes);
  const std::size_t n = labeled.size();
  if (n < 2) throw ValidationError("train: need >= 2 samples");

  Rng init_rng(derive_seed(cfg.seed, "encoder.init"));
  Rng dropout_rng(derive_seed(cfg.seed, "encoder.dropout"));
  Rng order_rng(derive_seed(cfg.seed, "encoder.batches"));
  TrainResult result;
  result.params = init_params(cfg, classes, init_rng);
  auto& p = result.params;
  AdamState adam = adam_init(p.weights);

  const std::size_t bs = cfg.batch_size == 0 ? n : std::min<std::size_t>(cfg.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Eigen::MatrixXd full_input = pack_batch(labeled);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (bs < n) std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n;) {
      std::size_t stop = std::min(n, start + bs);
      if (n - stop == 1) stop = n;  // never leave a single-sample batch
      const auto count = static_cast<Eigen::Index>(stop - start);
      Eigen::MatrixXd input(kChannels, count * kTimesteps);
      std::vector<int> batch_labels(static_cast<std::size_t>(count));
      for (Eigen::Index j = 0; j < count; ++j) {
        const auto row = static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(j)]);
        input.middleCols(j * kTimesteps, kTimesteps) = full_input.middleCols(row * kTimesteps, kTimesteps);
        batch_labels[static_cast<std::size_t>(j)] = labels[static_cast<std::size_t>(row)];
      }
      const auto masks = draw_dropout_masks(p, cfg.dropout_rate, count, dropout_rng);
      ForwardCache cache;
      Eigen::MatrixXd logits;
      try {
        logits = forward(p, input, Mode::train, &masks, &cache);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
      const double loss = loss_softmax_ce(logits, batch_labels);
      if (!std::isfinite(loss))
        throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      epoch_loss += loss * static_cast<double>(count);
      auto grads = backward(p, cache, batch_labels);
      adamw_step(p.weights, grads, adam, ++step, cfg);
      for (std::size_t l = 0; l < p.running.size(); ++l) {
        const auto& bs_stats = cache.blocks[l].batch_stats;
        const double m = static_cast<double>(count * kTimesteps);
        p.running[l].mean = (1.0 - cfg.bn_momentum) * p.running[l].mean + cfg.bn_momentum * bs_stats.mean;
        p.running[l].var = (1.0 - cfg.bn_momentum) * p.running[l].var +
                           cfg.bn_momentum * bs_stats.var * (m / (m - 1.0));
      }
      start = stop;
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(n));
  }
  return result;
}

/// Infer-mode logits for every snippet of `d`, in row order.
inline Eigen::MatrixXd infer_logits(const EncoderParams& p, const Dataset& d) {
  constexpr std::size_t kChunk = 512;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(p.n_classes()));
  for (std::size_t start = 0; start < d.size(); start += kChunk) {
    const std::size_t stop = std::min(d.size(), start + kChunk);
    std::vector<std::size_t> rows(stop - start);
    std::iota(rows.begin(), rows.end(), start);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(rows.size())) =
        forward(p, pack_batch(d, rows), Mode::infer);
  }
  return out;
}

inline double training_accuracy(const EncoderParams& p, const Dataset& labeled) {
  const auto logits = infer_logits(p, labeled);
  const auto labels = local_labels(labeled, p.classes);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    correct += arg == labels[static_cast<std::size_t>(i)];
  }
  return labeled.size() ? static_cast<double>(correct) / static_cast<double>(labeled.size()) : 0.0;
}

/// Logit embeddings of a pool of snippets with per-row provenance.
struct EmbeddingSet {
  Eigen::MatrixXd vectors;  // N x C
  std::vector<std::string> ids;
  std::vector<std::optional<int>> labeled_class;  // global class for labeled rows
  std::vector<std::optional<int>> hidden_truth;   // evaluation only
  ClassMap classes;

  std::size_t size() const noexcept { return ids.size(); }
  bool is_labeled(std::size_t i) const { return labeled_class[i].has_value(); }

  void append(const EmbeddingSet& other) {
    if (!(other.classes == classes) || other.vectors.cols() != vectors.cols())
      throw ValidationError("cannot concatenate embeddings from different encoders");
    Eigen::MatrixXd merged(vectors.rows() + other.vectors.rows(), vectors.cols());
    merged << vectors, other.vectors;
    vectors = std::move(merged);
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    labeled_class.insert(labeled_class.end(), other.labeled_class.begin(), other.labeled_class.end());
    hidden_truth.insert(hidden_truth.end(), other.hidden_truth.begin(), other.hidden_truth.end());
  }
};

/// Infer-mode embedding of every snippet; provenance follows the snippet labels.
/// Labeled snippets also carry their label as hidden truth.
inline EmbeddingSet embed(const EncoderParams& p, const Dataset& d) {
  EmbeddingSet e;
  e.classes = p.classes;
  e.vectors = infer_logits(p, d);
  for (const auto& s : d.snippets) {
    e.ids.push_back(s.id);
    e.labeled_class.push_back(s.label);
    e.hidden_truth.push_back(s.label);
    if (s.label && !p.classes.contains(*s.label))
      throw ValidationError("embed: labeled snippet '" + s.id + "' has a class the encoder does not know");
  }
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {
inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return {{"shape", {m.rows(), m.cols()}}, {"data", rows}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  if (shape.size() != 2) throw ParseError("matrix shape must have two entries");
  Eigen::MatrixXd m(shape[0], shape[1]);
  const auto& rows = j.at("data");
  if (static_cast<Eigen::Index>(rows.size()) != shape[0]) throw ParseError("matrix row count mismatch");
  for (Eigen::Index i = 0; i < shape[0]; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(r.size()) != shape[1]) throw ParseError("matrix column count mismatch");
    for (Eigen::Index k = 0; k < shape[1]; ++k) m(i, k) = r[static_cast<std::size_t>(k)];
  }
  return m;
}

inline nlohmann::json vector_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const EncoderParams& p) {
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t l = 0; l < p.weights.blocks.size(); ++l) {
    const auto& b = p.weights.blocks[l];
    blocks.push_back({{"weight", detail::matrix_json(b.weight)},
                      {"bias", detail::vector_json(b.bias)},
                      {"bn_scale", detail::vector_json(b.bn_scale)},
                      {"bn_shift", detail::vector_json(b.bn_shift)},
                      {"running_mean", detail::vector_json(p.running[l].mean)},
                      {"running_var", detail::vector_json(p.running[l].var)}});
  }
  return {{"format", "bdisc-encoder"},
          {"version", kCheckpointVersion},
          {"kernel", p.kernel},
          {"bn_epsilon", p.bn_epsilon},
          {"class_map", p.classes.globals()},
          {"blocks", blocks},
          {"head_weight", detail::matrix_json(p.weights.head_weight)},
          {"head_bias", detail::vector_json(p.weights.head_bias)}};
}

inline EncoderParams checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "bdisc-encoder" || j.at("version") != kCheckpointVersion)
      throw ParseError("unsupported encoder checkpoint format/version");
    EncoderParams p;
    p.kernel = j.at("kernel").get<int>();
    p.bn_epsilon = j.at("bn_epsilon").get<double>();
    p.classes = ClassMap(j.at("class_map").get<std::vector<int>>());
    for (const auto& jb : j.at("blocks")) {
      ConvBlock b;
      b.weight = detail::matrix_from_json(jb.at("weight"));
      b.bias = detail::vector_from_json(jb.at("bias"));
      b.bn_scale = detail::vector_from_json(jb.at("bn_scale"));
      b.bn_shift = detail::vector_from_json(jb.at("bn_shift"));
      p.running.push_back({detail::vector_from_json(jb.at("running_mean")),
                           detail::vector_from_json(jb.at("running_var"))});
      p.weights.blocks.push_back(std::move(b));
    }
    p.weights.head_weight = detail::matrix_from_json(j.at("head_weight"));
    p.weights.head_bias = detail::vector_from_json(j.at("head_bias"));
    if (static_cast<std::size_t>(p.weights.head_bias.size()) != p.classes.size())
      throw ParseError("checkpoint head size does not match its class map");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("encoder checkpoint: ") + e.what());
  }
}

}  // namespace bdisc
