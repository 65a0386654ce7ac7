#pragma once

// Exact (O(N^2)) t-SNE to two dimensions.

#include "common.hpp"
#include "json_util.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <span>

namespace bdisc {

enum class TsneInit { pca, random };

struct TsneConfig {
  double perplexity = 30.0;
  int n_iter = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  double learning_rate = 200.0;
  double momentum_early = 0.5;
  double momentum_late = 0.8;
  double min_gain = 0.01;
  TsneInit init = TsneInit::pca;
  double init_scale = 1e-4;  // std of the first init coordinate
  double search_tol = 1e-5;  // on the entropy, nats
  int search_max_steps = 64;
  int kl_every = 50;  // record KL every this many iterations
  std::uint64_t seed = 0;

  void validate() const {
    if (!(perplexity > 0)) throw ConfigError("tsne.perplexity must be > 0");
    if (n_iter < 1) throw ConfigError("tsne.n_iter must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("tsne.learning_rate must be > 0");
    if (!(early_exaggeration > 0)) throw ConfigError("tsne.early_exaggeration must be > 0");
    if (exaggeration_iters < 0) throw ConfigError("tsne.exaggeration_iters must be >= 0");
    if (!(search_tol > 0) || search_max_steps < 1) throw ConfigError("tsne: invalid search settings");
    if (kl_every < 1) throw ConfigError("tsne.kl_every must be >= 1");
  }
};

inline const char* to_string(TsneInit i) { return i == TsneInit::pca ? "pca" : "random"; }

inline TsneInit tsne_init_from_string(const std::string& s) {
  if (s == "pca") return TsneInit::pca;
  if (s == "random") return TsneInit::random;
  throw ConfigError("tsne.init must be 'pca' or 'random', got '" + s + "'");
}

struct PerplexityRow {
  double beta = 1.0;  // precision, 1/(2 sigma^2)
  std::vector<double> probs;
  double perplexity = 0.0;  // achieved, exp(H) with H in nats
  bool degenerate = false;  // all distances equal: uniform row
};

/// Bisection on the precision so that the conditional distribution of row
/// `self` (squared distances `sqdist`, self entry ignored) hits the target
/// perplexity.
inline PerplexityRow perplexity_search(std::span<const double> sqdist, std::size_t self,
                                       double target, double tol = 1e-5, int max_steps = 64) {
  const std::size_t n = sqdist.size();
  if (n < 3) throw ValidationError("perplexity search needs N >= 3");
  if (!(target < static_cast<double>(n))) throw ValidationError("perplexity must be < N");
  if (!(target >= 1.0)) throw ValidationError("perplexity must be >= 1");
  PerplexityRow row;
  row.probs.assign(n, 0.0);
  double dmin = std::numeric_limits<double>::infinity();
  double dmax = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (j == self) continue;
    dmin = std::min(dmin, sqdist[j]);
    dmax = std::max(dmax, sqdist[j]);
  }
  const double neighbours = static_cast<double>(n - 1);
  if (dmax - dmin <= 0.0) {
    for (std::size_t j = 0; j < n; ++j) row.probs[j] = j == self ? 0.0 : 1.0 / neighbours;
    row.perplexity = neighbours;
    row.degenerate = true;
    return row;
  }
  const double target_h = std::log(target);
  double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  double h = 0.0;
  auto evaluate = [&](double b) {
    double sum = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == self) {
        row.probs[j] = 0.0;
        continue;
      }
      const double shifted = sqdist[j] - dmin;
      const double e = std::exp(-b * shifted);
      row.probs[j] = e;
      sum += e;
      weighted += e * shifted;
    }
    for (auto& p : row.probs) p /= sum;
    return std::log(sum) + b * weighted / sum;  // entropy in nats
  };
  for (int step = 0; step < max_steps; ++step) {
    h = evaluate(beta);
    const double diff = h - target_h;
    if (std::abs(diff) <= tol) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
  }
  row.beta = beta;
  row.perplexity = std::exp(evaluate(beta));
  return row;
}

inline Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

struct ConditionalAffinities {
  Eigen::MatrixXd cond;  // row i: p_{j|i}
  std::vector<double> achieved_perplexity;
  std::vector<char> degenerate;
};

inline ConditionalAffinities conditional_affinities(const Eigen::MatrixXd& x, const TsneConfig& cfg) {
  const auto n = static_cast<std::size_t>(x.rows());
  const Eigen::MatrixXd d = squared_distances(x);
  ConditionalAffinities out;
  out.cond.resize(x.rows(), x.rows());
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(n);
    for (std::size_t j = 0; j < n; ++j) row[j] = d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    const auto r = perplexity_search(row, i, cfg.perplexity, cfg.search_tol, cfg.search_max_steps);
    for (std::size_t j = 0; j < n; ++j) out.cond(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r.probs[j];
    out.achieved_perplexity.push_back(r.perplexity);
    out.degenerate.push_back(r.degenerate);
  }
  return out;
}

/// p_ij = (p_{j|i} + p_{i|j}) / 2N.
inline Eigen::MatrixXd joint_affinities(const Eigen::MatrixXd& cond) {
  const double n = static_cast<double>(cond.rows());
  return (cond + cond.transpose()) / (2.0 * n);
}

struct Projection2D {
  Eigen::MatrixX2d coords;
  double kl = 0.0;
  std::vector<std::pair<int, double>> kl_trace;  // (iteration, KL)
  std::vector<double> achieved_perplexity;
};

namespace detail {

inline Eigen::MatrixX2d pca_init(const Eigen::MatrixXd& x, double scale) {
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  Eigen::MatrixX2d y = Eigen::MatrixX2d::Zero(x.rows(), 2);
  if (x.cols() >= 1) {
    const Eigen::MatrixXd cov = centered.transpose() * centered;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::Index d = cov.rows();
    for (int c = 0; c < 2 && c < d; ++c) {
      Eigen::VectorXd v = es.eigenvectors().col(d - 1 - c);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;  // deterministic sign
      y.col(c) = centered * v;
    }
  }
  const double mean0 = y.col(0).mean();
  const double sd0 = std::sqrt((y.col(0).array() - mean0).square().mean());
  if (sd0 > 0) y *= scale / sd0;
  return y;
}

// KL(P || Q) with the Student-t kernel; P is the (unexaggerated) joint matrix.
inline double kl_divergence(const Eigen::MatrixXd& p, const Eigen::MatrixX2d& y) {
  const auto n = y.rows();
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) z += 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || p(i, j) <= 0.0) continue;
      const double q = 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm()) / z;
      kl += p(i, j) * std::log(p(i, j) / std::max(q, 1e-300));
    }
  return kl;
}

}  // namespace detail

/// Fit an exact t-SNE embedding of the rows of `x`.
inline Projection2D tsne_fit(const Eigen::MatrixXd& x, const TsneConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = x.rows();
  if (n < 5) throw ValidationError("t-SNE needs N >= 5");
  if (!(cfg.perplexity < static_cast<double>(n))) throw ValidationError("perplexity must be < N");
  if (!x.allFinite()) throw ValidationError("t-SNE input contains non-finite values");
  auto aff = conditional_affinities(x, cfg);
  const Eigen::MatrixXd p = joint_affinities(aff.cond);

  Projection2D out;
  out.achieved_perplexity = std::move(aff.achieved_perplexity);
  Eigen::MatrixX2d y;
  if (cfg.init == TsneInit::pca) {
    y = detail::pca_init(x, cfg.init_scale);
  } else {
    Rng rng(derive_seed(cfg.seed, "tsne.init"));
    std::normal_distribution<double> g(0.0, cfg.init_scale);
    y.resize(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      y(i, 0) = g(rng);
      y(i, 1) = g(rng);
    }
  }
  Eigen::MatrixX2d update = Eigen::MatrixX2d::Zero(n, 2);
  Eigen::MatrixX2d gains = Eigen::MatrixX2d::Ones(n, 2);
  Eigen::MatrixXd num(n, n);
  Eigen::MatrixX2d grad(n, 2);

  for (int it = 0; it < cfg.n_iter; ++it) {
    const bool early = it < cfg.exaggeration_iters;
    const double exaggeration = early ? cfg.early_exaggeration : 1.0;
    const double momentum = early ? cfg.momentum_early : cfg.momentum_late;
    double z = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      num(j, j) = 0.0;
      for (Eigen::Index i = j + 1; i < n; ++i) {
        const double dx = y(i, 0) - y(j, 0);
        const double dy = y(i, 1) - y(j, 1);
        const double v = 1.0 / (1.0 + dx * dx + dy * dy);
        num(i, j) = v;
        num(j, i) = v;
        z += 2.0 * v;
      }
    }
    const double inv_z = 1.0 / z;
    for (Eigen::Index i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double w = num(j, i);
        const double coeff = (exaggeration * p(j, i) - w * inv_z) * w;
        gx += coeff * (y(i, 0) - y(j, 0));
        gy += coeff * (y(i, 1) - y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }
    if (!grad.allFinite())
      throw NumericalError("t-SNE gradient became non-finite at iteration " + std::to_string(it));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        const bool flipped = (update(i, c) * grad(i, c)) < 0.0;
        gains(i, c) = flipped ? gains(i, c) + 0.2 : gains(i, c) * 0.8;
        gains(i, c) = std::max(gains(i, c), cfg.min_gain);
        update(i, c) = momentum * update(i, c) - cfg.learning_rate * gains(i, c) * grad(i, c);
        y(i, c) += update(i, c);
      }
    }
    if ((it + 1) % cfg.kl_every == 0 || it + 1 == cfg.n_iter)
      out.kl_trace.emplace_back(it + 1, detail::kl_divergence(p, y));
  }
  out.coords = y;
  out.kl = out.kl_trace.back().second;
  return out;
}

inline void write_coords_csv(std::ostream& out, const std::vector<std::string>& ids, const Eigen::MatrixX2d& coords) {
  out << "id,x,y\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    out << ids[i] << ',' << format_double(coords(static_cast<Eigen::Index>(i), 0)) << ','
        << format_double(coords(static_cast<Eigen::Index>(i), 1)) << '\n';
}

}  // namespace bdisc
