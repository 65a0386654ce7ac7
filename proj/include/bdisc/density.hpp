#pragma once

// Gaussian KDE in the plane, highest-density-region (HDR) thresholds by Monte
// Carlo, and the HDR containment score used to decide whether a discovered
// cluster is explained by a known class.
//
// Monte Carlo draws are a function of (seed, model fingerprint): a model
// always produces the same m draws for a given seed, and those draws are used
// both for its own HDR threshold and as its samples when it is the source of
// a directional containment. Identical models therefore produce identical
// draws, which makes self-containment exact (fraction inside own HDR >= alpha).

#include "common.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <concepts>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace bdisc {

using Point2 = Eigen::Vector2d;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2>;

/// A planar density that can be evaluated, sampled, and identified.
template <class D>
concept PlanarDensity = requires(const D& d, const Point2& z, Rng& rng) {
  { d.log_density(z) } -> std::convertible_to<double>;
  { d.draw(rng) } -> std::convertible_to<Point2>;
  { d.fingerprint() } -> std::convertible_to<std::uint64_t>;
};

inline constexpr std::size_t kMinKdePoints = 5;
inline constexpr std::size_t kWarnKdePoints = 30;

namespace detail {
inline double log_two_pi() { return std::log(2.0 * std::numbers::pi); }

inline std::uint64_t hash_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m, std::uint64_t h) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double v = m(i, j) == 0.0 ? 0.0 : m(i, j);  // fold -0
      h = fnv1a_bytes(&v, sizeof v, h);
    }
  return h;
}
}  // namespace detail

/// Bivariate normal with full covariance.
class Gaussian2D {
public:
  Gaussian2D(Point2 mean, Eigen::Matrix2d cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
    Eigen::LLT<Eigen::Matrix2d> llt(cov_);
    if (llt.info() != Eigen::Success) throw ValidationError("Gaussian2D: covariance is not positive definite");
    chol_ = llt.matrixL();
    log_norm_ = -detail::log_two_pi() - std::log(chol_(0, 0) * chol_(1, 1));
  }

  static Gaussian2D standard() { return {Point2::Zero(), Eigen::Matrix2d::Identity()}; }

  double log_density(const Point2& z) const {
    const Point2 w = chol_.triangularView<Eigen::Lower>().solve(z - mean_);
    return log_norm_ - 0.5 * w.squaredNorm();
  }

  Point2 draw(Rng& rng) const {
    std::normal_distribution<double> g(0.0, 1.0);
    const double a = g(rng);
    const double b = g(rng);
    return mean_ + chol_ * Point2(a, b);
  }

  std::uint64_t fingerprint() const {
    auto h = detail::hash_matrix(mean_, fnv1a("gaussian2d"));
    return detail::hash_matrix(cov_, h);
  }

  const Point2& mean() const noexcept { return mean_; }
  const Eigen::Matrix2d& covariance() const noexcept { return cov_; }

private:
  Point2 mean_;
  Eigen::Matrix2d cov_;
  Eigen::Matrix2d chol_;
  double log_norm_ = 0.0;
};

struct HdrLevel {
  double alpha = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  double log_threshold = 0.0;
};

/// Gaussian KDE with bandwidth matrix H = f^2 * sample covariance, where f is
/// Silverman's factor ((4/(d+2))^(1/(d+4))) * M^(-1/(d+4)) with d = 2.
class KdeModel {
public:
  static double silverman_factor(std::size_t m) {
    constexpr double d = 2.0;
    return std::pow(4.0 / (d + 2.0), 1.0 / (d + 4.0)) *
           std::pow(static_cast<double>(m), -1.0 / (d + 4.0));
  }

  /// Fit to the rows of `points`. Collinear input is regularized with a
  /// ridge of 1e-9 * trace/2 and reported through warnings().
  static KdeModel fit(const Points2& points) {
    const auto m = static_cast<std::size_t>(points.rows());
    if (m < kMinKdePoints) throw ValidationError("insufficient points for KDE (need >= 5, got " + std::to_string(m) + ")");
    if (!points.allFinite()) throw ValidationError("KDE input contains non-finite points");
    KdeModel k;
    k.points_ = points;
    if (m < kWarnKdePoints)
      k.warnings_.push_back("KDE fitted on only " + std::to_string(m) + " points; HDR estimates are unstable");
    const Eigen::RowVector2d mean = points.colwise().mean();
    const Points2 centered = points.rowwise() - mean;
    Eigen::Matrix2d cov = centered.transpose() * centered / static_cast<double>(m - 1);
    k.factor_ = silverman_factor(m);
    Eigen::Matrix2d h = k.factor_ * k.factor_ * cov;
    Eigen::LLT<Eigen::Matrix2d> llt(h);
    const double det = h.determinant();
    if (llt.info() != Eigen::Success || !(det > 1e-12 * std::max(1e-300, h.trace() * h.trace()))) {
      const double ridge = 1e-9 * std::max(cov.trace(), 1e-12) / 2.0;
      cov += ridge * Eigen::Matrix2d::Identity();
      h = k.factor_ * k.factor_ * cov;
      llt.compute(h);
      if (llt.info() != Eigen::Success) throw ValidationError("KDE bandwidth is not positive definite");
      k.warnings_.push_back("singular KDE covariance regularized");
    }
    k.covariance_ = cov;
    k.bandwidth_ = h;
    k.chol_ = llt.matrixL();
    k.whitened_ = k.chol_.triangularView<Eigen::Lower>().solve(points.transpose()).transpose();
    k.log_norm_ = -detail::log_two_pi() - std::log(k.chol_(0, 0) * k.chol_(1, 1)) -
                  std::log(static_cast<double>(m));
    k.fingerprint_ = detail::hash_matrix(points, detail::hash_matrix(h, fnv1a("kde")));
    return k;
  }

  /// log p(z), log-sum-exp stabilized.
  double log_density(const Point2& z) const {
    const Point2 w = chol_.triangularView<Eigen::Lower>().solve(z);
    const Eigen::Index m = whitened_.rows();
    double min_sq = std::numeric_limits<double>::infinity();
    thread_local std::vector<double> sq;
    sq.resize(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) {
      const double dx = w(0) - whitened_(i, 0);
      const double dy = w(1) - whitened_(i, 1);
      const double s = dx * dx + dy * dy;
      sq[static_cast<std::size_t>(i)] = s;
      min_sq = std::min(min_sq, s);
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) acc += std::exp(-0.5 * (sq[static_cast<std::size_t>(i)] - min_sq));
    return log_norm_ - 0.5 * min_sq + std::log(acc);
  }

  /// Pick a support point uniformly and add N(0, H) noise.
  Point2 draw(Rng& rng) const {
    std::uniform_int_distribution<Eigen::Index> pick(0, points_.rows() - 1);
    std::normal_distribution<double> g(0.0, 1.0);
    const Eigen::Index i = pick(rng);
    const double a = g(rng);
    const double b = g(rng);
    return points_.row(i).transpose() + chol_ * Point2(a, b);
  }

  std::uint64_t fingerprint() const noexcept { return fingerprint_; }
  const Points2& support() const noexcept { return points_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(points_.rows()); }
  double factor() const noexcept { return factor_; }
  const Eigen::Matrix2d& bandwidth() const noexcept { return bandwidth_; }
  const Eigen::Matrix2d& covariance() const noexcept { return covariance_; }
  const Eigen::Matrix2d& bandwidth_cholesky() const noexcept { return chol_; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  const std::optional<HdrLevel>& cached_hdr() const noexcept { return hdr_; }
  void cache_hdr(HdrLevel level) { hdr_ = level; }

private:
  Points2 points_;
  Points2 whitened_;  // L^-1 z_i
  Eigen::Matrix2d covariance_ = Eigen::Matrix2d::Identity();
  Eigen::Matrix2d bandwidth_ = Eigen::Matrix2d::Identity();
  Eigen::Matrix2d chol_ = Eigen::Matrix2d::Identity();
  double factor_ = 1.0;
  double log_norm_ = 0.0;
  std::uint64_t fingerprint_ = 0;
  std::vector<std::string> warnings_;
  std::optional<HdrLevel> hdr_;
};

static_assert(PlanarDensity<KdeModel>);
static_assert(PlanarDensity<Gaussian2D>);

inline KdeModel fit_kde(const Points2& points) { return KdeModel::fit(points); }

inline double kde_logpdf(const KdeModel& model, const Point2& z) { return model.log_density(z); }

/// m draws with an explicit seed.
template <PlanarDensity D>
Points2 sample(const D& d, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  Points2 out(static_cast<Eigen::Index>(m), 2);
  for (std::size_t i = 0; i < m; ++i) out.row(static_cast<Eigen::Index>(i)) = d.draw(rng).transpose();
  return out;
}

inline Points2 kde_sample(const KdeModel& model, std::size_t m, std::uint64_t seed) {
  return sample(model, m, seed);
}

/// The model's canonical Monte Carlo draws for a report seed.
template <PlanarDensity D>
Points2 mc_draws(const D& d, std::size_t m, std::uint64_t seed) {
  return sample(d, m, derive_seed(seed, "mc", d.fingerprint()));
}

template <PlanarDensity D>
std::vector<double> log_densities(const D& d, const Points2& pts) {
  std::vector<double> out(static_cast<std::size_t>(pts.rows()));
  for (Eigen::Index i = 0; i < pts.rows(); ++i) out[static_cast<std::size_t>(i)] = d.log_density(pts.row(i).transpose());
  return out;
}

/// (1 - alpha) linear-interpolation quantile of the model's log-density over
/// its own Monte Carlo draws: the log-density level t with mass alpha above it.
template <PlanarDensity D>
double hdr_threshold(const D& d, double alpha = 0.95, std::size_t m = 2000, std::uint64_t seed = 0) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0,1)");
  if (m == 0) throw ValidationError("HDR threshold needs at least one Monte Carlo sample");
  if constexpr (std::same_as<D, KdeModel>) {
    if (const auto& c = d.cached_hdr(); c && c->alpha == alpha && c->samples == m && c->seed == seed)
      return c->log_threshold;
  }
  auto ld = log_densities(d, mc_draws(d, m, seed));
  std::sort(ld.begin(), ld.end());
  return sorted_quantile(ld, 1.0 - alpha);
}

/// Compute and store the HDR level on the model so later calls reuse it.
inline double cache_hdr_threshold(KdeModel& model, double alpha, std::size_t m, std::uint64_t seed) {
  const double t = hdr_threshold(model, alpha, m, seed);
  model.cache_hdr({alpha, m, seed, t});
  return t;
}

struct Directional {
  double probability = 0.0;  // P_{from->to}
  double containment = 0.0;  // min(1, P / alpha)
};

/// Fraction of `from`'s draws that fall inside `to`'s alpha-HDR, normalized by
/// alpha and capped at 1.
template <PlanarDensity From, PlanarDensity To>
Directional directional_containment(const From& from, const To& to, double alpha = 0.95,
                                    std::size_t m = 2000, std::uint64_t seed = 0) {
  const double t_to = hdr_threshold(to, alpha, m, seed);
  const Points2 draws = mc_draws(from, m, seed);
  std::size_t inside = 0;
  for (Eigen::Index i = 0; i < draws.rows(); ++i) inside += to.log_density(draws.row(i).transpose()) >= t_to;
  Directional out;
  out.probability = static_cast<double>(inside) / static_cast<double>(m);
  out.containment = std::min(1.0, out.probability / alpha);
  return out;
}

/// Symmetric containment: the larger of the two directional scores.
template <PlanarDensity A, PlanarDensity B>
double contain(const A& a, const B& b, double alpha = 0.95, std::size_t m = 2000, std::uint64_t seed = 0) {
  const auto ab = directional_containment(a, b, alpha, m, seed);
  const auto ba = directional_containment(b, a, alpha, m, seed);
  return std::max(ab.containment, ba.containment);
}

struct DensityConfig {
  double alpha = 0.95;
  std::size_t mc_samples = 2000;
  double novelty_threshold = 0.3;
  bool class_kde_from_predictions = false;  // fit class KDEs on all rows assigned to the class

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("density.alpha must lie in (0,1)");
    if (mc_samples < 1) throw ConfigError("density.mc_samples must be >= 1");
    if (!(novelty_threshold >= 0.0 && novelty_threshold <= 1.0))
      throw ConfigError("density.novelty_threshold must lie in [0,1]");
  }
};

/// Known-class KDEs keyed by global class index. Classes with too few points
/// are skipped and listed with a warning.
struct ClassModels {
  std::map<int, KdeModel> models;
  std::vector<int> skipped;
  std::vector<std::string> warnings;
};

inline ClassModels fit_class_models(const std::map<int, Points2>& points_by_class) {
  ClassModels out;
  for (const auto& [cls, pts] : points_by_class) {
    if (static_cast<std::size_t>(pts.rows()) < kMinKdePoints) {
      out.skipped.push_back(cls);
      out.warnings.push_back("class " + std::to_string(cls) + " skipped: " + std::to_string(pts.rows()) +
                             " points is too few for a KDE");
      continue;
    }
    auto model = KdeModel::fit(pts);
    for (const auto& w : model.warnings()) out.warnings.push_back("class " + std::to_string(cls) + ": " + w);
    out.models.emplace(cls, std::move(model));
  }
  return out;
}

struct ContainmentRow {
  int cluster = 0;                         // cluster label
  std::map<int, double> contain_by_class;  // Contain(c, k)
  int best_match_class = -1;
  double score = 0.0;  // O_c
  bool novel = false;
};

/// Best match of a cluster KDE among the known-class KDEs. Ties go to the
/// lowest class index.
inline ContainmentRow best_match(int cluster_label, KdeModel& cluster, ClassModels& classes,
                                 const DensityConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (classes.models.empty()) throw ValidationError("best_match: no known class has a usable KDE");
  ContainmentRow row;
  row.cluster = cluster_label;
  cache_hdr_threshold(cluster, cfg.alpha, cfg.mc_samples, seed);
  for (auto& [cls, model] : classes.models) {
    cache_hdr_threshold(model, cfg.alpha, cfg.mc_samples, seed);
    const double c = contain(cluster, model, cfg.alpha, cfg.mc_samples, seed);
    row.contain_by_class[cls] = c;
    if (row.best_match_class < 0 || c > row.score) {
      row.best_match_class = cls;
      row.score = c;
    }
  }
  row.novel = row.score < cfg.novelty_threshold;
  return row;
}

struct ContainmentReport {
  std::vector<ContainmentRow> rows;
  std::vector<int> classes;  // column order of the matrix
  double alpha = 0.95;
  std::size_t mc_samples = 2000;
  double novelty_threshold = 0.3;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  const ContainmentRow* find(int cluster_label) const {
    for (const auto& r : rows)
      if (r.cluster == cluster_label) return &r;
    return nullptr;
  }
};

inline void write_containment_csv(std::ostream& out, const ContainmentReport& rep) {
  out << "cluster";
  for (int k : rep.classes) out << ",class_" << k;
  out << ",best_match_class,containment_score,novel\n";
  for (const auto& r : rep.rows) {
    out << r.cluster;
    for (int k : rep.classes) {
      auto it = r.contain_by_class.find(k);
      out << ',' << (it == r.contain_by_class.end() ? std::string() : format_double(it->second));
    }
    out << ',' << r.best_match_class << ',' << format_double(r.score) << ',' << (r.novel ? "true" : "false") << '\n';
  }
}

}  // namespace bdisc
