#pragma once

#include "encoder.hpp"

#include <functional>
#include <limits>

namespace bdisc {

struct KMeansConfig {
  int n_free = 1;
  int max_iter = 300;
  double tol = 1e-6;
  bool normalize = false;  // L2-normalize embedding rows before clustering

  void validate() const {
    if (n_free < 0) throw ConfigError("kmeans.n_free must be >= 0");
    if (max_iter < 1) throw ConfigError("kmeans.max_iter must be >= 1");
    if (tol < 0) throw ConfigError("kmeans.tol must be >= 0");
  }
};

/// Result of label-guided K-means. Clusters 0..n_known-1 are the known
/// classes in class-map order; the remaining n_free clusters are free.
struct ClusterModel {
  Eigen::MatrixXd centroids;  // K x D
  std::vector<int> assignments;
  int n_known = 0;
  int n_free = 0;
  int iterations_run = 0;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // after every update step
  ClassMap classes;
  std::optional<int> free_label_base;  // first free-cluster label; default max class + 1

  int k() const noexcept { return n_known + n_free; }
  bool is_free(int cluster) const noexcept { return cluster >= n_known; }

  /// Global label for a cluster: its class for known clusters, and
  /// free_label_base + j for the j-th free cluster.
  int global_label(int cluster) const {
    if (cluster < n_known) return classes.global(cluster);
    const int base = free_label_base.value_or(classes.size() ? classes.globals().back() + 1 : 0);
    return base + (cluster - n_known);
  }
};

namespace detail {

inline Eigen::MatrixXd clustering_space(const EmbeddingSet& emb, bool normalize) {
  if (!normalize) return emb.vectors;
  Eigen::MatrixXd x = emb.vectors;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 0) x.row(i) /= n;
  }
  return x;
}

inline std::vector<int> pinned_clusters(const EmbeddingSet& emb) {
  std::vector<int> pinned(emb.size(), -1);
  for (std::size_t i = 0; i < emb.size(); ++i)
    if (emb.labeled_class[i]) pinned[i] = emb.classes.local(*emb.labeled_class[i]);
  return pinned;
}

// Unlabeled row maximizing squared distance to its nearest centroid among the
// first `k` rows of `centroids`; lowest row index wins ties. -1 if none.
inline Eigen::Index farthest_unlabeled(const Eigen::MatrixXd& x, const std::vector<int>& pinned,
                                       const Eigen::MatrixXd& centroids, Eigen::Index k,
                                       const std::vector<char>& excluded) {
  Eigen::Index best = -1;
  double best_d = -1.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (pinned[static_cast<std::size_t>(i)] >= 0 || excluded[static_cast<std::size_t>(i)]) continue;
    double nearest = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < k; ++c)
      nearest = std::min(nearest, (x.row(i) - centroids.row(c)).squaredNorm());
    if (nearest > best_d) {
      best_d = nearest;
      best = i;
    }
  }
  return best;
}

inline double inertia_of(const Eigen::MatrixXd& x, const Eigen::MatrixXd& centroids,
                         const std::vector<int>& assign) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    s += (x.row(i) - centroids.row(assign[static_cast<std::size_t>(i)])).squaredNorm();
  return s;
}

}  // namespace detail

/// Known-class centroids are the means of the labeled rows; free centroids
/// are placed by the sequential farthest-point rule over unlabeled rows.
inline Eigen::MatrixXd init_centroids(const EmbeddingSet& emb, int n_free, bool normalize = false) {
  if (n_free < 0) throw ConfigError("n_free must be >= 0");
  const auto x = detail::clustering_space(emb, normalize);
  const auto pinned = detail::pinned_clusters(emb);
  const auto n_known = static_cast<Eigen::Index>(emb.classes.size());
  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(n_known + n_free, x.cols());
  std::vector<std::size_t> counts(static_cast<std::size_t>(n_known), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int c = pinned[static_cast<std::size_t>(i)];
    if (c < 0) continue;
    centroids.row(c) += x.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Eigen::Index c = 0; c < n_known; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw ValidationError("class " + std::to_string(emb.classes.global(static_cast<int>(c))) +
                            " has no labeled embeddings");
    centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  const auto n_unlabeled = static_cast<int>(std::count(pinned.begin(), pinned.end(), -1));
  if (n_free > n_unlabeled)
    throw ValidationError("n_free (" + std::to_string(n_free) + ") exceeds the number of unlabeled points (" +
                          std::to_string(n_unlabeled) + ")");
  std::vector<char> used(emb.size(), 0);
  for (int f = 0; f < n_free; ++f) {
    const auto row = detail::farthest_unlabeled(x, pinned, centroids, n_known + f, used);
    used[static_cast<std::size_t>(row)] = 1;
    centroids.row(n_known + f) = x.row(row);
  }
  return centroids;
}

using KMeansObserver = std::function<void(int iteration, const std::vector<int>& assignments,
                                          const Eigen::MatrixXd& centroids, double inertia)>;

/// Label-guided K-means. Labeled rows stay pinned to their class cluster;
/// unlabeled rows go to the nearest centroid (ties to the lowest index).
/// Deterministic; no randomness.
inline ClusterModel ss_kmeans(const EmbeddingSet& emb, const KMeansConfig& cfg,
                              const KMeansObserver& observer = {}) {
  cfg.validate();
  const auto x = detail::clustering_space(emb, cfg.normalize);
  const auto pinned = detail::pinned_clusters(emb);
  ClusterModel model;
  model.classes = emb.classes;
  model.n_known = static_cast<int>(emb.classes.size());
  model.n_free = cfg.n_free;
  model.centroids = init_centroids(emb, cfg.n_free, cfg.normalize);
  const Eigen::Index k = model.centroids.rows();
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<int> assign(n, -1);

  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    // assignment
    std::vector<int> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (pinned[i] >= 0) {
        next[i] = pinned[i];
        continue;
      }
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < k; ++c) {
        const double d = (x.row(static_cast<Eigen::Index>(i)) - model.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      next[i] = best;
    }
    const bool unchanged = next == assign;
    assign = std::move(next);

    // update, fixed-order sums
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(assign[i]) += x.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    Eigen::MatrixXd updated = model.centroids;
    std::vector<char> reseeded(n, 0);
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        updated.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty cluster: re-seed at the unlabeled row farthest from its own centroid.
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (pinned[i] >= 0 || reseeded[i]) continue;
        const double d = (x.row(static_cast<Eigen::Index>(i)) - model.centroids.row(assign[i])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = static_cast<Eigen::Index>(i);
        }
      }
      if (far >= 0) {
        reseeded[static_cast<std::size_t>(far)] = 1;
        updated.row(c) = x.row(far);
      }
    }
    const double shift = (updated - model.centroids).cwiseAbs().maxCoeff();
    model.centroids = std::move(updated);
    model.inertia = detail::inertia_of(x, model.centroids, assign);
    model.inertia_trace.push_back(model.inertia);
    model.iterations_run = iter + 1;
    if (observer) observer(iter, assign, model.centroids, model.inertia);
    if (unchanged || shift < cfg.tol) break;
  }
  model.assignments = std::move(assign);
  return model;
}

/// Fraction of the withheld class's unlabeled rows that landed in a free
/// cluster (the free cluster holding most of them when there are several).
/// Absent when the trial has no withheld class.
inline std::optional<double> withheld_accuracy(const ClusterModel& model, const EmbeddingSet& emb,
                                               std::optional<int> withheld_class) {
  if (!withheld_class) return std::nullopt;
  std::vector<std::size_t> per_free(static_cast<std::size_t>(model.n_free), 0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < emb.size(); ++i) {
    if (emb.is_labeled(i) || emb.hidden_truth[i] != withheld_class) continue;
    ++total;
    const int c = model.assignments[i];
    if (model.is_free(c)) ++per_free[static_cast<std::size_t>(c - model.n_known)];
  }
  if (total == 0) throw ValidationError("withheld class has no unlabeled rows");
  const std::size_t best = per_free.empty() ? 0 : *std::max_element(per_free.begin(), per_free.end());
  return static_cast<double>(best) / static_cast<double>(total);
}

/// Truth x cluster counts over the unlabeled rows with known truth.
struct ConfusionMatrix {
  std::vector<int> truth_classes;  // row labels (global class indices, ascending)
  std::vector<int> cluster_labels;  // column labels (global cluster labels)
  Eigen::MatrixXi counts;
};

inline ConfusionMatrix confusion_matrix(const ClusterModel& model, const EmbeddingSet& emb) {
  std::set<int> truths;
  for (std::size_t i = 0; i < emb.size(); ++i)
    if (!emb.is_labeled(i) && emb.hidden_truth[i]) truths.insert(*emb.hidden_truth[i]);
  ConfusionMatrix cm;
  cm.truth_classes.assign(truths.begin(), truths.end());
  for (int c = 0; c < model.k(); ++c) cm.cluster_labels.push_back(model.global_label(c));
  cm.counts = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(cm.truth_classes.size()), model.k());
  for (std::size_t i = 0; i < emb.size(); ++i) {
    if (emb.is_labeled(i) || !emb.hidden_truth[i]) continue;
    const auto row = std::lower_bound(cm.truth_classes.begin(), cm.truth_classes.end(), *emb.hidden_truth[i]) -
                     cm.truth_classes.begin();
    cm.counts(row, model.assignments[i]) += 1;
  }
  return cm;
}

inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
  out << "truth";
  for (int c : cm.cluster_labels) out << ",cluster_" << c;
  out << '\n';
  for (std::size_t r = 0; r < cm.truth_classes.size(); ++r) {
    out << cm.truth_classes[r];
    for (Eigen::Index c = 0; c < cm.counts.cols(); ++c) out << ',' << cm.counts(static_cast<Eigen::Index>(r), c);
    out << '\n';
  }
}

inline void write_assignments_csv(std::ostream& out, const ClusterModel& model, const EmbeddingSet& emb) {
  out << "id,cluster\n";
  for (std::size_t i = 0; i < emb.size(); ++i) out << emb.ids[i] << ',' << model.global_label(model.assignments[i]) << '\n';
}

inline nlohmann::json cluster_model_json(const ClusterModel& m) {
  nlohmann::json centroids = nlohmann::json::array();
  for (Eigen::Index c = 0; c < m.centroids.rows(); ++c) {
    std::vector<double> row(static_cast<std::size_t>(m.centroids.cols()));
    for (Eigen::Index j = 0; j < m.centroids.cols(); ++j) row[static_cast<std::size_t>(j)] = m.centroids(c, j);
    centroids.push_back(row);
  }
  std::vector<int> labels;
  for (int c = 0; c < m.k(); ++c) labels.push_back(m.global_label(c));
  return {{"n_known", m.n_known},   {"n_free", m.n_free},
          {"class_map", m.classes.globals()}, {"cluster_labels", labels},
          {"iterations", m.iterations_run}, {"inertia", m.inertia}, {"inertia_trace", m.inertia_trace},
          {"centroids", centroids}};
}

}  // namespace bdisc
