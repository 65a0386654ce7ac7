#pragma once

// End-to-end experiments: existing-novel discovery (one class withheld from
// supervision), negative control (unlabeled pool of known classes only),
// sliding-window deployment, and the per-class suite.

#include "clustering.hpp"
#include "data.hpp"
#include "density.hpp"
#include "encoder.hpp"
#include "json_util.hpp"
#include "tsne.hpp"

#include <mutex>
#include <thread>

namespace bdisc {

struct TrialConfig {
  std::optional<int> withheld;
  double fraction_labeled = 0.5;
  EncoderConfig encoder;
  KMeansConfig kmeans;
  TsneConfig tsne;
  DensityConfig density;
  std::uint64_t seed = 0;

  void validate() const {
    SplitSpec{withheld, seed, fraction_labeled}.validate();
    encoder.validate();
    kmeans.validate();
    tsne.validate();
    density.validate();
  }
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"conv_layers", c.conv_layers},     {"channels_per_layer", c.channels_per_layer},
          {"kernel", c.kernel},               {"padding", c.padding},
          {"dropout_rate", c.dropout_rate},   {"epochs", c.epochs},
          {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},                 {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},   {"batch_size", c.batch_size},
          {"bn_momentum", c.bn_momentum},     {"bn_epsilon", c.bn_epsilon}};
}

inline nlohmann::json to_json(const KMeansConfig& c) {
  return {{"n_free", c.n_free}, {"max_iter", c.max_iter}, {"tol", c.tol}, {"normalize", c.normalize}};
}

inline nlohmann::json to_json(const TsneConfig& c) {
  return {{"perplexity", c.perplexity},
          {"n_iter", c.n_iter},
          {"early_exaggeration", c.early_exaggeration},
          {"exaggeration_iters", c.exaggeration_iters},
          {"learning_rate", c.learning_rate},
          {"momentum_early", c.momentum_early},
          {"momentum_late", c.momentum_late},
          {"min_gain", c.min_gain},
          {"init", to_string(c.init)},
          {"init_scale", c.init_scale},
          {"search_tol", c.search_tol},
          {"search_max_steps", c.search_max_steps},
          {"kl_every", c.kl_every}};
}

inline nlohmann::json to_json(const DensityConfig& c) {
  return {{"alpha", c.alpha},
          {"mc_samples", c.mc_samples},
          {"novelty_threshold", c.novelty_threshold},
          {"class_kde_from_predictions", c.class_kde_from_predictions}};
}

/// Stage configuration of a trial. The withheld class is trial bookkeeping
/// and kept out of this object, so paired discovery / control trials hash equal.
inline nlohmann::json stage_config_json(const TrialConfig& c) {
  return {{"fraction_labeled", c.fraction_labeled},
          {"encoder", to_json(c.encoder)},
          {"kmeans", to_json(c.kmeans)},
          {"tsne", to_json(c.tsne)},
          {"density", to_json(c.density)},
          {"seed", c.seed}};
}

inline std::uint64_t config_hash(const TrialConfig& c) { return fnv1a(stage_config_json(c).dump()); }

enum class TrialKind { existing_novel, negative_control, deployment_window };

inline const char* to_string(TrialKind k) {
  switch (k) {
    case TrialKind::existing_novel: return "existing_novel";
    case TrialKind::negative_control: return "negative_control";
    case TrialKind::deployment_window: return "deployment_window";
  }
  return "unknown";
}

/// Clustering, projection and containment for one pool of embeddings.
struct PoolAnalysis {
  ClusterModel clusters;
  Projection2D projection;
  ContainmentReport containment;
  std::vector<std::string> warnings;
};

struct TrialResult {
  TrialKind kind = TrialKind::existing_novel;
  std::string name;  // "ind:name"
  std::optional<int> removed_class;
  int discovered_cluster = -1;  // cluster label reported in the table
  int free_cluster = -1;        // cluster label of the scored free cluster
  std::optional<double> accuracy;
  std::optional<double> containment_score;
  std::optional<int> best_match_class;
  bool novel = false;
  ConfusionMatrix confusion;
  EmbeddingSet embeddings;
  PoolAnalysis pool;
  std::vector<double> loss_trace;
  double train_accuracy = 0.0;
  std::optional<EncoderParams> encoder;
  std::uint64_t config_hash = 0;
  std::vector<std::string> warnings;
  std::optional<std::string> error;
};

namespace detail {

inline std::uint64_t stage_seed(const TrialConfig& cfg, std::string_view stage) {
  return derive_seed(cfg.seed, stage);
}

inline Points2 gather_points(const Eigen::MatrixX2d& coords, const std::vector<std::size_t>& rows) {
  Points2 p(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = coords.row(static_cast<Eigen::Index>(rows[i]));
  return p;
}

inline int max_declared_class(const Dataset& d) {
  return d.class_names.empty() ? -1 : d.class_names.rbegin()->first;
}

}  // namespace detail

/// Cluster a pool, project it with t-SNE, fit KDEs, and score `score_clusters`
/// (cluster indices; empty = every cluster) against the known classes.
inline PoolAnalysis analyze_pool(const EmbeddingSet& emb, const TrialConfig& cfg, int free_label_base,
                                 std::vector<int> score_clusters = {}) {
  PoolAnalysis out;
  try {
    out.clusters = ss_kmeans(emb, cfg.kmeans);
  } catch (const Error& e) {
    throw StageError("clustering", e.what());
  }
  out.clusters.free_label_base = free_label_base;
  auto tsne_cfg = cfg.tsne;
  tsne_cfg.seed = detail::stage_seed(cfg, "tsne");
  try {
    out.projection = tsne_fit(emb.vectors, tsne_cfg);
  } catch (const Error& e) {
    throw StageError("projection", e.what());
  }
  const auto& coords = out.projection.coords;
  const auto& model = out.clusters;

  try {
    std::map<int, std::vector<std::size_t>> class_rows;
    for (int g : emb.classes.globals()) class_rows[g];
    for (std::size_t i = 0; i < emb.size(); ++i) {
      if (cfg.density.class_kde_from_predictions) {
        const int c = model.assignments[i];
        if (!model.is_free(c)) class_rows[emb.classes.global(c)].push_back(i);
      } else if (emb.labeled_class[i]) {
        class_rows[*emb.labeled_class[i]].push_back(i);
      }
    }
    std::map<int, Points2> class_points;
    for (const auto& [g, rows] : class_rows) class_points[g] = detail::gather_points(coords, rows);
    auto classes = fit_class_models(class_points);
    out.warnings.insert(out.warnings.end(), classes.warnings.begin(), classes.warnings.end());

    ContainmentReport& rep = out.containment;
    rep.alpha = cfg.density.alpha;
    rep.mc_samples = cfg.density.mc_samples;
    rep.novelty_threshold = cfg.density.novelty_threshold;
    rep.seed = detail::stage_seed(cfg, "density");
    for (const auto& [g, _] : classes.models) rep.classes.push_back(g);

    if (score_clusters.empty())
      for (int c = 0; c < model.k(); ++c) score_clusters.push_back(c);
    for (int c : score_clusters) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < emb.size(); ++i)
        if (model.assignments[i] == c) rows.push_back(i);
      const int label = model.global_label(c);
      if (rows.size() < kMinKdePoints) {
        out.warnings.push_back("cluster " + std::to_string(label) + " has " + std::to_string(rows.size()) +
                               " points; too few for a KDE, not scored");
        continue;
      }
      auto cluster_kde = KdeModel::fit(detail::gather_points(coords, rows));
      for (const auto& w : cluster_kde.warnings()) out.warnings.push_back("cluster " + std::to_string(label) + ": " + w);
      rep.rows.push_back(best_match(label, cluster_kde, classes, cfg.density, rep.seed));
    }
    rep.warnings = out.warnings;
  } catch (const Error& e) {
    throw StageError("density", e.what());
  }
  return out;
}

namespace detail {

// Free cluster reported for the trial: the one holding most withheld rows
// when a withheld class is present, otherwise the lowest-scoring one.
inline int pick_free_cluster(const TrialResult& r, std::optional<int> withheld) {
  const auto& m = r.pool.clusters;
  if (m.n_free == 0) return -1;
  if (m.n_free == 1) return m.n_known;
  int best = m.n_known;
  if (withheld) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(m.n_free), 0);
    for (std::size_t i = 0; i < r.embeddings.size(); ++i)
      if (!r.embeddings.is_labeled(i) && r.embeddings.hidden_truth[i] == withheld && m.is_free(m.assignments[i]))
        ++counts[static_cast<std::size_t>(m.assignments[i] - m.n_known)];
    best = m.n_known + static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  } else {
    double lowest = 2.0;
    for (int c = m.n_known; c < m.k(); ++c)
      if (const auto* row = r.pool.containment.find(m.global_label(c)); row && row->score < lowest) {
        lowest = row->score;
        best = c;
      }
  }
  return best;
}

inline void fill_summary(TrialResult& r, std::optional<int> withheld) {
  const auto& m = r.pool.clusters;
  const int free_c = pick_free_cluster(r, withheld);
  if (free_c < 0) return;
  r.free_cluster = m.global_label(free_c);
  r.discovered_cluster = (r.kind == TrialKind::existing_novel && withheld) ? *withheld : r.free_cluster;
  if (const auto* row = r.pool.containment.find(r.free_cluster)) {
    r.containment_score = row->score;
    r.best_match_class = row->best_match_class;
    r.novel = row->novel;
  }
}

inline TrialResult run_split_trial(const Dataset& data, const TrialConfig& cfg, TrialKind kind) {
  cfg.validate();
  TrialResult r;
  r.kind = kind;
  r.removed_class = cfg.withheld;
  r.config_hash = config_hash(cfg);
  r.name = cfg.withheld ? std::to_string(*cfg.withheld) + ":" + data.class_name(*cfg.withheld) : "none";

  DiscoverySplit split;
  try {
    split = split_discovery(data, SplitSpec{cfg.withheld, stage_seed(cfg, "split"), cfg.fraction_labeled});
    split.labeled = preprocess_if_needed(split.labeled);
    split.unlabeled = preprocess_if_needed(split.unlabeled);
  } catch (const Error& e) {
    throw StageError("data", e.what());
  }
  if (cfg.withheld) {
    for (const auto& s : split.labeled.snippets)
      if (s.label == cfg.withheld) throw StageError("data", "withheld class leaked into the labeled set");
  }
  if (kind == TrialKind::negative_control && cfg.withheld) {
    Dataset known = split.unlabeled;
    known.snippets.clear();
    std::vector<std::optional<int>> truth;
    for (std::size_t i = 0; i < split.unlabeled.size(); ++i) {
      if (split.truth[i] == cfg.withheld) continue;
      known.snippets.push_back(split.unlabeled.snippets[i]);
      truth.push_back(split.truth[i]);
    }
    split.unlabeled = std::move(known);
    split.truth = std::move(truth);
  }

  auto enc_cfg = cfg.encoder;
  enc_cfg.seed = stage_seed(cfg, "encoder");
  TrainResult trained;
  try {
    trained = train(split.labeled, enc_cfg);
  } catch (const Error& e) {
    throw StageError("encoder", e.what());
  }
  r.loss_trace = trained.loss_trace;
  r.train_accuracy = training_accuracy(trained.params, split.labeled);

  r.embeddings = embed(trained.params, split.labeled);
  auto unl = embed(trained.params, split.unlabeled);
  unl.hidden_truth = split.truth;
  r.embeddings.append(unl);
  r.encoder = std::move(trained.params);

  r.pool = analyze_pool(r.embeddings, cfg, max_declared_class(data) + 1);
  r.warnings = r.pool.warnings;
  fill_summary(r, kind == TrialKind::existing_novel ? cfg.withheld : std::nullopt);
  if (kind == TrialKind::existing_novel) r.accuracy = withheld_accuracy(r.pool.clusters, r.embeddings, cfg.withheld);
  r.confusion = confusion_matrix(r.pool.clusters, r.embeddings);
  return r;
}

}  // namespace detail

/// Withhold one class from supervision and look for it in the unlabeled pool.
inline TrialResult run_existing_discovery(const Dataset& data, const TrialConfig& cfg) {
  if (!cfg.withheld) throw ConfigError("existing-novel requires withheld class");
  if (cfg.kmeans.n_free < 1) throw ConfigError("existing-novel discovery requires a free cluster");
  return detail::run_split_trial(data, cfg, TrialKind::existing_novel);
}

/// Same pipeline with an unlabeled pool of known classes only. When a
/// withheld class is set it is removed from the trial entirely, mirroring
/// the split of the matching discovery trial.
inline TrialResult run_negative_control(const Dataset& data, const TrialConfig& cfg) {
  if (cfg.kmeans.n_free < 1) throw ConfigError("negative control requires a free cluster");
  return detail::run_split_trial(data, cfg, TrialKind::negative_control);
}

// ---------------------------------------------------------------------------
// Deployment

struct DeployConfig {
  TrialConfig trial;
  std::size_t window = 100;
  std::size_t stride = 100;
  std::optional<int> k;  // total clusters; default n_known + 1

  void validate() const {
    trial.validate();
    if (window < 1) throw ConfigError("deploy.window must be >= 1");
    if (stride < 1) throw ConfigError("deploy.stride must be >= 1");
  }
};

struct WindowResult {
  std::size_t index = 0;
  std::size_t start = 0;
  std::size_t size = 0;
  bool short_window = false;
  TrialResult trial;
  std::vector<ContainmentRow> free_rows;  // one per scored free cluster
  bool novel = false;
};

struct DeploymentResult {
  int n_known = 0;
  int k = 0;
  std::size_t window = 0;
  std::size_t stride = 0;
  std::vector<double> loss_trace;
  std::optional<EncoderParams> encoder;
  std::vector<WindowResult> windows;
};

/// Train once on half of the labeled data, then cluster and score each
/// window of the stream together with the other (unlabeled) half. Labels on
/// stream snippets are treated as hidden truth.
inline DeploymentResult run_deployment(const Dataset& labeled_data, const Dataset& stream, const DeployConfig& cfg) {
  cfg.validate();
  DeploymentResult out;
  out.window = cfg.window;
  out.stride = cfg.stride;
  if (stream.size() == 0) return out;

  const auto& tc = cfg.trial;
  DiscoverySplit split;
  try {
    // known classes are the ones with labeled rows; the novel class may stay declared for the stream
    Dataset known = labeled_data;
    for (const auto& [cls, n] : labeled_data.class_counts())
      if (n == 0) known.class_names.erase(cls);
    split = split_discovery(known, SplitSpec{std::nullopt, detail::stage_seed(tc, "split"), tc.fraction_labeled});
    split.labeled = preprocess_if_needed(split.labeled);
    split.unlabeled = preprocess_if_needed(split.unlabeled);
  } catch (const Error& e) {
    throw StageError("data", e.what());
  }
  Dataset pre_stream;
  try {
    pre_stream = preprocess_if_needed(stream);
  } catch (const Error& e) {
    throw StageError("data", e.what());
  }
  auto enc_cfg = tc.encoder;
  enc_cfg.seed = detail::stage_seed(tc, "encoder");
  TrainResult trained;
  try {
    trained = train(split.labeled, enc_cfg);
  } catch (const Error& e) {
    throw StageError("encoder", e.what());
  }
  out.n_known = static_cast<int>(trained.params.classes.size());
  out.k = cfg.k.value_or(out.n_known + 1);
  if (out.k <= out.n_known)
    throw ConfigError("deploy: k (" + std::to_string(out.k) + ") must exceed the number of known classes (" +
                      std::to_string(out.n_known) + ")");
  out.loss_trace = trained.loss_trace;

  EmbeddingSet base = embed(trained.params, split.labeled);
  auto known_pool = embed(trained.params, split.unlabeled);
  known_pool.hidden_truth = split.truth;
  base.append(known_pool);

  Dataset stripped = pre_stream;
  std::vector<std::optional<int>> stream_truth;
  for (auto& s : stripped.snippets) {
    stream_truth.push_back(s.label);
    s.label.reset();
  }
  const EmbeddingSet stream_emb = [&] {
    auto e = embed(trained.params, stripped);
    e.hidden_truth = stream_truth;
    return e;
  }();

  TrialConfig wcfg = tc;
  wcfg.kmeans.n_free = out.k - out.n_known;
  int free_base = detail::max_declared_class(labeled_data) + 1;
  for (const auto& [cls, _] : stream.class_names) free_base = std::max(free_base, cls + 1);

  std::size_t index = 0;
  for (std::size_t start = 0; start < stream.size(); start += cfg.stride, ++index) {
    WindowResult w;
    w.index = index;
    w.start = start;
    w.size = std::min(cfg.window, stream.size() - start);
    w.short_window = w.size < cfg.window;
    EmbeddingSet pool = base;
    EmbeddingSet win;
    win.classes = stream_emb.classes;
    win.vectors = stream_emb.vectors.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(w.size));
    for (std::size_t i = start; i < start + w.size; ++i) {
      win.ids.push_back(stream_emb.ids[i]);
      win.labeled_class.push_back(std::nullopt);
      win.hidden_truth.push_back(stream_emb.hidden_truth[i]);
    }
    pool.append(win);

    auto& r = w.trial;
    r.kind = TrialKind::deployment_window;
    r.name = "window:" + std::to_string(index);
    r.config_hash = config_hash(wcfg);
    r.embeddings = std::move(pool);
    std::vector<int> free_clusters;
    for (int c = out.n_known; c < out.k; ++c) free_clusters.push_back(c);
    r.pool = analyze_pool(r.embeddings, wcfg, free_base, free_clusters);
    r.warnings = r.pool.warnings;
    if (w.short_window)
      r.warnings.push_back("window " + std::to_string(index) + " has only " + std::to_string(w.size) + " segments");
    detail::fill_summary(r, std::nullopt);
    r.confusion = confusion_matrix(r.pool.clusters, r.embeddings);
    for (const auto& row : r.pool.containment.rows) {
      w.free_rows.push_back(row);
      w.novel = w.novel || row.novel;
    }
    r.novel = w.novel;
    if (start + cfg.window >= stream.size()) {
      out.windows.push_back(std::move(w));
      break;
    }
    out.windows.push_back(std::move(w));
  }
  out.encoder = std::move(trained.params);
  return out;
}

// ---------------------------------------------------------------------------
// Suite

struct SuiteResult {
  std::vector<TrialResult> existing;
  std::vector<TrialResult> control;
};

/// One discovery and one negative-control trial per class with samples.
/// Trial failures are recorded on the row and the suite continues.
inline SuiteResult run_suite(const Dataset& data, const TrialConfig& base, int jobs = 1) {
  std::vector<int> classes;
  for (const auto& [cls, n] : data.class_counts())
    if (n > 0) classes.push_back(cls);
  if (classes.size() < 3) throw ValidationError("suite needs a dataset with >= 3 classes");

  SuiteResult out;
  out.existing.resize(classes.size());
  out.control.resize(classes.size());
  struct Job {
    std::size_t slot;
    bool control;
  };
  std::vector<Job> work;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    work.push_back({i, false});
    work.push_back({i, true});
  }
  auto run_one = [&](const Job& job) {
    TrialConfig cfg = base;
    cfg.withheld = classes[job.slot];
    cfg.seed = derive_seed(base.seed, "trial", static_cast<std::uint64_t>(classes[job.slot]));
    TrialResult r;
    try {
      r = job.control ? run_negative_control(data, cfg) : run_existing_discovery(data, cfg);
    } catch (const std::exception& e) {
      r.kind = job.control ? TrialKind::negative_control : TrialKind::existing_novel;
      r.removed_class = cfg.withheld;
      r.name = std::to_string(*cfg.withheld) + ":" + data.class_name(*cfg.withheld);
      r.config_hash = config_hash(cfg);
      r.error = e.what();
    }
    (job.control ? out.control : out.existing)[job.slot] = std::move(r);
  };
  const auto n_threads = static_cast<std::size_t>(std::max(1, jobs));
  if (n_threads == 1) {
    for (const auto& job : work) run_one(job);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(n_threads, work.size()); ++t)
      pool.emplace_back([&] {
        while (true) {
          std::size_t idx;
          {
            std::lock_guard lock(mu);
            if (next >= work.size()) return;
            idx = next++;
          }
          run_one(work[idx]);
        }
      });
    for (auto& th : pool) th.join();
  }
  return out;
}

}  // namespace bdisc
