#pragma once

// Report JSON, paper-style tables and per-trial artifact directories.

#include "plotting.hpp"
#include "protocols.hpp"

#include <fstream>
#include <iomanip>

namespace bdisc {

inline constexpr int kReportSchemaVersion = 1;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Fixed 3-decimal rendering used in the tables; "-" for an absent value.
inline std::string table_cell(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

inline nlohmann::json containment_json(const ContainmentReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json by_class = nlohmann::json::object();
    for (const auto& [k, v] : r.contain_by_class) by_class[std::to_string(k)] = v;
    rows.push_back({{"cluster", r.cluster},
                    {"contain_by_class", by_class},
                    {"best_match_class", r.best_match_class},
                    {"score", r.score},
                    {"novel", r.novel}});
  }
  return {{"alpha", rep.alpha},
          {"mc_samples", rep.mc_samples},
          {"novelty_threshold", rep.novelty_threshold},
          {"seed", rep.seed},
          {"classes", rep.classes},
          {"rows", rows}};
}

/// The Table 1 / Table 2 row of a trial.
inline nlohmann::json table_row_json(const TrialResult& r) {
  return {{"ind:name", r.name},
          {"rem_class", optional_json(r.removed_class)},
          {"disc_class", r.discovered_cluster >= 0 ? nlohmann::json(r.discovered_cluster) : nlohmann::json(nullptr)},
          {"acc", optional_json(r.accuracy)},
          {"cnt_score", optional_json(r.containment_score)}};
}

inline nlohmann::json trial_json(const TrialResult& r, const nlohmann::json& config) {
  nlohmann::json j = {{"schema_version", kReportSchemaVersion},
                      {"protocol", to_string(r.kind)},
                      {"name", r.name},
                      {"removed_class", optional_json(r.removed_class)},
                      {"discovered_cluster", r.discovered_cluster >= 0 ? nlohmann::json(r.discovered_cluster)
                                                                        : nlohmann::json(nullptr)},
                      {"free_cluster", r.free_cluster >= 0 ? nlohmann::json(r.free_cluster) : nlohmann::json(nullptr)},
                      {"accuracy", optional_json(r.accuracy)},
                      {"containment_score", optional_json(r.containment_score)},
                      {"best_match_class", optional_json(r.best_match_class)},
                      {"novel", r.novel},
                      {"table", table_row_json(r)},
                      {"config", config},
                      {"config_hash", hex64(r.config_hash)},
                      {"warnings", r.warnings},
                      {"error", optional_json(r.error)}};
  if (!r.error) {
    j["train_accuracy"] = r.train_accuracy;
    j["containment"] = containment_json(r.pool.containment);
    const auto& m = r.pool.clusters;
    std::vector<int> labels;
    for (int c = 0; c < m.k(); ++c) labels.push_back(m.global_label(c));
    j["clusters"] = {{"n_known", m.n_known}, {"n_free", m.n_free}, {"labels", labels},
                     {"iterations", m.iterations_run}, {"inertia", m.inertia}};
    j["tsne"] = {{"kl", r.pool.projection.kl}};
  }
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

template <class Fn>
void write_with(const std::filesystem::path& path, Fn&& fn) {
  std::ostringstream s;
  fn(s);
  write_text(path, s.str());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline ScatterData scatter_data(const TrialResult& r) {
  ScatterData d;
  d.coords = r.pool.projection.coords;
  d.truth = r.embeddings.hidden_truth;
  for (int a : r.pool.clusters.assignments) d.assignments.push_back(r.pool.clusters.global_label(a));
  for (std::size_t i = 0; i < r.embeddings.size(); ++i) d.labeled.push_back(r.embeddings.is_labeled(i) ? 1 : 0);
  return d;
}

inline std::string trial_tag(const TrialResult& r) {
  return r.removed_class ? std::to_string(*r.removed_class) : std::string("none");
}

inline std::string confusion_svg(const ConfusionMatrix& cm, const std::string& title) {
  std::vector<std::string> rows, cols;
  for (int t : cm.truth_classes) rows.push_back("class " + std::to_string(t));
  for (int c : cm.cluster_labels) cols.push_back(std::to_string(c));
  PlotSpec spec;
  spec.title = title;
  return confusion_heatmap(cm.counts, rows, cols, spec);
}

/// Writes every artifact of a finished trial into `dir`.
inline void write_trial_artifacts(const std::filesystem::path& dir, const TrialResult& r, const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  write_json(dir / "report.json", trial_json(r, config));
  if (r.error) return;
  const auto& emb = r.embeddings;
  write_with(dir / "confusion.csv", [&](std::ostream& o) { write_confusion_csv(o, r.confusion); });
  write_with(dir / "containment.csv", [&](std::ostream& o) { write_containment_csv(o, r.pool.containment); });
  write_with(dir / "coords.csv", [&](std::ostream& o) { write_coords_csv(o, emb.ids, r.pool.projection.coords); });
  write_with(dir / "assignments.csv", [&](std::ostream& o) { write_assignments_csv(o, r.pool.clusters, emb); });
  write_with(dir / "truth.csv", [&](std::ostream& o) {
    o << "id,truth,labeled\n";
    for (std::size_t i = 0; i < emb.size(); ++i)
      o << emb.ids[i] << ',' << (emb.hidden_truth[i] ? std::to_string(*emb.hidden_truth[i]) : std::string()) << ','
        << (emb.is_labeled(i) ? 1 : 0) << '\n';
  });
  if (!r.loss_trace.empty())
    write_with(dir / "loss.csv", [&](std::ostream& o) {
      o << "epoch,loss\n";
      for (std::size_t e = 0; e < r.loss_trace.size(); ++e) o << e + 1 << ',' << format_double(r.loss_trace[e]) << '\n';
    });
  if (r.encoder) write_json(dir / "encoder.json", checkpoint_json(*r.encoder));
  write_json(dir / "clusters.json", cluster_model_json(r.pool.clusters));

  const std::string tag = trial_tag(r);
  PlotSpec spec;
  spec.title = r.name + " (" + to_string(r.kind) + ")";
  const auto data = scatter_data(r);
  write_text(dir / ("trial_" + tag + "_panels.svg"), scatter_panels(data, spec));
  spec.border_class = r.removed_class;
  write_text(dir / ("trial_" + tag + "_grid.svg"),
             pair_grid({TrialPair{r.name, r.removed_class.value_or(-1), data}}, spec));
  write_text(dir / ("trial_" + tag + "_confusion.svg"), confusion_svg(r.confusion, r.name));
}

// ---------------------------------------------------------------------------
// Suite tables

inline void write_table_csv(std::ostream& out, const std::vector<TrialResult>& rows) {
  out << "ind:name,rem_class,disc_class,acc,cnt_score\n";
  for (const auto& r : rows)
    out << r.name << ',' << (r.removed_class ? std::to_string(*r.removed_class) : "-") << ','
        << (r.discovered_cluster >= 0 ? std::to_string(r.discovered_cluster) : "-") << ',' << table_cell(r.accuracy)
        << ',' << table_cell(r.containment_score) << '\n';
}

inline void write_suite_csv(std::ostream& out, const SuiteResult& s) {
  out << "ind:name,rem_class,disc_class,acc,cnt_score,protocol\n";
  auto emit = [&](const TrialResult& r) {
    out << r.name << ',' << optional_json(r.removed_class).dump() << ','
        << (r.discovered_cluster >= 0 ? std::to_string(r.discovered_cluster) : "null") << ','
        << (r.accuracy ? format_double(*r.accuracy) : "null") << ','
        << (r.containment_score ? format_double(*r.containment_score) : "null") << ',' << to_string(r.kind) << '\n';
  };
  for (const auto& r : s.existing) emit(r);
  for (const auto& r : s.control) emit(r);
}

inline void write_suite_artifacts(const std::filesystem::path& dir, const SuiteResult& s, const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  nlohmann::json existing = nlohmann::json::array(), control = nlohmann::json::array();
  for (const auto& r : s.existing) {
    existing.push_back(table_row_json(r));
    write_trial_artifacts(dir / "existing" / trial_tag(r), r, config);
  }
  for (const auto& r : s.control) {
    control.push_back(table_row_json(r));
    write_trial_artifacts(dir / "control" / trial_tag(r), r, config);
  }
  nlohmann::json failures = nlohmann::json::array();
  for (const auto* rows : {&s.existing, &s.control})
    for (const auto& r : *rows)
      if (r.error) failures.push_back({{"protocol", to_string(r.kind)}, {"name", r.name}, {"error", *r.error}});
  write_json(dir / "suite.json", {{"schema_version", kReportSchemaVersion},
                                  {"existing_novel", existing},
                                  {"negative_control", control},
                                  {"failures", failures},
                                  {"config", config}});
  write_with(dir / "suite.csv", [&](std::ostream& o) { write_suite_csv(o, s); });
  write_with(dir / "table_existing.csv", [&](std::ostream& o) { write_table_csv(o, s.existing); });
  write_with(dir / "table_control.csv", [&](std::ostream& o) { write_table_csv(o, s.control); });

  std::vector<TrialPair> pairs;
  for (const auto& r : s.existing)
    if (!r.error) pairs.push_back(TrialPair{r.name, r.removed_class.value_or(-1), scatter_data(r)});
  if (!pairs.empty()) {
    PlotSpec spec;
    write_text(dir / "trial_all_grid.svg", pair_grid(pairs, spec));
  }
}

// ---------------------------------------------------------------------------
// Deployment

inline nlohmann::json window_json(const WindowResult& w) {
  nlohmann::json free_rows = nlohmann::json::array();
  for (const auto& row : w.free_rows)
    free_rows.push_back({{"cluster", row.cluster}, {"best_match_class", row.best_match_class},
                         {"score", row.score}, {"novel", row.novel}});
  return {{"index", w.index}, {"start", w.start}, {"size", w.size}, {"short_window", w.short_window},
          {"novel", w.novel}, {"free_clusters", free_rows}, {"warnings", w.trial.warnings}};
}

inline void write_deployment_artifacts(const std::filesystem::path& dir, const DeploymentResult& d,
                                       const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& w : d.windows) {
    windows.push_back(window_json(w));
    const auto wdir = dir / ("window_" + std::to_string(w.index));
    auto j = trial_json(w.trial, config);
    j["window"] = window_json(w);
    std::filesystem::create_directories(wdir);
    write_json(wdir / "report.json", j);
    const auto& r = w.trial;
    write_with(wdir / "containment.csv", [&](std::ostream& o) { write_containment_csv(o, r.pool.containment); });
    write_with(wdir / "confusion.csv", [&](std::ostream& o) { write_confusion_csv(o, r.confusion); });
    write_with(wdir / "coords.csv", [&](std::ostream& o) { write_coords_csv(o, r.embeddings.ids, r.pool.projection.coords); });
    write_with(wdir / "assignments.csv", [&](std::ostream& o) { write_assignments_csv(o, r.pool.clusters, r.embeddings); });
    PlotSpec spec;
    spec.title = r.name;
    write_text(wdir / ("trial_window" + std::to_string(w.index) + "_panels.svg"), scatter_panels(scatter_data(r), spec));
  }
  write_json(dir / "deploy.json", {{"schema_version", kReportSchemaVersion},
                                   {"window", d.window},
                                   {"stride", d.stride},
                                   {"k", d.k},
                                   {"n_known", d.n_known},
                                   {"windows", windows},
                                   {"config", config}});
  if (d.encoder) write_json(dir / "encoder.json", checkpoint_json(*d.encoder));
}

// ---------------------------------------------------------------------------
// Re-plotting from stored artifacts

namespace detail {

inline std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    for (auto c : split_csv_line(line)) cells.emplace_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double cell_double(const std::string& s, const std::filesystem::path& file) {
  double v = 0;
  if (!parse_double(s, v)) throw ParseError(file.string() + ": bad number '" + s + "'", 0);
  return v;
}

}  // namespace detail

/// Rebuilds the SVGs of a trial directory from its CSV artifacts.
inline std::vector<std::filesystem::path> replot_trial(const std::filesystem::path& dir) {
  std::ifstream rin(dir / "report.json");
  if (!rin) throw Error("no report.json in " + dir.string());
  nlohmann::json report;
  try {
    report = nlohmann::json::parse(rin);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("report.json: ") + e.what());
  }
  const auto coords = detail::read_csv_rows(dir / "coords.csv");
  const auto truth = detail::read_csv_rows(dir / "truth.csv");
  const auto assign = detail::read_csv_rows(dir / "assignments.csv");
  if (truth.size() != coords.size() || assign.size() != coords.size())
    throw ValidationError("plot: coords, truth and assignments differ in row count");
  ScatterData d;
  d.coords.resize(static_cast<Eigen::Index>(coords.size()), 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (coords[i].size() != 3 || truth[i].size() != 3 || assign[i].size() != 2)
      throw ParseError("plot: malformed artifact row", i + 2);
    if (coords[i][0] != truth[i][0] || coords[i][0] != assign[i][0])
      throw ValidationError("plot: artifact rows are not aligned at row " + std::to_string(i));
    d.coords(static_cast<Eigen::Index>(i), 0) = detail::cell_double(coords[i][1], "coords.csv");
    d.coords(static_cast<Eigen::Index>(i), 1) = detail::cell_double(coords[i][2], "coords.csv");
    d.truth.push_back(truth[i][1].empty() ? std::nullopt
                                          : std::optional<int>(static_cast<int>(detail::cell_double(truth[i][1], "truth.csv"))));
    d.labeled.push_back(truth[i][2] == "1" ? 1 : 0);
    d.assignments.push_back(static_cast<int>(detail::cell_double(assign[i][1], "assignments.csv")));
  }
  const auto confusion = detail::read_csv_rows(dir / "confusion.csv");
  ConfusionMatrix cm;
  {
    std::ifstream cin(dir / "confusion.csv");
    std::string header;
    std::getline(cin, header);
    auto cells = split_csv_line(header);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      std::string_view cell = cells[c];
      if (cell.rfind("cluster_", 0) == 0) cell.remove_prefix(8);
      cm.cluster_labels.push_back(static_cast<int>(detail::cell_double(std::string(cell), "confusion.csv")));
    }
    cm.counts = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(confusion.size()),
                                      static_cast<Eigen::Index>(cm.cluster_labels.size()));
    for (std::size_t r = 0; r < confusion.size(); ++r) {
      if (confusion[r].size() != cm.cluster_labels.size() + 1) throw ParseError("confusion.csv: ragged row", r + 2);
      cm.truth_classes.push_back(static_cast<int>(detail::cell_double(confusion[r][0], "confusion.csv")));
      for (std::size_t c = 1; c < confusion[r].size(); ++c)
        cm.counts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - 1)) =
            static_cast<int>(detail::cell_double(confusion[r][c], "confusion.csv"));
    }
  }

  const std::string name = report.value("name", std::string("trial"));
  const std::string protocol = report.value("protocol", std::string());
  std::optional<int> removed;
  if (report.contains("removed_class") && report["removed_class"].is_number_integer())
    removed = report["removed_class"].get<int>();
  const std::string tag = removed ? std::to_string(*removed) : "none";

  std::vector<std::filesystem::path> written;
  PlotSpec spec;
  spec.title = name + " (" + protocol + ")";
  written.push_back(dir / ("trial_" + tag + "_panels.svg"));
  write_text(written.back(), scatter_panels(d, spec));
  spec.border_class = removed;
  written.push_back(dir / ("trial_" + tag + "_grid.svg"));
  write_text(written.back(), pair_grid({TrialPair{name, removed.value_or(-1), d}}, spec));
  if (cm.counts.size() > 0) {
    written.push_back(dir / ("trial_" + tag + "_confusion.svg"));
    write_text(written.back(), confusion_svg(cm, name));
  }
  return written;
}

}  // namespace bdisc
