#pragma once

#include "common.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace bdisc {

inline constexpr int kChannels = 4;
inline constexpr int kTimesteps = 20;
inline constexpr int kValuesPerSnippet = kChannels * kTimesteps;

// Channel order within a snippet.
enum Channel : int { kAccelX = 0, kAccelY = 1, kAccelZ = 2, kSpeed = 3 };

inline constexpr double kAccelClip = 2.0;   // g
inline constexpr double kSpeedScale = 22.0;  // m/s

/// Rows are channels, columns are timesteps.
using SnippetValues = Eigen::Matrix<double, kChannels, kTimesteps, Eigen::RowMajor>;

struct MotionSnippet {
  std::string id;
  SnippetValues values = SnippetValues::Zero();
  std::optional<int> label;
};

/// A collection of snippets plus the declared class index set. Class indices
/// need not be contiguous.
struct Dataset {
  std::vector<MotionSnippet> snippets;
  std::map<int, std::string> class_names;
  bool preprocessed = false;

  std::size_t size() const noexcept { return snippets.size(); }

  std::vector<int> class_indices() const {
    std::vector<int> out;
    for (const auto& [k, _] : class_names) out.push_back(k);
    return out;
  }

  bool has_class(int c) const { return class_names.count(c) > 0; }

  std::string class_name(int c) const {
    auto it = class_names.find(c);
    return it == class_names.end() ? "class" + std::to_string(c) : it->second;
  }

  /// Labeled count per declared class (zero entries included).
  std::map<int, std::size_t> class_counts() const {
    std::map<int, std::size_t> counts;
    for (const auto& [k, _] : class_names) counts[k] = 0;
    for (const auto& s : snippets)
      if (s.label) ++counts[*s.label];
    return counts;
  }

  void validate() const {
    std::set<std::string> ids;
    for (std::size_t i = 0; i < snippets.size(); ++i) {
      const auto& s = snippets[i];
      if (s.label && !has_class(*s.label))
        throw ValidationError("snippet '" + s.id + "' has undeclared class index " +
                              std::to_string(*s.label));
      if (!s.values.allFinite())
        throw ValidationError("snippet '" + s.id + "' contains non-finite values");
      if (!ids.insert(s.id).second) throw ValidationError("duplicate snippet id '" + s.id + "'");
    }
  }
};

inline std::string csv_header() {
  static const char* prefixes[kChannels] = {"ax", "ay", "az", "sp"};
  std::string h = "id,label";
  for (int c = 0; c < kChannels; ++c)
    for (int t = 0; t < kTimesteps; ++t) h += "," + std::string(prefixes[c]) + "_" + std::to_string(t);
  return h;
}

/// Sidecar metadata path for a snippet CSV: `data.csv` -> `data.meta.json`.
inline std::filesystem::path metadata_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".meta.json");
  return p;
}

inline nlohmann::json metadata_to_json(const Dataset& d) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [k, name] : d.class_names) classes[std::to_string(k)] = name;
  return {{"classes", classes}, {"preprocessed", d.preprocessed}};
}

inline void metadata_from_json(const nlohmann::json& j, Dataset& d) {
  if (!j.is_object() || !j.contains("classes") || !j["classes"].is_object())
    throw ParseError("metadata: expected object with 'classes' map");
  d.class_names.clear();
  for (const auto& [key, value] : j["classes"].items()) {
    double idx = 0;
    if (!parse_double(key, idx) || idx != std::floor(idx) || idx < 0)
      throw ParseError("metadata: class key '" + key + "' is not a non-negative integer");
    d.class_names[static_cast<int>(idx)] = value.get<std::string>();
  }
  d.preprocessed = j.value("preprocessed", false);
}

/// Parse the wide snippet CSV from a stream. `classes` declares the class set;
/// when empty, the set is inferred from the labels present.
inline Dataset parse_csv(std::istream& in, const std::map<int, std::string>& classes = {},
                         bool preprocessed = false) {
  Dataset d;
  d.class_names = classes;
  d.preprocessed = preprocessed;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file: missing header row", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (line != csv_header()) {
    const auto cols = split_csv_line(line).size();
    throw ParseError("header does not match the snippet format (got " + std::to_string(cols) +
                         " columns, expected " + std::to_string(kValuesPerSnippet + 2) + ")",
                     1);
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != static_cast<std::size_t>(kValuesPerSnippet + 2))
      throw ParseError("expected " + std::to_string(kValuesPerSnippet) + " values, got " +
                           std::to_string(cells.size() < 2 ? 0 : cells.size() - 2),
                       lineno);
    MotionSnippet s;
    s.id = std::string(cells[0]);
    if (s.id.empty()) throw ParseError("empty id", lineno);
    double label = 0;
    if (!parse_double(cells[1], label) || label != std::floor(label) || label < -1)
      throw ParseError("label '" + std::string(cells[1]) + "' is not an integer >= -1", lineno);
    if (label >= 0) s.label = static_cast<int>(label);
    for (int i = 0; i < kValuesPerSnippet; ++i) {
      double v = 0;
      if (!parse_double(cells[i + 2], v))
        throw ParseError("non-numeric cell '" + std::string(cells[i + 2]) + "' in column " +
                             std::to_string(i + 3),
                         lineno);
      s.values(i / kTimesteps, i % kTimesteps) = v;
    }
    d.snippets.push_back(std::move(s));
  }
  if (classes.empty()) {
    for (const auto& s : d.snippets)
      if (s.label) d.class_names.emplace(*s.label, "class" + std::to_string(*s.label));
  }
  d.validate();
  return d;
}

/// Load a snippet CSV and, when present, its metadata sidecar.
inline Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  Dataset meta;
  const auto mp = metadata_path(path);
  if (std::filesystem::exists(mp)) {
    std::ifstream min(mp);
    nlohmann::json j;
    try {
      min >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("metadata '" + mp.string() + "': " + e.what());
    }
    metadata_from_json(j, meta);
  }
  return parse_csv(in, meta.class_names, meta.preprocessed);
}

inline void write_csv(std::ostream& out, const Dataset& d) {
  out << csv_header() << '\n';
  for (const auto& s : d.snippets) {
    out << s.id << ',' << (s.label ? *s.label : -1);
    for (int c = 0; c < kChannels; ++c)
      for (int t = 0; t < kTimesteps; ++t) out << ',' << format_double(s.values(c, t));
    out << '\n';
  }
}

/// Writes the CSV and its metadata sidecar.
inline void save_csv(const std::filesystem::path& path, const Dataset& d) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  write_csv(out, d);
  std::ofstream meta(metadata_path(path));
  meta << metadata_to_json(d).dump(2) << '\n';
}

/// Clip the acceleration channels to [-2, 2] g and scale speed by 1/22.
/// Must be applied exactly once; a second application is an error.
inline Dataset preprocess(const Dataset& d) {
  if (d.preprocessed) throw ValidationError("dataset is already preprocessed");
  Dataset out = d;
  for (auto& s : out.snippets) {
    if (!s.values.allFinite())
      throw ValidationError("snippet '" + s.id + "' contains non-finite values");
    s.values.topRows<3>() = s.values.topRows<3>().cwiseMax(-kAccelClip).cwiseMin(kAccelClip);
    s.values.row(kSpeed) /= kSpeedScale;
  }
  out.preprocessed = true;
  return out;
}

inline Dataset preprocess_if_needed(const Dataset& d) {
  return d.preprocessed ? d : preprocess(d);
}

/// Parameters of a discovery split.
struct SplitSpec {
  std::optional<int> withheld_class;
  std::uint64_t seed = 0;
  double fraction_labeled = 0.5;

  void validate() const {
    if (!(fraction_labeled > 0.0 && fraction_labeled < 1.0))
      throw ConfigError("fraction_labeled must lie strictly between 0 and 1");
  }
};

struct DiscoverySplit {
  Dataset labeled;
  Dataset unlabeled;  // labels stripped
  std::vector<std::optional<int>> truth;  // hidden labels, aligned with unlabeled
};

/// Per-class seeded split into labeled / unlabeled halves. Every sample of the
/// withheld class goes to the unlabeled side; snippets that carry no label
/// also go to the unlabeled side.
inline DiscoverySplit split_discovery(const Dataset& d, const SplitSpec& spec) {
  spec.validate();
  if (spec.withheld_class) {
    if (!d.has_class(*spec.withheld_class))
      throw ValidationError("withheld class " + std::to_string(*spec.withheld_class) +
                            " is not declared in the dataset");
    if (d.class_counts().at(*spec.withheld_class) == 0)
      throw ValidationError("withheld class " + std::to_string(*spec.withheld_class) +
                            " has no samples");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < d.snippets.size(); ++i)
    if (d.snippets[i].label) by_class[*d.snippets[i].label].push_back(i);

  std::vector<char> to_labeled(d.snippets.size(), 0);
  for (auto& [cls, rows] : by_class) {
    if (spec.withheld_class && cls == *spec.withheld_class) continue;
    Rng rng(derive_seed(spec.seed, "split", static_cast<std::uint64_t>(cls)));
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_lab = static_cast<std::size_t>(
        std::ceil(static_cast<double>(rows.size()) * spec.fraction_labeled - 1e-12));
    for (std::size_t j = 0; j < n_lab && j < rows.size(); ++j) to_labeled[rows[j]] = 1;
  }

  DiscoverySplit out;
  out.labeled.class_names = d.class_names;
  out.unlabeled.class_names = d.class_names;
  if (spec.withheld_class) out.labeled.class_names.erase(*spec.withheld_class);
  out.labeled.preprocessed = out.unlabeled.preprocessed = d.preprocessed;
  for (std::size_t i = 0; i < d.snippets.size(); ++i) {
    if (to_labeled[i]) {
      out.labeled.snippets.push_back(d.snippets[i]);
    } else {
      MotionSnippet s = d.snippets[i];
      out.truth.push_back(s.label);
      s.label.reset();
      out.unlabeled.snippets.push_back(std::move(s));
    }
  }
  return out;
}

/// Copy of `d` with every snippet of class `c` removed (the class stays declared).
inline Dataset without_class(const Dataset& d, int c) {
  Dataset out = d;
  std::erase_if(out.snippets, [c](const MotionSnippet& s) { return s.label && *s.label == c; });
  return out;
}

}  // namespace bdisc
