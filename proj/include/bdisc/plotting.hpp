#pragma once

// Deterministic SVG 1.1 figures: four-panel t-SNE views, grids of trial pairs
// and confusion-matrix heatmaps. Element order depends only on the inputs.

#include "common.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace bdisc {

// tab10 followed by its lighter companions.
inline constexpr std::array<const char*, 20> kPalette = {
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896",
    "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5"};
inline constexpr const char* kUnknownColor = "#000000";

inline std::string color_for(int id) {
  if (id < 0) return kUnknownColor;
  return kPalette[static_cast<std::size_t>(id) % kPalette.size()];
}

struct PlotSpec {
  std::string title;
  std::string axis_label = "t-SNE coordinates, arbitrary units";
  int panel_size = 320;
  double point_radius = 2.5;
  std::optional<int> border_class;  // colors the frame of a trial pair
};

/// Per-point data of one t-SNE figure. All vectors are row-aligned with coords.
struct ScatterData {
  Eigen::MatrixX2d coords;
  std::vector<std::optional<int>> truth;  // ground-truth class, absent if unknown
  std::vector<int> assignments;           // cluster labels
  std::vector<char> labeled;              // row belongs to the labeled set
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline void check_aligned(const ScatterData& d) {
  const auto n = static_cast<std::size_t>(d.coords.rows());
  if (d.truth.size() != n || d.assignments.size() != n || d.labeled.size() != n)
    throw ValidationError("plot inputs are not row-aligned (" + std::to_string(n) + " coordinates, " +
                          std::to_string(d.truth.size()) + " truth, " + std::to_string(d.assignments.size()) +
                          " assignments, " + std::to_string(d.labeled.size()) + " provenance)");
}

struct Bounds {
  double xmin, xmax, ymin, ymax;
};

inline Bounds bounds_of(const Eigen::MatrixX2d& c) {
  if (c.rows() == 0) return {-1, 1, -1, 1};
  Bounds b{c.col(0).minCoeff(), c.col(0).maxCoeff(), c.col(1).minCoeff(), c.col(1).maxCoeff()};
  const double px = std::max(1e-9, 0.05 * (b.xmax - b.xmin));
  const double py = std::max(1e-9, 0.05 * (b.ymax - b.ymin));
  return {b.xmin - px, b.xmax + px, b.ymin - py, b.ymax + py};
}

enum class PanelFilter { all, labeled, unlabeled };

inline void scatter_panel(std::ostringstream& out, const ScatterData& d, const Bounds& b, double x0,
                          double y0, const PlotSpec& spec, const std::string& title, bool by_truth,
                          PanelFilter filter, int panel_index) {
  const double s = spec.panel_size;
  const double margin = 28.0;
  const double inner = s - 2 * margin;
  out << "<g class=\"panel\" id=\"panel-" << panel_index << "\" transform=\"translate(" << fmt(x0) << ','
      << fmt(y0) << ")\">\n";
  out << "<rect x=\"" << fmt(margin) << "\" y=\"" << fmt(margin) << "\" width=\"" << fmt(inner) << "\" height=\""
      << fmt(inner) << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"0.8\"/>\n";
  out << "<text x=\"" << fmt(s / 2) << "\" y=\"" << fmt(margin - 8) << "\" text-anchor=\"middle\" font-size=\"12\">"
      << xml_escape(title) << "</text>\n";
  out << "<text x=\"" << fmt(s / 2) << "\" y=\"" << fmt(s - 8) << "\" text-anchor=\"middle\" font-size=\"9\">"
      << xml_escape(spec.axis_label) << "</text>\n";
  out << "<g class=\"points\">\n";
  for (Eigen::Index i = 0; i < d.coords.rows(); ++i) {
    const auto r = static_cast<std::size_t>(i);
    if (filter == PanelFilter::labeled && !d.labeled[r]) continue;
    if (filter == PanelFilter::unlabeled && d.labeled[r]) continue;
    const double px = margin + (d.coords(i, 0) - b.xmin) / (b.xmax - b.xmin) * inner;
    const double py = margin + (1.0 - (d.coords(i, 1) - b.ymin) / (b.ymax - b.ymin)) * inner;
    const int id = by_truth ? (d.truth[r] ? *d.truth[r] : -1) : d.assignments[r];
    out << "<circle cx=\"" << fmt(px) << "\" cy=\"" << fmt(py) << "\" r=\"" << fmt(spec.point_radius)
        << "\" fill=\"" << color_for(id) << "\"/>\n";
  }
  out << "</g>\n</g>\n";
}

inline void svg_open(std::ostringstream& out, double w, double h) {
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << fmt(w) << "\" height=\"" << fmt(h)
      << "\" viewBox=\"0 0 " << fmt(w) << ' ' << fmt(h) << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
}

}  // namespace detail

/// 2x2 figure: ground truth, clusters on all data, clusters on the labeled
/// rows only, clusters on the unlabeled rows only. Axis ranges are shared.
inline std::string scatter_panels(const ScatterData& d, const PlotSpec& spec) {
  detail::check_aligned(d);
  const auto b = detail::bounds_of(d.coords);
  const double s = spec.panel_size;
  const double top = spec.title.empty() ? 0.0 : 24.0;
  std::ostringstream out;
  detail::svg_open(out, 2 * s, 2 * s + top);
  if (!spec.title.empty())
    out << "<text x=\"" << detail::fmt(s) << "\" y=\"16\" text-anchor=\"middle\" font-size=\"14\">"
        << detail::xml_escape(spec.title) << "</text>\n";
  using detail::PanelFilter;
  detail::scatter_panel(out, d, b, 0, top, spec, "ground truth", true, PanelFilter::all, 0);
  detail::scatter_panel(out, d, b, s, top, spec, "clusters: all data", false, PanelFilter::all, 1);
  detail::scatter_panel(out, d, b, 0, top + s, spec, "clusters: labeled", false, PanelFilter::labeled, 2);
  detail::scatter_panel(out, d, b, s, top + s, spec, "clusters: unlabeled", false, PanelFilter::unlabeled, 3);
  out << "</svg>\n";
  return out.str();
}

struct TrialPair {
  std::string title;
  int removed_class = -1;
  ScatterData data;
};

/// Grid of (ground truth, clusters) pairs, three pairs per row, each framed
/// in the color of its removed class.
inline std::string pair_grid(const std::vector<TrialPair>& pairs, const PlotSpec& spec, int per_row = 3) {
  if (per_row < 1) throw ValidationError("pair_grid: per_row must be >= 1");
  const double s = spec.panel_size;
  const double pad = 10.0;
  const double pw = 2 * s + 2 * pad;
  const double ph = s + 2 * pad + 18.0;
  const auto n = static_cast<int>(pairs.size());
  const int cols = std::max(1, std::min(per_row, n));
  const int rows = (n + per_row - 1) / per_row;
  std::ostringstream out;
  detail::svg_open(out, cols * pw, std::max(1, rows) * ph);
  for (int p = 0; p < n; ++p) {
    const auto& pair = pairs[static_cast<std::size_t>(p)];
    detail::check_aligned(pair.data);
    const auto b = detail::bounds_of(pair.data.coords);
    const double x0 = (p % per_row) * pw;
    const double y0 = (p / per_row) * ph;
    out << "<g class=\"pair\" id=\"pair-" << p << "\" transform=\"translate(" << detail::fmt(x0) << ','
        << detail::fmt(y0) << ")\">\n";
    out << "<rect class=\"border\" x=\"2\" y=\"2\" width=\"" << detail::fmt(pw - 4) << "\" height=\""
        << detail::fmt(ph - 4) << "\" fill=\"none\" stroke=\"" << color_for(pair.removed_class)
        << "\" stroke-width=\"4\"/>\n";
    out << "<text x=\"" << detail::fmt(pw / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
        << detail::xml_escape(pair.title) << "</text>\n";
    detail::scatter_panel(out, pair.data, b, pad, pad + 18.0, spec, "ground truth", true,
                          detail::PanelFilter::all, 2 * p);
    detail::scatter_panel(out, pair.data, b, pad + s, pad + 18.0, spec, "clusters: all data", false,
                          detail::PanelFilter::all, 2 * p + 1);
    out << "</g>\n";
  }
  out << "</svg>\n";
  return out.str();
}

/// Heatmap with shading proportional to count / max count, counts printed.
inline std::string confusion_heatmap(const Eigen::MatrixXi& counts, const std::vector<std::string>& row_labels,
                                     const std::vector<std::string>& col_labels, const PlotSpec& spec) {
  if (counts.rows() == 0 || counts.cols() == 0) throw ValidationError("confusion_heatmap: empty matrix");
  if (static_cast<Eigen::Index>(row_labels.size()) != counts.rows() ||
      static_cast<Eigen::Index>(col_labels.size()) != counts.cols())
    throw ValidationError("confusion_heatmap: label count does not match matrix shape");
  const double cell = 40.0;
  const double left = 90.0, top = 60.0;
  const int max_count = std::max(0, counts.maxCoeff());
  std::ostringstream out;
  detail::svg_open(out, left + cell * counts.cols() + 20, top + cell * counts.rows() + 40);
  if (!spec.title.empty())
    out << "<text x=\"" << detail::fmt(left) << "\" y=\"18\" font-size=\"14\">" << detail::xml_escape(spec.title)
        << "</text>\n";
  out << "<text x=\"" << detail::fmt(left + cell * counts.cols() / 2) << "\" y=\"36\" text-anchor=\"middle\" "
      << "font-size=\"11\">predicted cluster</text>\n";
  for (Eigen::Index c = 0; c < counts.cols(); ++c)
    out << "<text x=\"" << detail::fmt(left + cell * (c + 0.5)) << "\" y=\"54\" text-anchor=\"middle\" "
        << "font-size=\"10\">" << detail::xml_escape(col_labels[static_cast<std::size_t>(c)]) << "</text>\n";
  out << "<g class=\"cells\">\n";
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    out << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(top + cell * (r + 0.5) + 4)
        << "\" text-anchor=\"end\" font-size=\"10\">" << detail::xml_escape(row_labels[static_cast<std::size_t>(r)])
        << "</text>\n";
    for (Eigen::Index c = 0; c < counts.cols(); ++c) {
      const int v = counts(r, c);
      const double shade = max_count > 0 ? static_cast<double>(v) / max_count : 0.0;
      out << "<rect class=\"cell\" x=\"" << detail::fmt(left + cell * c) << "\" y=\"" << detail::fmt(top + cell * r)
          << "\" width=\"" << detail::fmt(cell) << "\" height=\"" << detail::fmt(cell)
          << "\" fill=\"#08306b\" fill-opacity=\"" << detail::fmt(0.05 + 0.95 * shade)
          << "\" stroke=\"#ffffff\"/>\n";
      out << "<text class=\"count\" x=\"" << detail::fmt(left + cell * (c + 0.5)) << "\" y=\""
          << detail::fmt(top + cell * (r + 0.5) + 4) << "\" text-anchor=\"middle\" font-size=\"11\" fill=\""
          << (shade > 0.5 ? "#ffffff" : "#000000") << "\">" << v << "</text>\n";
    }
  }
  out << "</g>\n</svg>\n";
  return out.str();
}

}  // namespace bdisc
