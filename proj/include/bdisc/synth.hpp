#pragma once

#include "data.hpp"
#include "json_util.hpp"

#include <algorithm>
#include <array>
#include <numbers>

namespace bdisc {

/// One sinusoid-plus-offset generator. The speed channel is in scaled units.
struct WaveTemplate {
  std::array<double, kChannels> offset{0.0, 0.0, 1.0, 0.0};
  std::array<double, kChannels> offset_jitter{};  // per-snippet sd of the static offset
  std::array<double, kChannels> amplitude{};
  std::array<double, kChannels> phase{};  // per-channel phase shift, radians
  double frequency = 0.0;                 // cycles per snippet
  double amplitude_jitter = 0.0;          // relative sd
  double frequency_jitter = 0.0;          // relative sd
  double noise = 0.01;                    // white noise sd
};

struct TransitionSpec {
  int from = 0;
  int to = 0;
  int min_switch = 5;   // first timestep drawn from `to`
  int max_switch = 15;
};

/// A class is either a mixture of wave modes (one picked uniformly per
/// snippet) or a transition that switches from one class's template to
/// another's part-way through the snippet.
struct SynthClass {
  int index = 0;
  std::string name;
  std::size_t count = 0;
  std::vector<WaveTemplate> modes;
  std::optional<TransitionSpec> transition;
};

struct SynthSpec {
  std::string name = "custom";
  std::vector<SynthClass> classes;
  std::optional<int> well_separated_class;  // a class designed to be easy to isolate
  std::optional<int> transition_class;

  const SynthClass& at(int index) const {
    for (const auto& c : classes)
      if (c.index == index) return c;
    throw ConfigError("synth spec has no class " + std::to_string(index));
  }

  void validate() const {
    if (classes.empty()) throw ConfigError("synth spec declares no classes");
    std::set<int> seen;
    for (const auto& c : classes) {
      if (c.index < 0) throw ConfigError("synth class index must be >= 0");
      if (!seen.insert(c.index).second)
        throw ConfigError("duplicate synth class index " + std::to_string(c.index));
    }
    for (const auto& c : classes) {
      if (c.transition) {
        const auto& tr = *c.transition;
        for (int ref : {tr.from, tr.to}) {
          const auto& other = at(ref);
          if (other.transition || other.modes.empty())
            throw ConfigError("transition class " + std::to_string(c.index) +
                              " must reference wave classes");
        }
        if (tr.min_switch < 1 || tr.max_switch >= kTimesteps || tr.min_switch > tr.max_switch)
          throw ConfigError("transition switch range must lie inside the snippet");
      } else if (c.modes.empty()) {
        throw ConfigError("synth class " + std::to_string(c.index) + " has no wave modes");
      }
    }
  }
};

namespace detail {

inline SnippetValues render_wave(const WaveTemplate& w, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double amp_scale = std::max(0.0, 1.0 + w.amplitude_jitter * gauss(rng));
  const double freq = w.frequency * std::max(0.0, 1.0 + w.frequency_jitter * gauss(rng));
  const double phase0 = 2.0 * std::numbers::pi * unit(rng);
  std::array<double, kChannels> offset{};
  for (int c = 0; c < kChannels; ++c) offset[c] = w.offset[c] + w.offset_jitter[c] * gauss(rng);
  SnippetValues v;
  for (int c = 0; c < kChannels; ++c) {
    for (int t = 0; t < kTimesteps; ++t) {
      const double arg = 2.0 * std::numbers::pi * freq * t / kTimesteps + phase0 + w.phase[c];
      v(c, t) = offset[c] + amp_scale * w.amplitude[c] * std::sin(arg) + w.noise * gauss(rng);
    }
  }
  return v;
}

inline const WaveTemplate& pick_mode(const SynthClass& c, Rng& rng) {
  if (c.modes.size() == 1) return c.modes.front();
  std::uniform_int_distribution<std::size_t> pick(0, c.modes.size() - 1);
  return c.modes[pick(rng)];
}

inline void clamp_to_preprocessed_range(SnippetValues& v) {
  v.topRows<3>() = v.topRows<3>().cwiseMax(-kAccelClip).cwiseMin(kAccelClip);
  v.row(kSpeed) = v.row(kSpeed).cwiseMax(0.0).cwiseMin(1.5);
}

}  // namespace detail

/// Render one snippet of class `cls`.
inline SnippetValues synth_snippet(const SynthSpec& spec, const SynthClass& cls, Rng& rng) {
  SnippetValues v;
  if (cls.transition) {
    const auto& tr = *cls.transition;
    const auto a = detail::render_wave(detail::pick_mode(spec.at(tr.from), rng), rng);
    const auto b = detail::render_wave(detail::pick_mode(spec.at(tr.to), rng), rng);
    std::uniform_int_distribution<int> sw(tr.min_switch, tr.max_switch);
    const int s = sw(rng);
    v.leftCols(s) = a.leftCols(s);
    v.rightCols(kTimesteps - s) = b.rightCols(kTimesteps - s);
  } else {
    v = detail::render_wave(detail::pick_mode(cls, rng), rng);
  }
  detail::clamp_to_preprocessed_range(v);
  return v;
}

/// Generate a labeled dataset. Output is already in the preprocessed range.
/// `counts`, when non-empty, overrides the per-class counts of the spec
/// (same order as spec.classes).
inline Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed,
                              const std::vector<std::size_t>& counts = {},
                              const std::string& id_prefix = "s") {
  spec.validate();
  if (!counts.empty() && counts.size() != spec.classes.size())
    throw ConfigError("synth: expected " + std::to_string(spec.classes.size()) + " counts, got " +
                      std::to_string(counts.size()));
  Dataset d;
  d.preprocessed = true;
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    const auto& cls = spec.classes[ci];
    d.class_names[cls.index] = cls.name;
    const std::size_t n = counts.empty() ? cls.count : counts[ci];
    Rng rng(derive_seed(seed, "synth", static_cast<std::uint64_t>(cls.index)));
    for (std::size_t i = 0; i < n; ++i) {
      MotionSnippet s;
      s.id = id_prefix + std::to_string(cls.index) + "_" + std::to_string(i);
      s.values = synth_snippet(spec, cls, rng);
      s.label = cls.index;
      d.snippets.push_back(std::move(s));
    }
  }
  return d;
}

/// Stream of `n_windows` consecutive windows of `window` snippets. Windows
/// listed in `novel_windows` are drawn entirely from `novel_class`; the others
/// draw from the remaining classes in proportion to their spec counts.
/// Snippets keep their class as label so callers can score detections.
inline Dataset synth_stream(const SynthSpec& spec, std::uint64_t seed, std::size_t n_windows, std::size_t window,
                            std::optional<int> novel_class, const std::vector<std::size_t>& novel_windows) {
  spec.validate();
  if (!novel_windows.empty() && !novel_class) throw ConfigError("synth_stream: novel windows need a novel class");
  std::vector<const SynthClass*> known;
  std::vector<double> weights;
  for (const auto& c : spec.classes) {
    if (novel_class && c.index == *novel_class) continue;
    known.push_back(&c);
    weights.push_back(static_cast<double>(c.count));
  }
  if (known.empty()) throw ConfigError("synth_stream: no known classes to draw from");
  const SynthClass* novel = novel_class ? &spec.at(*novel_class) : nullptr;
  Dataset d;
  d.preprocessed = true;
  for (const auto& c : spec.classes) d.class_names[c.index] = c.name;
  Rng rng(derive_seed(seed, "stream"));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  for (std::size_t w = 0; w < n_windows; ++w) {
    const bool is_novel = std::find(novel_windows.begin(), novel_windows.end(), w) != novel_windows.end();
    for (std::size_t i = 0; i < window; ++i) {
      const SynthClass* cls = is_novel ? novel : known[pick(rng)];
      MotionSnippet s;
      s.id = "w" + std::to_string(w) + "_" + std::to_string(i);
      s.values = synth_snippet(spec, *cls, rng);
      s.label = cls->index;
      d.snippets.push_back(std::move(s));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline WaveTemplate wave(std::array<double, kChannels> offset, std::array<double, kChannels> amp,
                         double freq, double noise) {
  WaveTemplate w;
  w.offset = offset;
  w.amplitude = amp;
  w.frequency = freq;
  w.noise = noise;
  w.offset_jitter = {0.05, 0.05, 0.05, 0.03};
  w.amplitude_jitter = 0.15;
  w.frequency_jitter = 0.1;
  w.phase = {0.0, 0.5 * std::numbers::pi, 0.25 * std::numbers::pi, 0.0};
  return w;
}

inline WaveTemplate flap() { return wave({0.1, 0.0, 1.0, 0.5}, {0.5, 0.2, 0.9, 0.03}, 4.0, 0.05); }
inline WaveTemplate ex_flap() {
  return wave({0.3, 0.0, 1.1, 0.45}, {0.9, 0.3, 1.4, 0.05}, 6.0, 0.08);
}
inline WaveTemplate soar() { return wave({0.2, 0.05, 0.95, 0.6}, {0.1, 0.08, 0.1, 0.02}, 0.5, 0.03); }
inline WaveTemplate sit() { return wave({-0.5, 0.0, 0.8, 0.0}, {0.0, 0.0, 0.0, 0.0}, 0.0, 0.02); }
inline WaveTemplate stand() { return wave({-0.45, -0.1, 0.85, 0.0}, {0.0, 0.0, 0.0, 0.0}, 0.0, 0.02); }
inline WaveTemplate float_calm() {
  return wave({0.0, 0.4, 0.9, 0.15}, {0.15, 0.25, 0.3, 0.02}, 1.0, 0.03);
}
inline WaveTemplate float_rough() {
  return wave({0.0, 0.4, 0.9, 0.18}, {0.25, 0.4, 0.5, 0.02}, 1.5, 0.04);
}
inline WaveTemplate boat() { return wave({-0.1, 0.2, 1.0, 0.25}, {0.1, 0.15, 0.2, 0.02}, 0.3, 0.03); }
inline WaveTemplate ter_loco() {
  return wave({0.3, 0.0, 0.9, 0.05}, {0.35, 0.35, 0.25, 0.01}, 2.0, 0.05);
}
inline WaveTemplate pecking() {
  return wave({0.5, 0.0, 0.7, 0.0}, {0.6, 0.1, 0.4, 0.0}, 3.0, 0.06);
}
inline WaveTemplate dive() {
  return wave({-0.6, 0.3, -0.8, 0.9}, {0.2, 0.2, 0.2, 0.05}, 2.0, 0.05);
}

inline SynthClass wave_class(int idx, std::string name, std::size_t count,
                             std::vector<WaveTemplate> modes) {
  SynthClass c;
  c.index = idx;
  c.name = std::move(name);
  c.count = count;
  c.modes = std::move(modes);
  return c;
}

inline SynthClass transition_class(int idx, std::string name, std::size_t count, int from, int to) {
  SynthClass c;
  c.index = idx;
  c.name = std::move(name);
  c.count = count;
  c.transition = TransitionSpec{from, to, 5, 15};
  return c;
}

}  // namespace detail

/// Five classes with a compact well-separated floating class (3), a
/// transition class mixing flapping and soaring (4), and 10:1 imbalance.
inline SynthSpec synth_preset_5class() {
  using namespace detail;
  SynthSpec s;
  s.name = "5class";
  s.classes = {
      wave_class(0, "Flap", 90, {flap()}),
      wave_class(1, "Soar", 70, {soar()}),
      wave_class(2, "SitStand", 300, {sit(), stand()}),
      wave_class(3, "Float", 45, {float_calm(), float_rough()}),
      transition_class(4, "Manouvre", 30, 0, 1),
  };
  s.well_separated_class = 3;
  s.transition_class = 4;
  return s;
}

/// Nine classes numbered like the gull ethogram (no class 7).
inline SynthSpec synth_preset_9class() {
  using namespace detail;
  SynthSpec s;
  s.name = "9class";
  s.classes = {
      wave_class(0, "Flap", 60, {flap()}),
      wave_class(1, "ExFlap", 20, {ex_flap()}),
      wave_class(2, "Soar", 50, {soar()}),
      wave_class(3, "Boat", 40, {boat()}),
      wave_class(4, "Float", 40, {float_calm(), float_rough()}),
      wave_class(5, "SitStand", 120, {sit(), stand()}),
      wave_class(6, "TerLoco", 40, {ter_loco()}),
      transition_class(8, "Manouvre", 30, 0, 2),
      wave_class(9, "Pecking", 40, {pecking()}),
  };
  s.well_separated_class = 0;
  s.transition_class = 8;
  return s;
}

/// The nine-class preset plus an extra class (10) that never appears in
/// labeled data; used to build deployment streams.
inline SynthSpec synth_preset_deploy() {
  auto s = synth_preset_9class();
  s.name = "deploy";
  s.classes.push_back(detail::wave_class(10, "Dive", 100, {detail::dive()}));
  return s;
}

inline std::vector<std::string> synth_preset_names() { return {"5class", "9class", "deploy"}; }

inline std::optional<SynthSpec> synth_preset(const std::string& name) {
  if (name == "5class") return synth_preset_5class();
  if (name == "9class") return synth_preset_9class();
  if (name == "deploy") return synth_preset_deploy();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const WaveTemplate& w) {
  return {{"offset", w.offset},
          {"offset_jitter", w.offset_jitter},
          {"amplitude", w.amplitude},
          {"phase", w.phase},
          {"frequency", w.frequency},
          {"amplitude_jitter", w.amplitude_jitter},
          {"frequency_jitter", w.frequency_jitter},
          {"noise", w.noise}};
}

inline WaveTemplate wave_from_json(const nlohmann::json& j, const std::string& ctx) {
  require_known_keys(j,
                     {"offset", "offset_jitter", "amplitude", "phase", "frequency",
                      "amplitude_jitter", "frequency_jitter", "noise"},
                     ctx);
  WaveTemplate w;
  read_field(j, "offset", w.offset, ctx);
  read_field(j, "offset_jitter", w.offset_jitter, ctx);
  read_field(j, "amplitude", w.amplitude, ctx);
  read_field(j, "phase", w.phase, ctx);
  read_field(j, "frequency", w.frequency, ctx);
  read_field(j, "amplitude_jitter", w.amplitude_jitter, ctx);
  read_field(j, "frequency_jitter", w.frequency_jitter, ctx);
  read_field(j, "noise", w.noise, ctx);
  if (w.noise < 0 || w.amplitude_jitter < 0 || w.frequency_jitter < 0)
    throw ConfigError(ctx + ": noise and jitter must be non-negative");
  return w;
}

inline nlohmann::json to_json(const SynthSpec& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : s.classes) {
    nlohmann::json jc = {{"index", c.index}, {"name", c.name}, {"count", c.count}};
    if (c.transition) {
      jc["transition"] = {{"from", c.transition->from},
                          {"to", c.transition->to},
                          {"min_switch", c.transition->min_switch},
                          {"max_switch", c.transition->max_switch}};
    } else {
      nlohmann::json modes = nlohmann::json::array();
      for (const auto& m : c.modes) modes.push_back(to_json(m));
      jc["modes"] = modes;
    }
    classes.push_back(jc);
  }
  return {{"name", s.name},
          {"classes", classes},
          {"well_separated_class", optional_json(s.well_separated_class)},
          {"transition_class", optional_json(s.transition_class)}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  const std::string ctx = "synth spec";
  require_known_keys(j, {"name", "classes", "well_separated_class", "transition_class"}, ctx);
  SynthSpec s;
  read_field(j, "name", s.name, ctx);
  read_field(j, "well_separated_class", s.well_separated_class, ctx);
  read_field(j, "transition_class", s.transition_class, ctx);
  if (!j.contains("classes") || !j["classes"].is_array())
    throw ConfigError(ctx + ": 'classes' must be an array");
  for (const auto& jc : j["classes"]) {
    const std::string cctx = ctx + ".classes[" + std::to_string(s.classes.size()) + "]";
    require_known_keys(jc, {"index", "name", "count", "modes", "transition"}, cctx);
    SynthClass c;
    read_field(jc, "index", c.index, cctx);
    read_field(jc, "name", c.name, cctx);
    long long count = 0;
    read_field(jc, "count", count, cctx);
    if (count < 0) throw ConfigError(cctx + ": count must be >= 0");
    c.count = static_cast<std::size_t>(count);
    if (jc.contains("modes")) {
      for (const auto& jm : jc["modes"]) c.modes.push_back(wave_from_json(jm, cctx + ".modes"));
    }
    if (jc.contains("transition")) {
      const auto& jt = jc["transition"];
      require_known_keys(jt, {"from", "to", "min_switch", "max_switch"}, cctx + ".transition");
      TransitionSpec t;
      read_field(jt, "from", t.from, cctx);
      read_field(jt, "to", t.to, cctx);
      read_field(jt, "min_switch", t.min_switch, cctx);
      read_field(jt, "max_switch", t.max_switch, cctx);
      c.transition = t;
    }
    s.classes.push_back(std::move(c));
  }
  s.validate();
  return s;
}

}  // namespace bdisc
