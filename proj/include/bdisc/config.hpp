#pragma once

// Single JSON run configuration shared by every CLI command.

#include "protocols.hpp"
#include "synth.hpp"

#include <fstream>

namespace bdisc {

struct StreamConfig {
  std::optional<std::string> data;  // CSV of stream snippets
  std::size_t windows = 10;         // synthetic stream length in windows
  std::optional<int> novel_class;   // synthetic: class kept out of the labeled data
  std::vector<std::size_t> novel_windows;
};

struct RunConfig {
  std::optional<std::string> data;
  std::optional<std::string> synth;  // preset name or path to a spec JSON
  std::optional<std::string> out;
  std::uint64_t seed = 0;
  std::optional<int> withhold;
  double fraction_labeled = 0.5;
  int jobs = 1;
  EncoderConfig encoder;
  KMeansConfig kmeans;
  TsneConfig tsne;
  DensityConfig density;
  std::size_t window = 100;
  std::size_t stride = 100;
  std::optional<int> k;
  StreamConfig stream;

  TrialConfig trial() const {
    TrialConfig t;
    t.withheld = withhold;
    t.fraction_labeled = fraction_labeled;
    t.encoder = encoder;
    t.kmeans = kmeans;
    t.tsne = tsne;
    t.density = density;
    t.seed = seed;
    return t;
  }

  DeployConfig deploy() const {
    DeployConfig d;
    d.trial = trial();
    d.trial.withheld.reset();
    d.window = window;
    d.stride = stride;
    d.k = k;
    return d;
  }

  void validate() const {
    if (data && synth) throw ConfigError("use either data or synth, not both");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (window < 1 || stride < 1) throw ConfigError("window and stride must be >= 1");
    if (stream.windows < 1) throw ConfigError("stream.windows must be >= 1");
    for (auto w : stream.novel_windows)
      if (w >= stream.windows) throw ConfigError("stream.novel_windows entry " + std::to_string(w) + " is out of range");
    SplitSpec{withhold, seed, fraction_labeled}.validate();
    encoder.validate();
    kmeans.validate();
    tsne.validate();
    density.validate();
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  auto tsne = to_json(c.tsne);
  return {{"data", optional_json(c.data)},
          {"synth", optional_json(c.synth)},
          {"out", optional_json(c.out)},
          {"seed", c.seed},
          {"withhold", optional_json(c.withhold)},
          {"fraction_labeled", c.fraction_labeled},
          {"jobs", c.jobs},
          {"encoder", to_json(c.encoder)},
          {"kmeans", to_json(c.kmeans)},
          {"tsne", tsne},
          {"density", to_json(c.density)},
          {"deploy", {{"window", c.window}, {"stride", c.stride}, {"k", optional_json(c.k)}}},
          {"stream",
           {{"data", optional_json(c.stream.data)},
            {"windows", c.stream.windows},
            {"novel_class", optional_json(c.stream.novel_class)},
            {"novel_windows", c.stream.novel_windows}}}};
}

/// Parse a run configuration, rejecting unknown keys at every level.
/// Missing keys keep their defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  require_known_keys(j,
                     {"data", "synth", "out", "seed", "withhold", "fraction_labeled", "jobs", "encoder", "kmeans",
                      "tsne", "density", "deploy", "stream"},
                     "config");
  read_field(j, "data", c.data, "config");
  read_field(j, "synth", c.synth, "config");
  read_field(j, "out", c.out, "config");
  read_field(j, "seed", c.seed, "config");
  read_field(j, "withhold", c.withhold, "config");
  read_field(j, "fraction_labeled", c.fraction_labeled, "config");
  read_field(j, "jobs", c.jobs, "config");
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    const std::string ctx = "config.encoder";
    require_known_keys(e,
                       {"conv_layers", "channels_per_layer", "kernel", "padding", "dropout_rate", "epochs",
                        "learning_rate", "weight_decay", "beta1", "beta2", "adam_epsilon", "batch_size", "bn_momentum",
                        "bn_epsilon"},
                       ctx);
    auto& x = c.encoder;
    read_field(e, "conv_layers", x.conv_layers, ctx);
    read_field(e, "channels_per_layer", x.channels_per_layer, ctx);
    read_field(e, "kernel", x.kernel, ctx);
    read_field(e, "padding", x.padding, ctx);
    read_field(e, "dropout_rate", x.dropout_rate, ctx);
    read_field(e, "epochs", x.epochs, ctx);
    read_field(e, "learning_rate", x.learning_rate, ctx);
    read_field(e, "weight_decay", x.weight_decay, ctx);
    read_field(e, "beta1", x.beta1, ctx);
    read_field(e, "beta2", x.beta2, ctx);
    read_field(e, "adam_epsilon", x.adam_epsilon, ctx);
    read_field(e, "batch_size", x.batch_size, ctx);
    read_field(e, "bn_momentum", x.bn_momentum, ctx);
    read_field(e, "bn_epsilon", x.bn_epsilon, ctx);
  }
  if (j.contains("kmeans")) {
    const auto& k = j["kmeans"];
    const std::string ctx = "config.kmeans";
    require_known_keys(k, {"n_free", "max_iter", "tol", "normalize"}, ctx);
    read_field(k, "n_free", c.kmeans.n_free, ctx);
    read_field(k, "max_iter", c.kmeans.max_iter, ctx);
    read_field(k, "tol", c.kmeans.tol, ctx);
    read_field(k, "normalize", c.kmeans.normalize, ctx);
  }
  if (j.contains("tsne")) {
    const auto& t = j["tsne"];
    const std::string ctx = "config.tsne";
    require_known_keys(t,
                       {"perplexity", "n_iter", "early_exaggeration", "exaggeration_iters", "learning_rate",
                        "momentum_early", "momentum_late", "min_gain", "init", "init_scale", "search_tol",
                        "search_max_steps", "kl_every"},
                       ctx);
    auto& x = c.tsne;
    read_field(t, "perplexity", x.perplexity, ctx);
    read_field(t, "n_iter", x.n_iter, ctx);
    read_field(t, "early_exaggeration", x.early_exaggeration, ctx);
    read_field(t, "exaggeration_iters", x.exaggeration_iters, ctx);
    read_field(t, "learning_rate", x.learning_rate, ctx);
    read_field(t, "momentum_early", x.momentum_early, ctx);
    read_field(t, "momentum_late", x.momentum_late, ctx);
    read_field(t, "min_gain", x.min_gain, ctx);
    if (t.contains("init")) {
      std::string init;
      read_field(t, "init", init, ctx);
      x.init = tsne_init_from_string(init);
    }
    read_field(t, "init_scale", x.init_scale, ctx);
    read_field(t, "search_tol", x.search_tol, ctx);
    read_field(t, "search_max_steps", x.search_max_steps, ctx);
    read_field(t, "kl_every", x.kl_every, ctx);
  }
  if (j.contains("density")) {
    const auto& d = j["density"];
    const std::string ctx = "config.density";
    require_known_keys(d, {"alpha", "mc_samples", "novelty_threshold", "class_kde_from_predictions"}, ctx);
    read_field(d, "alpha", c.density.alpha, ctx);
    read_field(d, "mc_samples", c.density.mc_samples, ctx);
    read_field(d, "novelty_threshold", c.density.novelty_threshold, ctx);
    read_field(d, "class_kde_from_predictions", c.density.class_kde_from_predictions, ctx);
  }
  if (j.contains("deploy")) {
    const auto& d = j["deploy"];
    const std::string ctx = "config.deploy";
    require_known_keys(d, {"window", "stride", "k"}, ctx);
    read_field(d, "window", c.window, ctx);
    read_field(d, "stride", c.stride, ctx);
    read_field(d, "k", c.k, ctx);
  }
  if (j.contains("stream")) {
    const auto& s = j["stream"];
    const std::string ctx = "config.stream";
    require_known_keys(s, {"data", "windows", "novel_class", "novel_windows"}, ctx);
    read_field(s, "data", c.stream.data, ctx);
    read_field(s, "windows", c.stream.windows, ctx);
    read_field(s, "novel_class", c.stream.novel_class, ctx);
    read_field(s, "novel_windows", c.stream.novel_windows, ctx);
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Resolve `synth` as a preset name first, then as a JSON spec file.
inline SynthSpec resolve_synth_spec(const std::string& name_or_path) {
  if (auto p = synth_preset(name_or_path)) return *p;
  std::ifstream in(name_or_path);
  if (!in) {
    std::string names;
    for (const auto& n : synth_preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown synthetic preset '" + name_or_path + "' (presets: " + names + ")");
  }
  try {
    return synth_spec_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("synth spec " + name_or_path + ": " + e.what());
  }
}

/// Dataset named by the configuration: a CSV or a synthetic spec.
inline Dataset load_dataset(const RunConfig& c) {
  if (c.data) return load_csv(*c.data);
  if (c.synth) return synth_generate(resolve_synth_spec(*c.synth), derive_seed(c.seed, "data"));
  throw ConfigError("a dataset is required: pass --data <csv> or --synth <preset|spec.json>");
}

}  // namespace bdisc
