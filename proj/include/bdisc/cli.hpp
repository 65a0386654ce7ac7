#pragma once

// Command-line front end: discover, control, suite, deploy, synth, plot.
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

#include "config.hpp"
#include "report.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <unistd.h>

namespace bdisc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

namespace cli_detail {

inline bool use_color() {
  const char* nc = std::getenv("NO_COLOR");
  return (nc == nullptr || *nc == '\0') && ::isatty(STDERR_FILENO);
}

inline void report_error(std::ostream& err, const std::string& msg) {
  if (use_color())
    err << "\x1b[31merror:\x1b[0m " << msg << '\n';
  else
    err << "error: " << msg << '\n';
}

/// Value of `--config` if present; read before the main parse so that
/// options can default to the file's values.
inline std::optional<std::string> find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return std::nullopt;
}

template <class T>
void opt_value(CLI::App* app, const std::string& name, std::optional<T>& target, const std::string& help) {
  app->add_option_function<T>(name, [&target](const T& v) { target = v; }, help);
}

inline void add_data_options(CLI::App* app, RunConfig& c) {
  opt_value(app, "--data", c.data, "dataset CSV (metadata sidecar <name>.meta.json is read when present)");
  opt_value(app, "--synth,--spec", c.synth, "synthetic preset (5class, 9class, deploy) or spec JSON path");
  app->add_option("--seed", c.seed, "base seed; every stage seed derives from it")->capture_default_str();
  app->add_option("--fraction-labeled", c.fraction_labeled, "per-class labeled fraction of the split")
      ->capture_default_str();
}

inline void add_stage_options(CLI::App* app, RunConfig& c) {
  auto& e = c.encoder;
  app->add_option("--conv-layers", e.conv_layers, "encoder conv blocks")->capture_default_str()->group("Encoder");
  app->add_option("--channels", e.channels_per_layer, "channels per conv block")->capture_default_str()->group("Encoder");
  app->add_option("--kernel", e.kernel, "conv kernel width (odd)")->capture_default_str()->group("Encoder");
  app->add_option("--padding", e.padding, "conv zero padding")->capture_default_str()->group("Encoder");
  app->add_option("--dropout", e.dropout_rate, "dropout rate")->capture_default_str()->group("Encoder");
  app->add_option("--epochs", e.epochs, "training epochs")->capture_default_str()->group("Encoder");
  app->add_option("--lr", e.learning_rate, "AdamW learning rate")->capture_default_str()->group("Encoder");
  app->add_option("--weight-decay", e.weight_decay, "AdamW decoupled weight decay")->capture_default_str()->group("Encoder");
  app->add_option("--beta1", e.beta1, "AdamW beta1")->capture_default_str()->group("Encoder");
  app->add_option("--beta2", e.beta2, "AdamW beta2")->capture_default_str()->group("Encoder");
  app->add_option("--adam-eps", e.adam_epsilon, "AdamW epsilon")->capture_default_str()->group("Encoder");
  app->add_option("--batch-size", e.batch_size, "minibatch size, 0 = full batch")->capture_default_str()->group("Encoder");
  app->add_option("--bn-momentum", e.bn_momentum, "batch-norm running-stat momentum")->capture_default_str()->group("Encoder");
  app->add_option("--bn-eps", e.bn_epsilon, "batch-norm epsilon")->capture_default_str()->group("Encoder");

  auto& k = c.kmeans;
  app->add_option("--n-free", k.n_free, "free clusters beyond the known classes")->capture_default_str()->group("Clustering");
  app->add_option("--kmeans-max-iter", k.max_iter, "K-means iteration cap")->capture_default_str()->group("Clustering");
  app->add_option("--kmeans-tol", k.tol, "centroid shift tolerance (max-norm)")->capture_default_str()->group("Clustering");
  app->add_option("--kmeans-normalize", k.normalize, "L2-normalize logits before clustering")
      ->capture_default_str()->group("Clustering");

  auto& t = c.tsne;
  app->add_option("--perplexity", t.perplexity, "t-SNE perplexity")->capture_default_str()->group("t-SNE");
  app->add_option("--tsne-iter", t.n_iter, "t-SNE iterations")->capture_default_str()->group("t-SNE");
  app->add_option("--early-exaggeration", t.early_exaggeration, "early exaggeration factor")->capture_default_str()->group("t-SNE");
  app->add_option("--exaggeration-iter", t.exaggeration_iters, "iterations with exaggeration")->capture_default_str()->group("t-SNE");
  app->add_option("--tsne-lr", t.learning_rate, "t-SNE learning rate")->capture_default_str()->group("t-SNE");
  app->add_option("--momentum-early", t.momentum_early, "momentum during exaggeration")->capture_default_str()->group("t-SNE");
  app->add_option("--momentum-late", t.momentum_late, "momentum afterwards")->capture_default_str()->group("t-SNE");
  app->add_option("--min-gain", t.min_gain, "gain floor")->capture_default_str()->group("t-SNE");
  app->add_option_function<std::string>(
         "--tsne-init", [&t](const std::string& s) { t.init = tsne_init_from_string(s); }, "pca or random (default pca)")
      ->group("t-SNE");
  app->add_option("--tsne-init-scale", t.init_scale, "std of the first init coordinate")->capture_default_str()->group("t-SNE");
  app->add_option("--perplexity-tol", t.search_tol, "entropy tolerance of the bandwidth search")->capture_default_str()->group("t-SNE");
  app->add_option("--perplexity-steps", t.search_max_steps, "bandwidth search step cap")->capture_default_str()->group("t-SNE");
  app->add_option("--kl-every", t.kl_every, "record KL every N iterations")->capture_default_str()->group("t-SNE");

  auto& d = c.density;
  app->add_option("--alpha", d.alpha, "HDR mass level")->capture_default_str()->group("Density");
  app->add_option("--mc", d.mc_samples, "Monte Carlo draws per model")->capture_default_str()->group("Density");
  app->add_option("--novelty-threshold", d.novelty_threshold, "novel when containment is below this")
      ->capture_default_str()->group("Density");
  app->add_option("--class-kde-from-predictions", d.class_kde_from_predictions,
                  "fit class KDEs on predicted rows instead of labeled rows")
      ->capture_default_str()->group("Density");
}

inline void print_trial_summary(std::ostream& out, const TrialResult& r) {
  out << to_string(r.kind) << ' ' << r.name << ": cluster "
      << (r.discovered_cluster >= 0 ? std::to_string(r.discovered_cluster) : "-") << ", acc "
      << table_cell(r.accuracy) << ", containment " << table_cell(r.containment_score) << ", "
      << (r.novel ? "novel" : "not novel") << '\n';
}

inline Dataset deploy_labeled(const RunConfig& c, const SynthSpec* spec) {
  if (!spec) return load_dataset(c);
  auto d = synth_generate(*spec, derive_seed(c.seed, "data"));
  if (c.stream.novel_class) d = without_class(d, *c.stream.novel_class);
  return d;
}

}  // namespace cli_detail

/// Runs the command line; returns the process exit code.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunConfig cfg;
  try {
    if (auto path = cli_detail::find_config_arg(argc, argv)) cfg = load_run_config(*path);
  } catch (const Error& e) {
    cli_detail::report_error(err, e.what());
    return kExitConfig;
  }

  CLI::App app{"Behavior discovery from motion snippets: encoder, label-guided K-means, t-SNE and HDR containment."};
  app.name("bdisc");
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "JSON run configuration; flags override its values");

  std::string out_dir;
  std::optional<int> withhold_flag;
  bool stream_flag = false;
  std::optional<std::string> stream_data;
  std::optional<std::size_t> stream_windows;
  std::optional<int> novel_class;
  std::vector<std::size_t> novel_windows;
  std::optional<int> k_flag;
  std::string plot_dir;

  auto* discover = app.add_subcommand("discover", "withhold one class from supervision and try to rediscover it");
  auto* control = app.add_subcommand("control", "negative control: unlabeled pool holds known classes only");
  auto* suite = app.add_subcommand("suite", "one discovery and one control trial per class");
  auto* deploy = app.add_subcommand("deploy", "score windows of an unlabeled stream for novel behavior");
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset CSV");
  auto* plot = app.add_subcommand("plot", "regenerate SVGs from a stored trial or suite directory");

  for (auto* sub : {discover, control, suite, deploy}) {
    cli_detail::add_data_options(sub, cfg);
    cli_detail::add_stage_options(sub, cfg);
    sub->add_option("--out", out_dir, "output directory")->required(!cfg.out.has_value());
  }
  for (auto* sub : {discover, control})
    sub->add_option_function<int>("--withhold", [&](const int& v) { withhold_flag = v; },
                                  "class removed from supervision");
  suite->add_option("--jobs", cfg.jobs, "trials run in parallel")->capture_default_str();

  deploy->add_option("--window", cfg.window, "segments per window")->capture_default_str()->group("Deployment");
  deploy->add_option("--stride", cfg.stride, "window advance")->capture_default_str()->group("Deployment");
  deploy->add_option_function<int>("--k", [&](const int& v) { k_flag = v; },
                                   "total clusters (default: known classes + 1, i.e. 10 with 9 known)")
      ->group("Deployment");
  for (auto* sub : {deploy, synth}) {
    cli_detail::opt_value(sub, "--stream-windows", stream_windows, "synthetic stream length in windows (default 10)");
    sub->add_option_function<int>("--novel-class", [&](const int& v) { novel_class = v; },
                                  "synthetic class kept out of the labeled data and injected into the stream");
    sub->add_option("--novel-windows", novel_windows, "stream windows drawn from the novel class");
  }
  cli_detail::opt_value(deploy, "--stream", stream_data, "stream CSV (labels, if any, are used only for scoring)");

  cli_detail::add_data_options(synth, cfg);
  synth->add_option("--out", out_dir, "output CSV path")->required();
  synth->add_flag("--stream", stream_flag, "write a windowed stream instead of a class-balanced dataset");
  synth->add_option("--window", cfg.window, "segments per stream window")->capture_default_str();

  plot->add_option("--dir", plot_dir, "trial or suite output directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    cli_detail::report_error(err, e.what());
    CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return kExitConfig;
  } catch (const Error& e) {
    cli_detail::report_error(err, e.what());
    return kExitConfig;
  }

  if (!out_dir.empty()) cfg.out = out_dir;
  if (withhold_flag) cfg.withhold = withhold_flag;
  if (k_flag) cfg.k = k_flag;
  if (stream_data) cfg.stream.data = stream_data;
  if (stream_windows) cfg.stream.windows = *stream_windows;
  if (novel_class) cfg.stream.novel_class = novel_class;
  if (!novel_windows.empty()) cfg.stream.novel_windows = novel_windows;

  try {
    if (discover->parsed() && !cfg.withhold) throw CLI::RequiredError("--withhold");
  } catch (const CLI::ParseError& e) {
    cli_detail::report_error(err, std::string(e.what()) + " (existing-novel requires withheld class)");
    err << discover->help();
    return kExitConfig;
  }

  // Configuration errors (exit 2) are everything raised before a stage runs.
  std::optional<SynthSpec> spec;
  Dataset data;
  const std::filesystem::path out_path = cfg.out.value_or(".");
  try {
    if (suite->parsed() || deploy->parsed()) cfg.withhold.reset();
    cfg.validate();
    if (cfg.synth) spec = resolve_synth_spec(*cfg.synth);
    if (deploy->parsed() && spec && !cfg.stream.novel_class && spec->name == "deploy")
      cfg.stream.novel_class = spec->classes.back().index;
    if (deploy->parsed() && spec && cfg.stream.novel_class && cfg.stream.novel_windows.empty() && !cfg.stream.data)
      cfg.stream.novel_windows = {cfg.stream.windows / 2};
    if (!plot->parsed() && !synth->parsed()) {
      data = deploy->parsed() ? cli_detail::deploy_labeled(cfg, spec ? &*spec : nullptr)
                              : (spec ? synth_generate(*spec, derive_seed(cfg.seed, "data")) : load_dataset(cfg));
      data.validate();
      if (cfg.withhold && !data.has_class(*cfg.withhold))
        throw ConfigError("withheld class " + std::to_string(*cfg.withhold) + " is not declared by the dataset");
    }
  } catch (const Error& e) {
    cli_detail::report_error(err, e.what());
    return kExitConfig;
  }
  const nlohmann::json cfg_json = to_json(cfg);

  try {
    if (discover->parsed() || control->parsed()) {
      const auto trial = cfg.trial();
      auto r = discover->parsed() ? run_existing_discovery(data, trial) : run_negative_control(data, trial);
      write_trial_artifacts(out_path, r, cfg_json);
      cli_detail::print_trial_summary(out, r);
    } else if (suite->parsed()) {
      auto s = run_suite(data, cfg.trial(), cfg.jobs);
      write_suite_artifacts(out_path, s, cfg_json);
      for (const auto& r : s.existing) cli_detail::print_trial_summary(out, r);
      for (const auto& r : s.control) cli_detail::print_trial_summary(out, r);
      for (const auto* rows : {&s.existing, &s.control})
        for (const auto& r : *rows)
          if (r.error) cli_detail::report_error(err, r.name + " (" + to_string(r.kind) + "): " + *r.error);
    } else if (deploy->parsed()) {
      Dataset stream;
      if (cfg.stream.data) {
        stream = load_csv(*cfg.stream.data);
      } else if (spec) {
        stream = synth_stream(*spec, derive_seed(cfg.seed, "stream"), cfg.stream.windows, cfg.window,
                              cfg.stream.novel_class, cfg.stream.novel_windows);
      } else {
        throw ConfigError("deploy needs --stream <csv> or a synthetic spec");
      }
      auto d = run_deployment(data, stream, cfg.deploy());
      write_deployment_artifacts(out_path, d, cfg_json);
      out << "deploy: window " << d.window << ", stride " << d.stride << ", k " << d.k << '\n';
      for (const auto& w : d.windows)
        out << "window " << w.index << ": " << w.size << " segments, " << (w.novel ? "novel" : "no novelty")
            << (w.short_window ? " (short)" : "") << '\n';
    } else if (synth->parsed()) {
      if (!spec) throw ConfigError("synth needs --synth <preset> or --spec <spec.json>");
      Dataset d = stream_flag ? synth_stream(*spec, derive_seed(cfg.seed, "stream"), cfg.stream.windows, cfg.window,
                                             cfg.stream.novel_class, cfg.stream.novel_windows)
                              : synth_generate(*spec, derive_seed(cfg.seed, "data"));
      save_csv(out_path, d);
      out << "wrote " << d.size() << " snippets to " << out_path.string() << '\n';
    } else if (plot->parsed()) {
      std::vector<std::filesystem::path> dirs;
      if (std::filesystem::exists(std::filesystem::path(plot_dir) / "suite.json")) {
        for (const char* sub : {"existing", "control"}) {
          const auto base = std::filesystem::path(plot_dir) / sub;
          if (!std::filesystem::exists(base)) continue;
          std::vector<std::filesystem::path> found;
          for (const auto& entry : std::filesystem::directory_iterator(base))
            if (entry.is_directory()) found.push_back(entry.path());
          std::sort(found.begin(), found.end());
          dirs.insert(dirs.end(), found.begin(), found.end());
        }
      } else {
        dirs.push_back(plot_dir);
      }
      for (const auto& dir : dirs)
        if (std::filesystem::exists(dir / "coords.csv"))
          for (const auto& p : replot_trial(dir)) out << "wrote " << p.string() << '\n';
    }
  } catch (const ConfigError& e) {
    cli_detail::report_error(err, e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    cli_detail::report_error(err, e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace bdisc
