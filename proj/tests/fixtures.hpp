#pragma once

#include <bdisc/protocols.hpp>
#include <bdisc/synth.hpp>

#include <gtest/gtest.h>

#include "geometry.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace bdisc::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& name) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string tag = name;
    if (info) tag += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / ("bdisc_" + tag);
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Two well separated wave classes for quick training tests.
inline SynthSpec two_class_spec(std::size_t n0 = 20, std::size_t n1 = 20) {
  SynthSpec s;
  s.name = "two";
  SynthClass a;
  a.index = 0;
  a.name = "Still";
  a.count = n0;
  a.modes.push_back(detail::wave({0.0, 0.0, 1.0, 0.0}, {0.0, 0.0, 0.0, 0.0}, 0.0, 0.02));
  SynthClass b;
  b.index = 1;
  b.name = "Beat";
  b.count = n1;
  b.modes.push_back(detail::wave({0.3, 0.1, 0.8, 0.6}, {0.6, 0.2, 0.8, 0.02}, 4.0, 0.05));
  s.classes = {a, b};
  return s;
}

/// `two_class_spec` plus a slow gliding class.
inline SynthSpec three_class_spec(std::size_t n = 24) {
  auto s = two_class_spec(n, n);
  s.name = "three";
  SynthClass c;
  c.index = 2;
  c.name = "Glide";
  c.count = n;
  c.modes.push_back(detail::wave({-0.4, 0.3, 0.6, 0.3}, {0.1, 0.1, 0.1, 0.02}, 0.5, 0.03));
  s.classes.push_back(c);
  return s;
}

/// Trial settings small enough for unit tests.
inline TrialConfig fast_trial(std::uint64_t seed = 1) {
  TrialConfig c;
  c.seed = seed;
  c.encoder.epochs = 30;
  c.encoder.batch_size = 16;
  c.encoder.learning_rate = 3e-3;
  c.tsne.n_iter = 250;
  c.tsne.exaggeration_iters = 100;
  c.tsne.perplexity = 10.0;
  c.density.mc_samples = 500;
  return c;
}

}  // namespace bdisc::test
