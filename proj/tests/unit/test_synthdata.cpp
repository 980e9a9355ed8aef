// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "advlab/errors.hpp"
#include "advlab/synthdata.hpp"
#include "doctest.h"

using namespace advlab;
using namespace advlab::synth;

namespace {

CorpusConfig small(std::uint64_t seed, std::size_t train = 64) {
  CorpusConfig c;
  c.train = train;
  c.val = 16;
  c.test = 32;
  c.seed = seed;
  return c;
}

bool same(const std::vector<Instance>& a, const std::vector<Instance>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || !bitwise_equal(a[i].x, b[i].x) || !bitwise_equal(a[i].y, b[i].y)) return false;
  }
  return true;
}

// Mean over columns of rows [c - 1, c + 1] of the first channel.
double band_energy(const Tensor& x, double center) {
  const std::size_t h = x.shape()[0], w = x.shape()[1], ch = x.shape()[2];
  const auto c = static_cast<std::size_t>(std::lround(center));
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t r = c - 1; r <= std::min(c + 1, h - 1); ++r)
    for (std::size_t col = 0; col < w; ++col, ++n) s += x[(r * w + col) * ch];
  return s / static_cast<double>(n);
}

}  // namespace

TEST_CASE("corpus generation is deterministic per seed") {
  const auto a = generate_corpus(small(3)), b = generate_corpus(small(3)), c = generate_corpus(small(4));
  CHECK(same(a.train, b.train));
  CHECK(same(a.test, b.test));
  CHECK_FALSE(same(a.train, c.train));
  CHECK(a.train.front().x.shape() == Shape{32, 64, 1});
  CHECK_FALSE(a.standardized);
}

TEST_CASE("labels match the placed patterns") {
  const auto corpus = generate_corpus(small(5));
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (const auto& inst : corpus.split(s)) {
      std::set<std::size_t> placed;
      for (const auto& p : inst.patterns) placed.insert(p.class_id);
      CHECK((placed.size() >= 1 && placed.size() <= 3));
      for (std::size_t k = 0; k < 6; ++k) CHECK(inst.y[k] == (placed.count(k) ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("class positive rates stay within 20% of the target") {
  CorpusConfig c = small(6, 1000);
  const auto corpus = generate_corpus(c);
  const double target = c.target_positive_rate();
  for (std::size_t k = 0; k < 6; ++k) {
    double pos = 0.0;
    for (const auto& inst : corpus.train) pos += inst.y[k];
    const double rate = pos / 1000.0;
    CHECK(std::abs(rate - target) <= 0.2 * target);
  }
}

TEST_CASE("class geometry: distinct bands and slopes inside the map") {
  std::set<double> slopes;
  for (std::size_t k = 0; k < 6; ++k) {
    const auto [center, slope] = class_geometry(k, 6, 32);
    CHECK(center == doctest::Approx(32.0 * (k + 1) / 7.0));
    CHECK(std::abs(slope) <= 0.6);
    slopes.insert(slope);
  }
  CHECK(slopes.size() == 6);
  CorpusConfig tiny = small(1);
  tiny.input_shape = {12, 64, 1};
  CHECK_THROWS_AS(generate_corpus(tiny), ConfigError);
}

TEST_CASE("standardize: fixed constants and inverse") {
  const Tensor x({3}, {-13.369, -0.207, 5.0});
  const Tensor z = standardize(x);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == doctest::Approx(1.0).epsilon(1e-3));
  const Tensor back = destandardize(z);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(back[i] - x[i]) < 1e-12);
  const auto corpus = standardize(generate_corpus(small(7)));
  CHECK(corpus.standardized);
}

TEST_CASE("mixup: no-op at probability 0, union labels and mean inputs otherwise") {
  const auto corpus = standardize(generate_corpus(small(8)));
  std::vector<Instance> batch(corpus.train.begin(), corpus.train.begin() + 8);
  CHECK(same(mixup_multilabel(batch, 0.0, 3, 1), batch));

  // Two instances with labels {1} and {3}.
  std::vector<Instance> pair(2);
  pair[0] = batch[0];
  pair[1] = batch[1];
  pair[0].y = Tensor({6}, {0, 1, 0, 0, 0, 0});
  pair[1].y = Tensor({6}, {0, 0, 0, 1, 0, 0});
  const auto mixed = mixup_multilabel(pair, 1.0, 2, 2);
  for (const auto& m : mixed) {
    CHECK(bitwise_equal(m.y, Tensor({6}, {0, 1, 0, 1, 0, 0})));
    for (std::size_t i = 0; i < m.x.size(); ++i) {
      CHECK(std::abs(m.x[i] - 0.5 * (pair[0].x[i] + pair[1].x[i])) < 1e-12);
    }
  }
  CHECK(same(mixup_multilabel(batch, 0.5, 3, 9), mixup_multilabel(batch, 0.5, 3, 9)));
}

TEST_CASE("no-call injection") {
  const CorpusConfig cfg = small(9);
  const auto corpus = standardize(generate_corpus(cfg));
  const auto& batch = corpus.train;
  CHECK(same(inject_nocall(batch, 0.0, 1, cfg), batch));
  const auto all = inject_nocall(batch, 1.0, 1, cfg);
  for (const auto& inst : all) {
    CHECK(inst.y.max_abs() == 0.0);
    CHECK(inst.patterns.empty());
  }

  // Band energy of replaced inputs sits below the 99th percentile of fresh backgrounds.
  std::mt19937_64 rng(10);
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    const double center = class_geometry(k, cfg.num_classes, 32).first;
    std::vector<double> floor;
    for (int i = 0; i < 200; ++i) floor.push_back(band_energy(background(cfg, false, rng), center));
    std::sort(floor.begin(), floor.end());
    const double p99 = floor[197];
    int above = 0;
    for (const auto& inst : all) above += band_energy(inst.x, center) > p99;
    CHECK(above <= 3);
  }
}

TEST_CASE("export and import round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "advlab_test_corpus";
  fs::remove_all(dir);
  const auto corpus = generate_corpus(small(11));
  export_corpus(corpus, dir);
  const auto back = import_corpus(dir);
  CHECK(back.config == corpus.config);
  CHECK(same(back.train, corpus.train));
  CHECK(same(back.val, corpus.val));
  CHECK(same(back.test, corpus.test));
  fs::remove_all(dir);
}

TEST_CASE("config JSON round trip and validation") {
  CorpusConfig c = small(12);
  c.mixup = {0.3, 2};
  c.shift = ShiftConfig::neutral();
  CHECK(config_from_json(config_to_json(c)) == c);
  c.nocall_probability = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("neutral shift: test split drawn like train") {
  CorpusConfig c = small(13, 400);
  c.test = 400;
  c.shift = ShiftConfig::neutral();
  const auto corpus = generate_corpus(c);
  auto mean_sq = [](const std::vector<Instance>& v) {
    double s = 0.0, n = 0.0;
    for (const auto& inst : v)
      for (double x : standardize(inst.x).values()) s += x * x, n += 1.0;
    return s / n;
  };
  CHECK(mean_sq(corpus.test) == doctest::Approx(mean_sq(corpus.train)).epsilon(0.05));
  CorpusConfig shifted = c;
  shifted.shift = ShiftConfig{};
  const auto s = generate_corpus(shifted);
  CHECK(mean_sq(s.test) > 1.1 * mean_sq(s.train));
}
