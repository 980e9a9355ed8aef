// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "advlab/errors.hpp"
#include "advlab/metrics.hpp"
#include "doctest.h"
#include "metric_oracles.hpp"

using namespace advlab;
using namespace advlab::metrics;

TEST_CASE("average precision: hand examples") {
  CHECK(average_precision(std::vector{0.9, 0.8, 0.1}, std::vector{1.0, 1.0, 0.0}) == 1.0);
  CHECK(average_precision(std::vector{0.2, 0.9}, std::vector{1.0, 0.0}) == 0.5);
  CHECK(average_precision(std::vector{0.9, 0.8, 0.7}, std::vector{1.0, 0.0, 1.0}) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  // Equal scores keep the original order.
  CHECK(average_precision(std::vector{0.5, 0.5}, std::vector{0.0, 1.0}) == 0.5);
  CHECK_THROWS_AS(average_precision(std::vector{0.5, 0.4}, std::vector{0.0, 0.0}), ContractError);
}

TEST_CASE("cmap: means, exclusions") {
  // class 0 AP 1.0, class 1 AP 0.5, class 2 has no positives
  const EvaluationBatch b(2, 3, {1, 0, 0, 0, 1, 0}, {0.9, 0.9, 0.1, 0.2, 0.1, 0.3});
  const auto d = cmap_detail(b);
  CHECK(d.value == 0.75);
  CHECK(d.excluded == std::vector<std::size_t>{2});
  CHECK_THROWS_AS(cmap(EvaluationBatch(2, 1, {0, 0}, {0.1, 0.2})), ContractError);
}

TEST_CASE("auroc: hand examples, ties and exclusions") {
  CHECK(auroc(EvaluationBatch(4, 1, {1, 0, 1, 0}, {0.9, 0.8, 0.3, 0.1})) == 0.75);
  CHECK(auroc(EvaluationBatch(4, 1, {1, 1, 0, 0}, {0.9, 0.8, 0.3, 0.1})) == 1.0);
  const EvaluationBatch flat(3, 1, {1, 0, 0}, {0.4, 0.4, 0.4});
  CHECK(auroc(flat) == 0.5);
  CHECK(auroc(flat, TieMode::kStrict) == 0.0);
  const auto d = auroc_detail(EvaluationBatch(2, 2, {1, 1, 0, 1}, {0.9, 0.2, 0.1, 0.3}));
  CHECK(d.value == 1.0);
  CHECK(d.excluded == std::vector<std::size_t>{1});
}

TEST_CASE("top-1 accuracy") {
  CHECK(top1_accuracy(EvaluationBatch(1, 2, {0, 1}, {0.1, 0.9})) == 1.0);
  CHECK(top1_accuracy(EvaluationBatch(1, 2, {0, 0}, {0.1, 0.9})) == 0.0);
  CHECK(top1_accuracy(EvaluationBatch(3, 2, {1, 0, 0, 1, 1, 0}, {0.8, 0.1, 0.3, 0.6, 0.2, 0.7})) ==
        doctest::Approx(2.0 / 3.0));
  // argmax ties go to the lowest class index
  CHECK(top1_accuracy(EvaluationBatch(1, 2, {0, 1}, {0.5, 0.5})) == 0.0);
}

TEST_CASE("cmap and auroc agree with brute-force oracles") {
  std::mt19937_64 rng(41);
  for (int i = 0; i < 200; ++i) {
    const auto b = testing::random_batch(rng, i % 4 == 3);
    CHECK(std::abs(cmap(b) - testing::brute_cmap(b)) < 1e-12);
    CHECK(std::abs(auroc(b) - testing::brute_auroc(b)) < 1e-12);
    CHECK(std::abs(auroc(b, TieMode::kStrict) - testing::brute_auroc(b, false)) < 1e-12);
  }
}

TEST_CASE("order and permutation invariance; ranges") {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 50; ++i) {
    const auto b = testing::random_batch(rng);
    std::vector<double> cubed, permuted_scores, permuted_labels;
    for (std::size_t r = 0; r < b.instances(); ++r)
      for (std::size_t k = 0; k < b.classes(); ++k) cubed.push_back(std::pow(b.score(r, k), 3.0));
    const auto c = b.with_scores(cubed);
    CHECK(std::abs(cmap(c) - cmap(b)) < 1e-12);
    CHECK(std::abs(auroc(c) - auroc(b)) < 1e-12);

    std::vector<std::size_t> order(b.instances());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t r : order) {
      for (std::size_t k = 0; k < b.classes(); ++k) {
        permuted_scores.push_back(b.score(r, k));
        permuted_labels.push_back(b.label(r, k));
      }
    }
    const EvaluationBatch p(b.instances(), b.classes(), permuted_labels, permuted_scores);
    CHECK(std::abs(cmap(p) - cmap(b)) < 1e-12);
    CHECK(std::abs(auroc(p) - auroc(b)) < 1e-12);
    for (double v : {cmap(b), auroc(b), top1_accuracy(b)}) CHECK((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("robustness scores: closed forms") {
  CHECK(std::abs(prs_from_cmap(0.5, 0.25) - std::exp(-1.0)) < 1e-9);
  CHECK(prs_from_cmap(0.5, 0.5) == 1.0);
  CHECK(prs_from_cmap(0.5, 0.9) == 1.0);
  CHECK(prs_from_cmap(0.5, 0.0) < 1e-12);
  CHECK(std::abs(drs_from_distances(0.8, 0.4) - std::exp(-1.0)) < 1e-9);
  CHECK(drs_from_distances(0.8, 0.0) < 1e-12);
  CHECK(std::abs(tars(0.4, 0.8) - 8.0 / 15.0) < 1e-9);
  CHECK(tars(0.5, 0.5) == 0.5);
  CHECK(tars(0.0, 0.7) == 0.0);
  CHECK(tars(0.0, 0.0) == 0.0);

  const EvaluationBatch b(2, 1, {1, 0}, {0.9, 0.1});
  CHECK(prs(b, b) == 1.0);
  const Tensor z({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(drs(z, z, Tensor({2}, {1.0, 1.0})) == 1.0);
}

TEST_CASE("PRS is nondecreasing in the adversarial cmAP; TARS lies between its inputs") {
  double prev = 0.0;
  for (double adv = 0.0; adv <= 1.0; adv += 0.001) {
    const double v = prs_from_cmap(0.6, adv);
    CHECK(v >= prev);
    prev = v;
  }
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(1e-9, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const double p = u(rng), d = u(rng), t = tars(p, d);
    CHECK((t >= std::min(p, d) - 1e-15 && t <= std::max(p, d) + 1e-15));
  }
}
