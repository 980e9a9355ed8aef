// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "advlab/attacks.hpp"
#include "advlab/errors.hpp"
#include "advlab/metrics.hpp"
#include "advlab/training.hpp"
#include "doctest.h"

using namespace advlab;
using namespace advlab::training;
using models::HeadKind;

namespace {

synth::CorpusConfig tiny_corpus(std::uint64_t seed) {
  synth::CorpusConfig c;
  c.train = 48;
  c.val = 16;
  c.test = 16;
  c.seed = seed;
  return c;
}

OptimizerConfig short_run(std::size_t epochs) {
  OptimizerConfig o;
  o.epochs = epochs;
  o.batch_size = 16;
  return o;
}

}  // namespace

TEST_CASE("cosine schedule") {
  // 100 steps, 10 warm-up
  CHECK(cosine_schedule(0, 100, 0.1, 1e-2) == 0.0);
  CHECK(cosine_schedule(5, 100, 0.1, 1e-2) == doctest::Approx(5e-3));
  CHECK(cosine_schedule(10, 100, 0.1, 1e-2) == doctest::Approx(1e-2).epsilon(1e-15));
  CHECK(cosine_schedule(55, 100, 0.1, 1e-2) == doctest::Approx(5e-3).epsilon(1e-12));
  CHECK(std::abs(cosine_schedule(100, 100, 0.1, 1e-2)) < 1e-12);
  for (std::size_t s = 0; s <= 100; ++s) {
    const double lr = cosine_schedule(s, 100, 0.1, 1e-2);
    CHECK((lr >= 0.0 && lr <= 1e-2));
  }
  CHECK_THROWS_AS(cosine_schedule(0, 0, 0.1, 1e-2), ContractError);
}

TEST_CASE("randomize_weights") {
  models::ModelSchema big = models::ModelSchema::desk_default(HeadKind::kLinear);
  big.conv = {{64, 3, 2, 1}, {256, 3, 2, 1}};
  const auto p = models::init_params(big, 1);
  REQUIRE(p.scalar_count() > 100000);
  CHECK(models::bitwise_equal(randomize_weights(p, 0.0, 5), p));
  const auto a = randomize_weights(p, 0.01, 5);
  CHECK(models::bitwise_equal(a, randomize_weights(p, 0.01, 5)));
  CHECK_FALSE(models::bitwise_equal(a, randomize_weights(p, 0.01, 6)));
  double s = 0.0, s2 = 0.0, n = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    for (std::size_t e = 0; e < p.at(j).size(); ++e) {
      const double d = a.at(j)[e] - p.at(j)[e];
      s += d, s2 += d * d, n += 1.0;
    }
  }
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::abs(sd - 0.01) < 0.05 * 0.01);
}

TEST_CASE("AWP: zero budget, per-layer norm bound, ascent") {
  const auto corpus = synth::standardize(synth::generate_corpus(tiny_corpus(2)));
  const auto schema = models::ModelSchema::desk_default(HeadKind::kPrototype);
  const models::Model model(schema);
  const auto params = models::init_params(schema, 2);
  TradesAwpConfig cfg;
  cfg.awp_gamma = 0.01;
  int ascended = 0;
  const int batches = 10;
  for (int b = 0; b < batches; ++b) {
    AdversarialBatch batch;
    for (int i = 0; i < 4; ++i) {
      const auto& inst = corpus.train[b * 4 + i];
      batch.x.push_back(&inst.x);
      batch.y.push_back(&inst.y);
      batch.x_adv.push_back(attacks::fgsm_output(model, params, inst.x, inst.y, 0.1).x_adv);
    }
    TradesAwpConfig zero = cfg;
    zero.awp_gamma = 0.0;
    CHECK(awp_perturbation(model, params, batch, zero).all_zero());

    const auto v = awp_perturbation(model, params, batch, cfg);
    for (std::size_t j = 0; j < params.size(); ++j) {
      const double vn = v.entries[j].l2_norm(), bound = cfg.awp_gamma * params.at(j).l2_norm();
      CHECK((vn == 0.0 || std::abs(vn - bound) <= 1e-12 * std::max(1.0, bound)));
    }
    const double before = adversarial_batch_loss(model, params, batch, cfg.lambda_inv, {}).total;
    const double after = adversarial_batch_loss(model, apply_perturbation(params, v), batch, cfg.lambda_inv, {}).total;
    ascended += after > before;
  }
  CHECK(ascended >= 9);
}

TEST_CASE("epochs = 0 returns the initial parameters") {
  const auto corpus = synth::standardize(synth::generate_corpus(tiny_corpus(3)));
  const auto schema = models::ModelSchema::desk_default(HeadKind::kLinear);
  const auto r = train_ordinary(corpus, schema, short_run(0), 9);
  CHECK(models::bitwise_equal(r.params, models::init_params(schema, 9)));
  CHECK(r.log.selected_epoch == 0);
  TrainOptions warm;
  warm.initial = models::init_params(schema, 77);
  CHECK(models::bitwise_equal(train_ordinary(corpus, schema, short_run(0), 9, warm).params, *warm.initial));
}

TEST_CASE("training is deterministic per seed") {
  const auto corpus = synth::standardize(synth::generate_corpus(tiny_corpus(4)));
  const auto schema = models::ModelSchema::desk_default(HeadKind::kPrototype);
  const auto a = train_ordinary(corpus, schema, short_run(2), 4);
  const auto b = train_ordinary(corpus, schema, short_run(2), 4);
  CHECK(models::bitwise_equal(a.params, b.params));
  TradesAwpConfig t;
  t.awp_warmup_epochs = 1;
  const auto c = train_adversarial(corpus, schema, short_run(2), t, 4);
  const auto d = train_adversarial(corpus, schema, short_run(2), t, 4);
  CHECK(models::bitwise_equal(c.params, d.params));
}

TEST_CASE("adversarial log: decomposition, lr bounds, AWP hygiene and warm-up") {
  const auto corpus = synth::standardize(synth::generate_corpus(tiny_corpus(5)));
  const auto schema = models::ModelSchema::desk_default(HeadKind::kLinear);
  const auto opt = short_run(3);
  TradesAwpConfig t;
  t.lambda_inv = 2.5;
  t.awp_warmup_epochs = 1;
  t.space = AttackSpace::kEmbedding;
  const auto r = train_adversarial(corpus, schema, opt, t, 5);
  REQUIRE(r.log.batches.size() == 9);
  for (const auto& b : r.log.batches) {
    CHECK(std::abs(b.total - (b.classification + 2.5 * b.consistency)) <= 1e-12 * std::max(1.0, b.total));
    CHECK((b.lr >= 0.0 && b.lr <= opt.base_lr));
    CHECK(b.awp_applied == (b.epoch - 1 >= t.awp_warmup_epochs));  // epochs count from 1
    if (b.awp_applied) CHECK(b.probe_committed_norm != b.probe_perturbed_norm);
  }
  CHECK(r.log.awp_applications == 6);

  t.awp_warmup_epochs = opt.epochs;
  CHECK(train_adversarial(corpus, schema, opt, t, 5).log.awp_applications == 0);
}

TEST_CASE("a separable two-class set is learned") {
  synth::CorpusConfig c;
  c.num_classes = 2;
  c.input_shape = {16, 64, 1};
  c.train = 200;
  c.val = 50;
  c.test = 10;
  c.noise_std = 0.02;
  c.texture_amplitude = 0.0;
  c.nocall_probability = 0.0;
  c.seed = 6;
  const auto corpus = synth::standardize(synth::generate_corpus(c));
  auto schema = models::ModelSchema::desk_default(HeadKind::kLinear);
  schema.input_shape = c.input_shape;
  schema.num_classes = 2;
  auto opt = short_run(8);
  const auto r = train_ordinary(corpus, schema, opt, 6);
  const models::Model model(schema);
  CHECK(validation_metrics(model, r.params, corpus.val, {}).second > 0.95);
}

TEST_CASE("config validation") {
  OptimizerConfig o;
  o.batch_size = 0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  TradesAwpConfig t;
  t.awp_gamma = -1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}
