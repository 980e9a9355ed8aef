// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "advlab/errors.hpp"
#include "advlab/models.hpp"
#include "doctest.h"
#include "primitive_cases.hpp"

using namespace advlab;
using namespace advlab::models;

TEST_CASE("desk default schema") {
  const auto s = ModelSchema::desk_default(HeadKind::kPrototype);
  CHECK(s.input_shape == Shape{32, 64, 1});
  CHECK(s.embedding_shape() == Shape{8, 16, 32});
  CHECK(s.num_classes == 6);
  CHECK(s.num_prototypes() == 18);
  CHECK(parse_head("linear") == HeadKind::kLinear);
  CHECK_THROWS_AS(parse_head("mlp"), ConfigError);
}

TEST_CASE("schema validation") {
  auto s = ModelSchema::desk_default(HeadKind::kPrototype);
  s.prototypes_per_class = 0;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = ModelSchema::desk_default(HeadKind::kLinear);
  s.conv.clear();
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = ModelSchema::desk_default(HeadKind::kLinear);
  s.input_shape = {0, 64, 1};
  CHECK_THROWS_AS(s.validate(), ContractError);
}

TEST_CASE("init_params: determinism, seeds differ, unit-norm prototypes") {
  auto s = ModelSchema::desk_default(HeadKind::kPrototype);
  s.num_classes = 2;
  const auto a = init_params(s, 7), b = init_params(s, 7), c = init_params(s, 8);
  CHECK(bitwise_equal(a, b));
  CHECK_FALSE(bitwise_equal(a, c));
  const Tensor& p = a.at("prototypes");
  REQUIRE(p.shape() == Shape{6, 32});
  for (std::size_t j = 0; j < 6; ++j) {
    double n = 0.0;
    for (std::size_t e = 0; e < 32; ++e) n += p[j * 32 + e] * p[j * 32 + e];
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
  }
  const Tensor& w = a.at("head.weight");
  CHECK(w[0 * 6 + 0] == 1.0);
  CHECK(w[0 * 6 + 3] == -0.5);
  CHECK(w[1 * 6 + 4] == 1.0);
}

TEST_CASE("parameter layout names and shapes") {
  const auto lin = parameter_layout(ModelSchema::desk_default(HeadKind::kLinear));
  REQUIRE(lin.size() == 8);
  CHECK(lin[0].first == "conv0.weight");
  CHECK(lin[0].second == Shape{3, 3, 1, 8});
  CHECK(lin[6].first == "head.weight");
  CHECK(lin[6].second == Shape{6, 32});
  const auto proto = parameter_layout(ModelSchema::desk_default(HeadKind::kPrototype));
  CHECK(proto[6].first == "prototypes");
  CHECK(proto[7].second == Shape{6, 18});
}

TEST_CASE("embed: zero weights give a zero map; hand-set 2x2 convolution") {
  ModelSchema s;
  s.input_shape = {2, 2, 1};
  s.num_classes = 1;
  s.conv = {{1, 2, 1, 0}};
  s.head = HeadKind::kLinear;
  Model m(s);
  auto params = init_params(s, 1);
  for (double& v : params.at("conv0.weight").values()) v = 0.0;
  const Tensor x({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  CHECK(m.embed(params, x).max_abs() == 0.0);

  // Weights [1, -1, 2, 0.5] and bias 0.25 -> 1 - 2 + 6 + 2 + 0.25 = 7.25.
  params.at("conv0.weight") = Tensor({2, 2, 1, 1}, {1.0, -1.0, 2.0, 0.5});
  params.at("conv0.bias") = Tensor({1}, {0.25});
  const Tensor z = m.embed(params, x);
  REQUIRE(z.shape() == Shape{1, 1, 1});
  CHECK(z[0] == 7.25);
  CHECK(bitwise_equal(z, m.embed(params, x)));
  CHECK_THROWS_AS(m.embed(params, Tensor({2, 3, 1})), ContractError);
}

TEST_CASE("classify_linear: sigmoid(0) and hand affine") {
  ModelSchema s;
  s.input_shape = {1, 1, 2};
  s.num_classes = 2;
  s.conv = {{2, 1, 1, 0}};
  s.head = HeadKind::kLinear;
  Model m(s);
  auto params = init_params(s, 1);
  params.at("head.weight") = Tensor({2, 2});
  auto pred = m.classify_linear(params, Tensor({1, 1, 2}));
  CHECK(pred.scores[0] == 0.5);
  CHECK(pred.scores[1] == 0.5);

  params.at("head.weight") = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
  pred = m.classify_linear(params, Tensor({1, 1, 2}, {1.0, 2.0}));
  CHECK(pred.logits[0] == 1.0);
  CHECK(pred.logits[1] == 2.0);
  CHECK(pred.scores[1] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
}

TEST_CASE("classify_linear is invariant to spatial permutations of z") {
  const auto s = ModelSchema::desk_default(HeadKind::kLinear);
  Model m(s);
  const auto params = init_params(s, 3);
  std::mt19937_64 rng(3);
  const Tensor z = testing::random_tensor(rng, s.embedding_shape(), -1.0, 1.0);
  Tensor flipped(z.shape());
  const std::size_t d = s.embedding_dim(), positions = z.size() / d;
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t c = 0; c < d; ++c) flipped[(positions - 1 - p) * d + c] = z[p * d + c];
  const auto a = m.classify_linear(params, z).scores, b = m.classify_linear(params, flipped).scores;
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-13));
}

TEST_CASE("classify_prototype: hand cosine examples") {
  ModelSchema s;
  s.input_shape = {1, 2, 2};
  s.num_classes = 1;
  s.conv = {{2, 1, 1, 0}};
  s.head = HeadKind::kPrototype;
  s.prototypes_per_class = 1;
  Model m(s);
  auto params = init_params(s, 1);
  params.at("prototypes") = Tensor({1, 2}, {1.0, 0.0});

  auto [pred, act] = m.classify_prototype(params, Tensor({1, 2, 2}, {1.0, 0.0, 0.6, 0.8}));
  CHECK(act[0] == 1.0);
  // Orthogonal everywhere, and a zero-norm position: both give similarity 0.
  auto [pred2, act2] = m.classify_prototype(params, Tensor({1, 2, 2}, {0.0, 3.0, 0.0, 0.0}));
  CHECK(act2[0] == 0.0);
  // Opposed vectors are rectified to 0 as well.
  auto [pred3, act3] = m.classify_prototype(params, Tensor({1, 2, 2}, {-1.0, 0.0, -2.0, 0.0}));
  CHECK(act3[0] == 0.0);
  CHECK(pred3.scores[0] == doctest::Approx(1.0 / (1.0 + std::exp(-params.at("head.bias")[0]))).epsilon(1e-15));

  CHECK_THROWS_AS(m.classify_linear(params, Tensor({1, 2, 2})), ContractError);
}

TEST_CASE("prototype head bias centers logits at mid-range activations") {
  const auto s = ModelSchema::desk_default(HeadKind::kPrototype);
  const auto params = init_params(s, 1);
  const Tensor& w = params.at("head.weight");
  const Tensor& b = params.at("head.bias");
  for (std::size_t k = 0; k < s.num_classes; ++k) {
    double logit = b[k];
    for (std::size_t j = 0; j < s.num_prototypes(); ++j) logit += 0.5 * w[k * s.num_prototypes() + j];
    CHECK(std::abs(logit) < 1e-12);
  }
}

TEST_CASE("composition: head(embed(x)) equals the end-to-end forward bitwise; ranges hold") {
  for (auto head : {HeadKind::kLinear, HeadKind::kPrototype}) {
    const auto s = ModelSchema::desk_default(head);
    Model m(s);
    const auto params = init_params(s, 5);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 3; ++trial) {
      const Tensor x = testing::random_tensor(rng, s.input_shape, -1.0, 1.0);
      const Tensor z = m.embed(params, x);
      const Prediction composed = head == HeadKind::kLinear ? m.classify_linear(params, z)
                                                             : m.classify_prototype(params, z).prediction;
      const Prediction direct = m.predict(params, x);
      CHECK(bitwise_equal(composed.scores, direct.scores));
      CHECK(bitwise_equal(composed.logits, direct.logits));
      for (double v : direct.scores.values()) CHECK((v >= 0.0 && v <= 1.0));
      if (head == HeadKind::kPrototype) {
        const Tensor act = m.classify_prototype(params, z).activations;
        for (double a : act.values()) CHECK((a >= 0.0 && a <= 1.0));
      }
    }
  }
}

TEST_CASE("checkpoint round trip is bitwise; corrupt files are rejected") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "advlab_test_ckpt";
  fs::create_directories(dir);
  for (auto head : {HeadKind::kLinear, HeadKind::kPrototype}) {
    const auto params = init_params(ModelSchema::desk_default(head), 9);
    save_checkpoint(params, dir / "p.bin");
    const auto back = load_checkpoint(dir / "p.bin");
    CHECK(bitwise_equal(params, back));
  }
  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("schema JSON round trip") {
  auto s = ModelSchema::desk_default(HeadKind::kPrototype);
  s.prototypes_per_class = 4;
  CHECK(schema_from_json(schema_to_json(s)) == s);
}
