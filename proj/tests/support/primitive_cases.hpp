// SPDX-License-Identifier: Apache-2.0
#pragma once

// One small graph per differentiable primitive, each reduced to a scalar by a
// fixed random weighting so every input element gets a distinct gradient.
// Shared by the unit tests and the acceptance runner.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advlab/graph.hpp"

namespace advlab::testing {

struct PrimitiveCase {
  std::string name;
  diff::Graph graph;
  std::vector<std::string> leaves;
  // Draws a fresh point: one tensor per leaf, in `leaves` order.
  std::function<std::vector<Tensor>(std::mt19937_64&)> sample;
};

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline std::vector<PrimitiveCase> primitive_cases() {
  using diff::GraphBuilder;
  using diff::NodeId;
  std::vector<PrimitiveCase> cases;
  std::mt19937_64 wrng(7);

  // y = sum(w ⊙ node) with a constant random weighting w.
  auto finish = [&](GraphBuilder& b, NodeId node) {
    Tensor w = random_tensor(wrng, b.shape(node).empty() ? Shape{} : b.shape(node), 0.5, 1.5);
    if (b.shape(node).empty()) {
      b.output("y", node);
    } else {
      b.output("y", b.sum(b.mul(node, b.constant(std::move(w)))));
    }
  };
  auto unary_case = [&](std::string name, auto op, double lo, double hi) {
    GraphBuilder b;
    NodeId x = b.input("x", {5});
    finish(b, op(b, x));
    cases.push_back({std::move(name), std::move(b).build(), {"x"},
                     [lo, hi](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor(r, {5}, lo, hi)}; }});
  };
  auto binary_case = [&](std::string name, auto op) {
    GraphBuilder b;
    NodeId x = b.input("a", {2, 2});
    NodeId y = b.input("b", {2, 2});
    finish(b, op(b, x, y));
    cases.push_back({std::move(name), std::move(b).build(), {"a", "b"}, [](std::mt19937_64& r) {
                       return std::vector<Tensor>{random_tensor(r, {2, 2}), random_tensor(r, {2, 2})};
                     }});
  };

  unary_case("relu", [](GraphBuilder& b, NodeId x) { return b.relu(x); }, -1.0, 1.0);
  unary_case("sigmoid", [](GraphBuilder& b, NodeId x) { return b.sigmoid(x); }, -3.0, 3.0);
  unary_case("log", [](GraphBuilder& b, NodeId x) { return b.log(x); }, 0.2, 2.0);
  unary_case("exp", [](GraphBuilder& b, NodeId x) { return b.exp(x); }, -2.0, 2.0);
  unary_case("clamp", [](GraphBuilder& b, NodeId x) { return b.clamp(x, -0.5, 0.5); }, -1.0, 1.0);
  unary_case("pow", [](GraphBuilder& b, NodeId x) { return b.pow(x, 2.5); }, 0.1, 2.0);
  unary_case("scale", [](GraphBuilder& b, NodeId x) { return b.scale(x, -1.7); }, -1.0, 1.0);
  unary_case("shift", [](GraphBuilder& b, NodeId x) { return b.shift(x, 0.3); }, -1.0, 1.0);
  unary_case("sum", [](GraphBuilder& b, NodeId x) { return b.sum(b.mul(x, x)); }, -1.0, 1.0);
  unary_case("mean", [](GraphBuilder& b, NodeId x) { return b.mean(b.mul(x, x)); }, -1.0, 1.0);
  binary_case("add", [](GraphBuilder& b, NodeId x, NodeId y) { return b.add(x, y); });
  binary_case("sub", [](GraphBuilder& b, NodeId x, NodeId y) { return b.sub(x, y); });
  binary_case("mul", [](GraphBuilder& b, NodeId x, NodeId y) { return b.mul(x, y); });
  binary_case("cosine_pairwise",
              [](GraphBuilder& b, NodeId x, NodeId y) { return b.cosine_pairwise(x, y, diff::ZeroNormPolicy::kError); });

  {
    GraphBuilder b;
    NodeId x = b.input("x", {3});
    NodeId w = b.parameter("w", {2, 3});
    NodeId c = b.parameter("c", {2});
    finish(b, b.affine(x, w, c));
    cases.push_back({"affine", std::move(b).build(), {"x", "w", "c"}, [](std::mt19937_64& r) {
                       return std::vector<Tensor>{random_tensor(r, {3}), random_tensor(r, {2, 3}),
                                                  random_tensor(r, {2})};
                     }});
  }
  for (std::size_t stride : {1u, 2u}) {
    GraphBuilder b;
    NodeId x = b.input("x", {5, 6, 2});
    NodeId w = b.parameter("w", {3, 3, 2, 3});
    NodeId c = b.parameter("c", {3});
    finish(b, b.conv2d(x, w, c, stride, 1));
    cases.push_back({"conv2d_stride" + std::to_string(stride), std::move(b).build(), {"x", "w", "c"},
                     [](std::mt19937_64& r) {
                       return std::vector<Tensor>{random_tensor(r, {5, 6, 2}), random_tensor(r, {3, 3, 2, 3}),
                                                  random_tensor(r, {3})};
                     }});
  }
  {
    GraphBuilder b;
    NodeId x = b.input("x", {3, 4, 2});
    finish(b, b.global_avg_pool(x));
    cases.push_back({"global_avg_pool", std::move(b).build(), {"x"},
                     [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor(r, {3, 4, 2})}; }});
  }
  {
    GraphBuilder b;
    NodeId x = b.input("x", {3, 4, 2});
    finish(b, b.spatial_max(x));
    cases.push_back({"spatial_max", std::move(b).build(), {"x"},
                     [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor(r, {3, 4, 2})}; }});
  }
  {
    GraphBuilder b;
    NodeId x = b.input("z", {2, 3, 4});
    NodeId p = b.parameter("bank", {5, 4});
    finish(b, b.cosine_bank(x, p, diff::ZeroNormPolicy::kError));
    cases.push_back({"cosine_bank", std::move(b).build(), {"z", "bank"}, [](std::mt19937_64& r) {
                       return std::vector<Tensor>{random_tensor(r, {2, 3, 4}), random_tensor(r, {5, 4})};
                     }});
  }
  {
    // sign is locally constant away from 0, so blocking its gradient agrees
    // with finite differences. stop_gradient cannot be checked this way.
    GraphBuilder b;
    NodeId x = b.input("x", {4});
    finish(b, b.mul(b.sign(x), x));
    cases.push_back({"sign", std::move(b).build(), {"x"},
                     [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor(r, {4}, 0.2, 1.0)}; }});
  }
  return cases;
}

struct GradcheckSummary {
  double worst_relative = 0.0;
  std::size_t points = 0;
  std::size_t skipped = 0;
};

// Evaluates `points` random points away from kinks (margin >= 1e-3) and
// returns the worst relative error seen.
inline GradcheckSummary gradcheck_case(const PrimitiveCase& c, std::size_t points, std::uint64_t seed,
                                       double step = 1e-5) {
  std::mt19937_64 rng(seed);
  GradcheckSummary s;
  while (s.points < points) {
    std::vector<Tensor> values = c.sample(rng);
    diff::Bindings in;
    for (std::size_t i = 0; i < c.leaves.size(); ++i) in.bind(c.leaves[i], values[i]);
    if (diff::kink_margin(diff::evaluate(c.graph, in)) < 1e-3) {
      ++s.skipped;
      continue;
    }
    auto report = diff::finite_difference_check(c.graph, in, c.leaves, step, 1e-4);
    s.worst_relative = std::max(s.worst_relative, report.max_relative_error);
    ++s.points;
  }
  return s;
}

}  // namespace advlab::testing
