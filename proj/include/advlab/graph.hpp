// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over a static computation graph.
//
// A Graph is assembled once with GraphBuilder and is immutable afterwards.
// Evaluation takes the graph plus a set of Bindings (leaf name -> tensor) and
// never mutates either, so one graph may be evaluated concurrently on distinct
// bindings.
//
//   GraphBuilder b;
//   auto x = b.input("x", {2});
//   b.output("y", b.sum(b.sigmoid(x)));
//   Graph g = std::move(b).build();
//   Bindings in;
//   in.bind("x", some_tensor);
//   auto grads = gradient(g, in, {"x"});

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab::diff {

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// What cosine similarity does when an operand has zero norm.
enum class ZeroNormPolicy {
  kError,           // throw NumericError
  kZeroSimilarity,  // similarity 0, zero gradient
};

enum class Op : std::uint8_t {
  kInput,
  kParameter,
  kConstant,
  kAffine,
  kConv2d,
  kRelu,
  kSigmoid,
  kLog,
  kExp,
  kClamp,
  kPow,
  kSign,
  kStopGradient,
  kAdd,
  kSub,
  kMul,
  kScale,
  kShift,
  kSum,
  kMean,
  kGlobalAvgPool,
  kSpatialMax,
  kCosinePairwise,
  kCosineBank,
};

std::string_view op_name(Op op);

struct Node {
  Op op = Op::kConstant;
  std::vector<NodeId> inputs;
  Shape shape;
  std::string name;
  double a = 0.0;  // scale factor, shift offset, clamp low, pow exponent
  double b = 0.0;  // clamp high
  std::size_t stride = 1;
  std::size_t padding = 0;
  ZeroNormPolicy zero_norm = ZeroNormPolicy::kError;
  Tensor constant;
};

class Graph {
 public:
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }

  /// Leaf lookup; throws LookupError for unknown names.
  NodeId leaf(std::string_view name) const;
  bool has_leaf(std::string_view name) const;
  /// Names of all input (data) leaves and parameter leaves, in creation order.
  std::vector<std::string> input_names() const;
  std::vector<std::string> parameter_names() const;

  NodeId output(std::string_view name) const;
  const std::vector<std::pair<std::string, NodeId>>& outputs() const noexcept { return outputs_; }

 private:
  friend class GraphBuilder;
  std::vector<Node> nodes_;
  std::map<std::string, NodeId, std::less<>> leaves_;
  std::vector<std::pair<std::string, NodeId>> outputs_;
};

/// Appends nodes in topological order; every node's inputs already exist.
/// Shapes are inferred eagerly and mismatches throw ContractError here rather
/// than at evaluation time.
class GraphBuilder {
 public:
  NodeId input(std::string name, Shape shape);
  NodeId parameter(std::string name, Shape shape);
  NodeId constant(Tensor value);

  /// x (flattened, length N), weight [M, N], bias [M] -> [M].
  NodeId affine(NodeId x, NodeId weight, NodeId bias);
  /// x [H, W, C_in], weight [K, K, C_in, C_out], bias [C_out] -> [H', W', C_out].
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride, std::size_t padding);

  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId log(NodeId x);
  NodeId exp(NodeId x);
  NodeId clamp(NodeId x, double low, double high);
  /// x^exponent for x >= 0.
  NodeId pow(NodeId x, double exponent);
  /// Forward-only; blocks gradients.
  NodeId sign(NodeId x);
  /// Identity in the forward pass; blocks gradients.
  NodeId stop_gradient(NodeId x);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId shift(NodeId x, double offset);

  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  /// [H, W, C] -> [C]
  NodeId global_avg_pool(NodeId x);
  /// [H, W, C] -> [C], gradient routed to the first maximal position.
  NodeId spatial_max(NodeId x);

  /// a, b [..., D] -> [...]: cosine at every leading position.
  NodeId cosine_pairwise(NodeId a, NodeId b, ZeroNormPolicy policy);
  /// a [..., D], bank [P, D] -> [..., P].
  NodeId cosine_bank(NodeId a, NodeId bank, ZeroNormPolicy policy);

  void output(std::string name, NodeId node);

  const Shape& shape(NodeId id) const { return graph_.nodes_.at(id.index).shape; }

  Graph build() &&;

 private:
  NodeId push(Node node);
  NodeId leaf_node(Op op, std::string name, Shape shape);
  NodeId unary(Op op, NodeId x, double a = 0.0, double b = 0.0);
  NodeId binary(Op op, NodeId a, NodeId b);
  Graph graph_;
};

/// Non-owning map from leaf name to tensor. Bound tensors must outlive every
/// evaluation that uses the bindings.
class Bindings {
 public:
  Bindings& bind(std::string name, const Tensor& value);
  const Tensor* find(std::string_view name) const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::string, const Tensor*, std::less<>> entries_;
};

using NamedTensors = std::map<std::string, Tensor, std::less<>>;

/// Gradients keyed by leaf name, each shape-equal to its leaf.
class GradientMap {
 public:
  const Tensor& at(std::string_view leaf) const;
  bool contains(std::string_view leaf) const { return entries_.find(leaf) != entries_.end(); }
  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  void insert(std::string leaf, Tensor grad) { entries_.insert_or_assign(std::move(leaf), std::move(grad)); }

 private:
  NamedTensors entries_;
};

/// Every node value of one forward pass. Holds references to the bound leaf
/// tensors, so the bindings' tensors must outlive it.
class Evaluation {
 public:
  const Tensor& value(NodeId id) const;
  const Tensor& output(std::string_view name) const;
  const Graph& graph() const noexcept { return *graph_; }

 private:
  friend Evaluation evaluate(const Graph&, const Bindings&);
  friend GradientMap backward(const Evaluation&, const std::vector<std::string>&, std::string_view);
  const Graph* graph_ = nullptr;
  std::vector<const Tensor*> leaves_;  // bound tensor for leaf nodes, null otherwise
  std::vector<Tensor> owned_;
  std::vector<Tensor> aux_;  // per-node scratch kept for backward (norms, argmax)
};

/// Runs the forward pass. Throws BindingError for a missing or misshapen leaf
/// and NumericError naming the first node that produces NaN/Inf.
Evaluation evaluate(const Graph& graph, const Bindings& bindings);

/// Values of every named output.
NamedTensors forward(const Graph& graph, const Bindings& bindings);

/// Reverse-mode gradient of the scalar output `of` (first output when empty)
/// with respect to the named leaves.
GradientMap backward(const Evaluation& eval, const std::vector<std::string>& wrt, std::string_view of = {});
GradientMap gradient(const Graph& graph, const Bindings& bindings, const std::vector<std::string>& wrt,
                     std::string_view of = {});

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Compares reverse-mode gradients against central differences, elementwise.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
FiniteDifferenceReport finite_difference_check(const Graph& graph, const Bindings& bindings,
                                               const std::vector<std::string>& wrt, double step,
                                               double tolerance, std::string_view of = {},
                                               double floor = 1e-6);

/// Smallest distance from the current point to a kink of a piecewise op:
/// |input| for relu, distance to finite bounds for clamp, and the gap between
/// the two largest entries for spatial max. +inf if the graph has no kinks.
double kink_margin(const Evaluation& eval);

}  // namespace advlab::diff
