// SPDX-License-Identifier: Apache-2.0
#include "advlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "advlab/errors.hpp"
#include "advlab/kernels.hpp"

namespace advlab::diff {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParameter: return "parameter";
    case Op::kConstant: return "constant";
    case Op::kAffine: return "affine";
    case Op::kConv2d: return "conv2d";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kClamp: return "clamp";
    case Op::kPow: return "pow";
    case Op::kSign: return "sign";
    case Op::kStopGradient: return "stop_gradient";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kShift: return "shift";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kGlobalAvgPool: return "global_avg_pool";
    case Op::kSpatialMax: return "spatial_max";
    case Op::kCosinePairwise: return "cosine_pairwise";
    case Op::kCosineBank: return "cosine_bank";
  }
  return "unknown";
}

// ---------------------------------------------------------------- Graph

NodeId Graph::leaf(std::string_view name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw LookupError("graph has no leaf named '" + std::string(name) + "'");
  return it->second;
}

bool Graph::has_leaf(std::string_view name) const { return leaves_.find(name) != leaves_.end(); }

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (n.op == Op::kInput) out.push_back(n.name);
  return out;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (n.op == Op::kParameter) out.push_back(n.name);
  return out;
}

NodeId Graph::output(std::string_view name) const {
  for (const auto& [n, id] : outputs_)
    if (n == name) return id;
  throw LookupError("graph has no output named '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- builder

namespace {

Shape leading(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace

NodeId GraphBuilder::push(Node node) {
  const auto idx = static_cast<std::uint32_t>(graph_.nodes_.size());
  if (node.name.empty()) node.name = std::string(op_name(node.op)) + "#" + std::to_string(idx);
  graph_.nodes_.push_back(std::move(node));
  return NodeId{idx};
}

NodeId GraphBuilder::leaf_node(Op op, std::string name, Shape shape) {
  require(!name.empty(), "leaf name must be non-empty");
  require(!graph_.leaves_.contains(name), "duplicate leaf name '" + name + "'");
  for (std::size_t d : shape) require(d > 0, "leaf '" + name + "' has a zero dimension");
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.name = name;
  NodeId id = push(std::move(n));
  graph_.leaves_.emplace(std::move(name), id);
  return id;
}

NodeId GraphBuilder::input(std::string name, Shape shape) { return leaf_node(Op::kInput, std::move(name), std::move(shape)); }

NodeId GraphBuilder::parameter(std::string name, Shape shape) {
  return leaf_node(Op::kParameter, std::move(name), std::move(shape));
}

NodeId GraphBuilder::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.shape = value.shape();
  n.constant = std::move(value);
  return push(std::move(n));
}

NodeId GraphBuilder::affine(NodeId x, NodeId weight, NodeId bias) {
  const Shape& ws = shape(weight);
  require(ws.size() == 2, "affine weight must be rank 2, got " + to_string(ws));
  require(element_count(shape(x)) == ws[1], "affine input size does not match weight " + to_string(ws));
  require(shape(bias) == Shape{ws[0]}, "affine bias must have shape [" + std::to_string(ws[0]) + "]");
  Node n;
  n.op = Op::kAffine;
  n.inputs = {x, weight, bias};
  n.shape = {ws[0]};
  return push(std::move(n));
}

NodeId GraphBuilder::conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride, std::size_t padding) {
  const Shape& xs = shape(x);
  const Shape& ws = shape(weight);
  require(xs.size() == 3, "conv2d input must be [H, W, C], got " + to_string(xs));
  require(ws.size() == 4, "conv2d weight must be [KH, KW, C_in, C_out], got " + to_string(ws));
  require(ws[2] == xs[2], "conv2d channel mismatch: input " + to_string(xs) + " weight " + to_string(ws));
  require(shape(bias) == Shape{ws[3]}, "conv2d bias must be [C_out]");
  require(stride >= 1, "conv2d stride must be >= 1");
  require(xs[0] + 2 * padding >= ws[0] && xs[1] + 2 * padding >= ws[1], "conv2d kernel larger than padded input");
  kernels::ConvGeometry g{xs[0], xs[1], xs[2], ws[3], ws[0], ws[1], stride, padding};
  Node n;
  n.op = Op::kConv2d;
  n.inputs = {x, weight, bias};
  n.shape = {g.out_h(), g.out_w(), g.out_c};
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

NodeId GraphBuilder::unary(Op op, NodeId x, double a, double b) {
  Node n;
  n.op = op;
  n.inputs = {x};
  n.shape = shape(x);
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

NodeId GraphBuilder::binary(Op op, NodeId a, NodeId b) {
  require(shape(a) == shape(b), std::string(op_name(op)) + " operands differ in shape: " + to_string(shape(a)) +
                                    " vs " + to_string(shape(b)));
  Node n;
  n.op = op;
  n.inputs = {a, b};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId GraphBuilder::relu(NodeId x) { return unary(Op::kRelu, x); }
NodeId GraphBuilder::sigmoid(NodeId x) { return unary(Op::kSigmoid, x); }
NodeId GraphBuilder::log(NodeId x) { return unary(Op::kLog, x); }
NodeId GraphBuilder::exp(NodeId x) { return unary(Op::kExp, x); }
NodeId GraphBuilder::clamp(NodeId x, double low, double high) {
  require(low <= high, "clamp bounds out of order");
  return unary(Op::kClamp, x, low, high);
}
NodeId GraphBuilder::pow(NodeId x, double exponent) {
  require(std::isfinite(exponent) && exponent >= 0.0, "pow exponent must be finite and >= 0");
  return unary(Op::kPow, x, exponent);
}
NodeId GraphBuilder::sign(NodeId x) { return unary(Op::kSign, x); }
NodeId GraphBuilder::stop_gradient(NodeId x) { return unary(Op::kStopGradient, x); }
NodeId GraphBuilder::add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
NodeId GraphBuilder::sub(NodeId a, NodeId b) { return binary(Op::kSub, a, b); }
NodeId GraphBuilder::mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }
NodeId GraphBuilder::scale(NodeId x, double factor) { return unary(Op::kScale, x, factor); }
NodeId GraphBuilder::shift(NodeId x, double offset) { return unary(Op::kShift, x, offset); }

NodeId GraphBuilder::sum(NodeId x) {
  NodeId id = unary(Op::kSum, x);
  graph_.nodes_[id.index].shape = {};
  return id;
}

NodeId GraphBuilder::mean(NodeId x) {
  NodeId id = unary(Op::kMean, x);
  graph_.nodes_[id.index].shape = {};
  return id;
}

NodeId GraphBuilder::global_avg_pool(NodeId x) {
  require(shape(x).size() == 3, "global_avg_pool expects [H, W, C]");
  NodeId id = unary(Op::kGlobalAvgPool, x);
  graph_.nodes_[id.index].shape = {shape(x)[2]};
  return id;
}

NodeId GraphBuilder::spatial_max(NodeId x) {
  require(shape(x).size() == 3, "spatial_max expects [H, W, C]");
  NodeId id = unary(Op::kSpatialMax, x);
  graph_.nodes_[id.index].shape = {shape(x)[2]};
  return id;
}

NodeId GraphBuilder::cosine_pairwise(NodeId a, NodeId b, ZeroNormPolicy policy) {
  require(!shape(a).empty(), "cosine_pairwise needs a feature axis");
  NodeId id = binary(Op::kCosinePairwise, a, b);
  Node& n = graph_.nodes_[id.index];
  n.shape = leading(shape(a));
  n.zero_norm = policy;
  return id;
}

NodeId GraphBuilder::cosine_bank(NodeId a, NodeId bank, ZeroNormPolicy policy) {
  const Shape& as = shape(a);
  const Shape& bs = shape(bank);
  require(!as.empty(), "cosine_bank needs a feature axis");
  require(bs.size() == 2 && bs[1] == as.back(), "cosine_bank bank must be [P, D] with matching D");
  Node n;
  n.op = Op::kCosineBank;
  n.inputs = {a, bank};
  n.shape = leading(as);
  n.shape.push_back(bs[0]);
  n.zero_norm = policy;
  return push(std::move(n));
}

void GraphBuilder::output(std::string name, NodeId node) {
  require(node.index < graph_.nodes_.size(), "output refers to an unknown node");
  for (const auto& [n, id] : graph_.outputs_) require(n != name, "duplicate output name '" + name + "'");
  graph_.outputs_.emplace_back(std::move(name), node);
}

Graph GraphBuilder::build() && {
  require(!graph_.outputs_.empty(), "graph must declare at least one output");
  return std::move(graph_);
}

// ---------------------------------------------------------------- bindings

Bindings& Bindings::bind(std::string name, const Tensor& value) {
  entries_.insert_or_assign(std::move(name), &value);
  return *this;
}

const Tensor* Bindings::find(std::string_view name) const {
  auto it = entries_.find(name);
  return it == entries_.end() ? nullptr : it->second;
}

const Tensor& GradientMap::at(std::string_view leaf) const {
  auto it = entries_.find(leaf);
  if (it == entries_.end()) throw LookupError("no gradient for leaf '" + std::string(leaf) + "'");
  return it->second;
}

// ---------------------------------------------------------------- forward

const Tensor& Evaluation::value(NodeId id) const {
  const Tensor* bound = leaves_.at(id.index);
  return bound != nullptr ? *bound : owned_[id.index];
}

const Tensor& Evaluation::output(std::string_view name) const { return value(graph_->output(name)); }

namespace {

kernels::ConvGeometry conv_geometry(const Graph& g, const Node& n) {
  const Shape& xs = g.node(n.inputs[0]).shape;
  const Shape& ws = g.node(n.inputs[1]).shape;
  return {xs[0], xs[1], xs[2], ws[3], ws[0], ws[1], n.stride, n.padding};
}

// Rows and feature width for cosine operands: [..., D] viewed as [S, D].
std::pair<std::size_t, std::size_t> rows_features(const Shape& s) {
  const std::size_t d = s.back();
  return {element_count(s) / d, d};
}

[[noreturn]] void zero_norm_error(const Node& n) {
  throw NumericError("node '" + n.name + "': zero-norm operand in cosine similarity");
}

}  // namespace

Evaluation evaluate(const Graph& graph, const Bindings& bindings) {
  const auto& nodes = graph.nodes();
  Evaluation ev;
  ev.graph_ = &graph;
  ev.leaves_.assign(nodes.size(), nullptr);
  ev.owned_.resize(nodes.size());
  ev.aux_.resize(nodes.size());

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.op == Op::kInput || n.op == Op::kParameter) {
      const Tensor* t = bindings.find(n.name);
      if (t == nullptr) throw BindingError("leaf '" + n.name + "' is not bound");
      if (t->shape() != n.shape) {
        throw BindingError("leaf '" + n.name + "' expects shape " + to_string(n.shape) + ", bound " +
                           to_string(t->shape()));
      }
      ev.leaves_[i] = t;
      continue;
    }
    if (n.op == Op::kConstant) {
      ev.leaves_[i] = &n.constant;
      continue;
    }

    Tensor out(n.shape);
    auto y = out.values();
    const Tensor& x = ev.value(n.inputs[0]);
    auto xv = x.values();

    switch (n.op) {
      case Op::kAffine: {
        const Tensor& w = ev.value(n.inputs[1]);
        kernels::affine_forward(w.shape()[0], w.shape()[1], xv, w.values(), ev.value(n.inputs[2]).values(), y);
        break;
      }
      case Op::kConv2d:
        kernels::conv2d_forward(conv_geometry(graph, n), xv, ev.value(n.inputs[1]).values(),
                                ev.value(n.inputs[2]).values(), y);
        break;
      case Op::kRelu:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = xv[k] > 0.0 ? xv[k] : 0.0;
        break;
      case Op::kSigmoid:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = 1.0 / (1.0 + std::exp(-xv[k]));
        break;
      case Op::kLog:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = std::log(xv[k]);
        break;
      case Op::kExp:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = std::exp(xv[k]);
        break;
      case Op::kClamp:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = std::clamp(xv[k], n.a, n.b);
        break;
      case Op::kPow:
        for (std::size_t k = 0; k < y.size(); ++k) {
          if (xv[k] < 0.0) throw NumericError("node '" + n.name + "': pow of a negative base");
          y[k] = n.a == 0.0 ? 1.0 : std::pow(xv[k], n.a);
        }
        break;
      case Op::kSign:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = static_cast<double>((xv[k] > 0.0) - (xv[k] < 0.0));
        break;
      case Op::kStopGradient:
        std::copy(xv.begin(), xv.end(), y.begin());
        break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        auto bv = ev.value(n.inputs[1]).values();
        for (std::size_t k = 0; k < y.size(); ++k) {
          y[k] = n.op == Op::kAdd ? xv[k] + bv[k] : n.op == Op::kSub ? xv[k] - bv[k] : xv[k] * bv[k];
        }
        break;
      }
      case Op::kScale:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = n.a * xv[k];
        break;
      case Op::kShift:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = xv[k] + n.a;
        break;
      case Op::kSum:
      case Op::kMean: {
        double s = 0.0;
        for (double v : xv) s += v;
        y[0] = n.op == Op::kSum ? s : s / static_cast<double>(xv.size());
        break;
      }
      case Op::kGlobalAvgPool: {
        const std::size_t c = x.shape()[2];
        const std::size_t positions = x.size() / c;
        for (std::size_t p = 0; p < positions; ++p)
          for (std::size_t k = 0; k < c; ++k) y[k] += xv[p * c + k];
        for (std::size_t k = 0; k < c; ++k) y[k] /= static_cast<double>(positions);
        break;
      }
      case Op::kSpatialMax: {
        const std::size_t c = x.shape()[2];
        const std::size_t positions = x.size() / c;
        Tensor arg({c});
        for (std::size_t k = 0; k < c; ++k) {
          std::size_t best = 0;
          for (std::size_t p = 1; p < positions; ++p)
            if (xv[p * c + k] > xv[best * c + k]) best = p;
          y[k] = xv[best * c + k];
          arg[k] = static_cast<double>(best);
        }
        ev.aux_[i] = std::move(arg);
        break;
      }
      case Op::kCosinePairwise: {
        auto bv = ev.value(n.inputs[1]).values();
        const auto [s, d] = rows_features(x.shape());
        Tensor norms({2 * s});
        for (std::size_t r = 0; r < s; ++r) {
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            dot += xv[r * d + k] * bv[r * d + k];
            na += xv[r * d + k] * xv[r * d + k];
            nb += bv[r * d + k] * bv[r * d + k];
          }
          na = std::sqrt(na);
          nb = std::sqrt(nb);
          norms[r] = na;
          norms[s + r] = nb;
          if (na == 0.0 || nb == 0.0) {
            if (n.zero_norm == ZeroNormPolicy::kError) zero_norm_error(n);
            y[r] = 0.0;
          } else {
            y[r] = dot / (na * nb);
          }
        }
        ev.aux_[i] = std::move(norms);
        break;
      }
      case Op::kCosineBank: {
        const Tensor& bank = ev.value(n.inputs[1]);
        const auto [s, d] = rows_features(x.shape());
        const std::size_t p = bank.shape()[0];
        Tensor norms({s + p});
        auto nv = norms.values();
        kernels::cosine_bank_forward(s, p, d, xv, bank.values(), y, nv.subspan(0, s), nv.subspan(s, p));
        if (n.zero_norm == ZeroNormPolicy::kError &&
            std::any_of(nv.begin(), nv.end(), [](double v) { return v == 0.0; })) {
          zero_norm_error(n);
        }
        ev.aux_[i] = std::move(norms);
        break;
      }
      case Op::kInput:
      case Op::kParameter:
      case Op::kConstant:
        break;
    }

    if (!out.all_finite()) throw NumericError("node '" + n.name + "' produced a non-finite value");
    ev.owned_[i] = std::move(out);
  }
  return ev;
}

NamedTensors forward(const Graph& graph, const Bindings& bindings) {
  Evaluation ev = evaluate(graph, bindings);
  NamedTensors out;
  for (const auto& [name, id] : graph.outputs()) out.emplace(name, ev.value(id));
  return out;
}

// ---------------------------------------------------------------- backward

GradientMap backward(const Evaluation& ev, const std::vector<std::string>& wrt, std::string_view of) {
  const Graph& graph = ev.graph();
  const auto& nodes = graph.nodes();
  const NodeId target = of.empty() ? graph.outputs().front().second : graph.output(of);
  if (nodes[target.index].shape.size() != 0 && element_count(nodes[target.index].shape) != 1) {
    throw ContractError("gradient target '" + nodes[target.index].name + "' is not scalar (shape " +
                        to_string(nodes[target.index].shape) + ")");
  }

  std::vector<char> needs(nodes.size(), 0);
  for (const auto& name : wrt) needs[graph.leaf(name).index] = 1;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.op == Op::kSign || n.op == Op::kStopGradient) continue;
    for (NodeId in : n.inputs)
      if (needs[in.index]) needs[i] = 1;
  }

  std::vector<Tensor> adj(nodes.size());
  std::vector<char> live(nodes.size(), 0);
  auto grad_of = [&](NodeId id) -> std::span<double> {
    if (!live[id.index]) {
      adj[id.index] = Tensor(nodes[id.index].shape);
      live[id.index] = 1;
    }
    return adj[id.index].values();
  };

  if (needs[target.index]) grad_of(target)[0] = 1.0;

  for (std::size_t i = target.index + 1; i-- > 0;) {
    const Node& n = nodes[i];
    if (!live[i] || !needs[i] || n.inputs.empty()) continue;
    if (n.op == Op::kSign || n.op == Op::kStopGradient) continue;
    auto dy = std::span<const double>(adj[i].values());
    const NodeId in0 = n.inputs[0];
    const bool need0 = needs[in0.index] != 0;
    auto xv = ev.value(in0).values();
    auto yv = ev.value(NodeId{static_cast<std::uint32_t>(i)}).values();

    switch (n.op) {
      case Op::kAffine: {
        const Tensor& w = ev.value(n.inputs[1]);
        const std::size_t m = w.shape()[0], k = w.shape()[1];
        if (need0) kernels::affine_backward_input(m, k, dy, w.values(), grad_of(in0));
        if (needs[n.inputs[1].index] || needs[n.inputs[2].index]) {
          kernels::affine_backward_params(m, k, xv, dy, grad_of(n.inputs[1]), grad_of(n.inputs[2]));
        }
        break;
      }
      case Op::kConv2d: {
        const auto g = conv_geometry(graph, n);
        const Tensor& w = ev.value(n.inputs[1]);
        if (need0) kernels::conv2d_backward_input(g, dy, w.values(), grad_of(in0));
        if (needs[n.inputs[1].index] || needs[n.inputs[2].index]) {
          kernels::conv2d_backward_params(g, xv, dy, grad_of(n.inputs[1]), grad_of(n.inputs[2]));
        }
        break;
      }
      case Op::kRelu: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k)
          if (xv[k] > 0.0) dx[k] += dy[k];
        break;
      }
      case Op::kSigmoid: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k] * yv[k] * (1.0 - yv[k]);
        break;
      }
      case Op::kLog: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k] / xv[k];
        break;
      }
      case Op::kExp: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k] * yv[k];
        break;
      }
      case Op::kClamp: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k)
          if (xv[k] >= n.a && xv[k] <= n.b) dx[k] += dy[k];
        break;
      }
      case Op::kPow: {
        auto dx = grad_of(in0);
        if (n.a == 0.0) break;
        for (std::size_t k = 0; k < dy.size(); ++k) {
          if (xv[k] == 0.0) {
            if (n.a == 1.0) dx[k] += dy[k];
            continue;
          }
          dx[k] += dy[k] * n.a * std::pow(xv[k], n.a - 1.0);
        }
        break;
      }
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        const NodeId in1 = n.inputs[1];
        auto bv = ev.value(in1).values();
        if (need0) {
          auto da = grad_of(in0);
          for (std::size_t k = 0; k < dy.size(); ++k) da[k] += n.op == Op::kMul ? dy[k] * bv[k] : dy[k];
        }
        if (needs[in1.index]) {
          auto db = grad_of(in1);
          for (std::size_t k = 0; k < dy.size(); ++k) {
            db[k] += n.op == Op::kMul ? dy[k] * xv[k] : n.op == Op::kSub ? -dy[k] : dy[k];
          }
        }
        break;
      }
      case Op::kScale: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += n.a * dy[k];
        break;
      }
      case Op::kShift: {
        auto dx = grad_of(in0);
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k];
        break;
      }
      case Op::kSum:
      case Op::kMean: {
        auto dx = grad_of(in0);
        const double g = n.op == Op::kSum ? dy[0] : dy[0] / static_cast<double>(dx.size());
        for (double& v : dx) v += g;
        break;
      }
      case Op::kGlobalAvgPool: {
        auto dx = grad_of(in0);
        const std::size_t c = dy.size();
        const std::size_t positions = dx.size() / c;
        const double inv = 1.0 / static_cast<double>(positions);
        for (std::size_t p = 0; p < positions; ++p)
          for (std::size_t k = 0; k < c; ++k) dx[p * c + k] += dy[k] * inv;
        break;
      }
      case Op::kSpatialMax: {
        auto dx = grad_of(in0);
        const std::size_t c = dy.size();
        const Tensor& arg = ev.aux_[i];
        for (std::size_t k = 0; k < c; ++k) dx[static_cast<std::size_t>(arg[k]) * c + k] += dy[k];
        break;
      }
      case Op::kCosinePairwise: {
        const NodeId in1 = n.inputs[1];
        auto bv = ev.value(in1).values();
        const auto [s, d] = rows_features(ev.value(in0).shape());
        const Tensor& norms = ev.aux_[i];
        std::span<double> da = need0 ? grad_of(in0) : std::span<double>{};
        std::span<double> db = needs[in1.index] ? grad_of(in1) : std::span<double>{};
        for (std::size_t r = 0; r < s; ++r) {
          const double na = norms[r], nb = norms[s + r];
          if (na == 0.0 || nb == 0.0 || dy[r] == 0.0) continue;
          const double c = yv[r];
          const double inv = 1.0 / (na * nb);
          for (std::size_t k = 0; k < d; ++k) {
            const double ak = xv[r * d + k], bk = bv[r * d + k];
            if (!da.empty()) da[r * d + k] += dy[r] * (bk * inv - c * ak / (na * na));
            if (!db.empty()) db[r * d + k] += dy[r] * (ak * inv - c * bk / (nb * nb));
          }
        }
        break;
      }
      case Op::kCosineBank: {
        const NodeId in1 = n.inputs[1];
        const Tensor& bank = ev.value(in1);
        const auto [s, d] = rows_features(ev.value(in0).shape());
        const std::size_t p = bank.shape()[0];
        auto nv = ev.aux_[i].values();
        std::span<double> da = need0 ? grad_of(in0) : std::span<double>{};
        std::span<double> dbank = needs[in1.index] ? grad_of(in1) : std::span<double>{};
        kernels::cosine_bank_backward(s, p, d, xv, bank.values(), yv, nv.subspan(0, s), nv.subspan(s, p), dy, da,
                                      dbank);
        break;
      }
      default:
        break;
    }
  }

  GradientMap out;
  for (const auto& name : wrt) {
    const NodeId id = graph.leaf(name);
    out.insert(name, live[id.index] ? std::move(adj[id.index]) : Tensor(nodes[id.index].shape));
  }
  return out;
}

GradientMap gradient(const Graph& graph, const Bindings& bindings, const std::vector<std::string>& wrt,
                     std::string_view of) {
  for (const auto& name : wrt) (void)graph.leaf(name);
  return backward(evaluate(graph, bindings), wrt, of);
}

// ---------------------------------------------------------------- checks

FiniteDifferenceReport finite_difference_check(const Graph& graph, const Bindings& bindings,
                                               const std::vector<std::string>& wrt, double step,
                                               double tolerance, std::string_view of, double floor) {
  if (!(step > 0.0) || !std::isfinite(step)) throw ContractError("finite-difference step must be positive");
  const NodeId target = of.empty() ? graph.outputs().front().second : graph.output(of);
  const GradientMap analytic = gradient(graph, bindings, wrt, of);

  auto scalar_at = [&](const Bindings& b) { return evaluate(graph, b).value(target).item(); };

  FiniteDifferenceReport report;
  for (const auto& name : wrt) {
    const Tensor* bound = bindings.find(name);
    if (bound == nullptr) throw BindingError("leaf '" + name + "' is not bound");
    Tensor probe = *bound;
    Bindings local = bindings;
    local.bind(name, probe);
    const Tensor& g = analytic.at(name);
    for (std::size_t k = 0; k < probe.size(); ++k) {
      const double orig = probe[k];
      const double up = orig + step, down = orig - step;
      if (up == orig || down == orig) {
        throw ContractError("finite-difference step underflows at leaf '" + name + "' element " +
                            std::to_string(k));
      }
      probe[k] = up;
      const double f_up = scalar_at(local);
      probe[k] = down;
      const double f_down = scalar_at(local);
      probe[k] = orig;
      const double numeric = (f_up - f_down) / (up - down);
      const double abs_err = std::abs(g[k] - numeric);
      const double rel_err = abs_err / std::max({std::abs(g[k]), std::abs(numeric), floor});
      ++report.checked;
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      if (rel_err > report.max_relative_error) {
        report.max_relative_error = rel_err;
        report.worst_leaf = name;
        report.worst_index = k;
      }
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

double kink_margin(const Evaluation& ev) {
  const auto& nodes = ev.graph().nodes();
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.inputs.empty()) continue;
    const Tensor& x = ev.value(n.inputs[0]);
    switch (n.op) {
      case Op::kRelu:
        for (double v : x.values()) margin = std::min(margin, std::abs(v));
        break;
      case Op::kClamp:
        for (double v : x.values()) {
          if (std::isfinite(n.a)) margin = std::min(margin, std::abs(v - n.a));
          if (std::isfinite(n.b)) margin = std::min(margin, std::abs(v - n.b));
        }
        break;
      case Op::kSpatialMax: {
        const std::size_t c = x.shape()[2];
        const std::size_t positions = x.size() / c;
        if (positions < 2) break;
        for (std::size_t k = 0; k < c; ++k) {
          double first = -std::numeric_limits<double>::infinity(), second = first;
          for (std::size_t p = 0; p < positions; ++p) {
            const double v = x[p * c + k];
            if (v > first) {
              second = first;
              first = v;
            } else if (v > second) {
              second = v;
            }
          }
          margin = std::min(margin, first - second);
        }
        break;
      }
      default:
        break;
    }
  }
  return margin;
}

}  // namespace advlab::diff
