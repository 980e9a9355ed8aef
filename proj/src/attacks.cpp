// SPDX-License-Identifier: Apache-2.0
#include "advlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>

#include "advlab/errors.hpp"
#include "fmt/format.h"

namespace advlab::attacks {

using diff::GraphBuilder;
using diff::NodeId;
using diff::ZeroNormPolicy;

std::string_view attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::kOutputUntargeted: return "output-untargeted";
    case AttackKind::kEmbeddingUntargeted: return "embedding-untargeted";
    case AttackKind::kEmbeddingTargeted: return "embedding-targeted";
  }
  return "unknown";
}

AttackKind parse_attack(std::string_view name) {
  for (auto k : {AttackKind::kOutputUntargeted, AttackKind::kEmbeddingUntargeted, AttackKind::kEmbeddingTargeted})
    if (attack_name(k) == name) return k;
  throw ConfigError("unknown attack kind '" + std::string(name) + "'");
}

AttackBudget AttackBudget::pgd(double epsilon, std::size_t steps) {
  return {epsilon, 2.0 * epsilon / static_cast<double>(steps), steps};
}

void AttackBudget::validate() const {
  if (!(std::isfinite(epsilon) && epsilon > 0.0)) throw ContractError("epsilon must be finite and > 0");
  if (!(std::isfinite(alpha) && alpha > 0.0)) throw ContractError("alpha must be finite and > 0");
  if (steps < 1) throw ContractError("steps must be >= 1");
}

Tensor clip_project(const Tensor& candidate, const Tensor& x, double epsilon) {
  if (candidate.shape() != x.shape()) throw ContractError("clip_project: shape mismatch");
  if (!(epsilon >= 0.0)) throw ContractError("clip_project: epsilon must be >= 0");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(candidate[i], x[i] - epsilon, x[i] + epsilon);
  return out;
}

namespace {

double rectified_cosine(const double* a, const double* b, std::size_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::max(0.0, dot / (std::sqrt(na) * std::sqrt(nb)));
}

}  // namespace

double d_avg(const Tensor& z, const Tensor& z_adv) {
  if (z.shape() != z_adv.shape() || z.rank() == 0) throw ContractError("d_avg: maps differ in shape");
  const std::size_t d = z.shape().back();
  const std::size_t positions = z.size() / d;
  double total = 0.0;
  for (std::size_t p = 0; p < positions; ++p) total += 1.0 - rectified_cosine(z.data() + p * d, z_adv.data() + p * d, d);
  return total / static_cast<double>(positions);
}

double d_min(const Tensor& z_adv, const Tensor& target) {
  if (z_adv.rank() == 0 || target.size() != z_adv.shape().back()) {
    throw ContractError("d_min: target length does not match the feature axis");
  }
  const std::size_t d = target.size();
  const std::size_t positions = z_adv.size() / d;
  double best = 1.0;
  for (std::size_t p = 0; p < positions; ++p) best = std::min(best, 1.0 - rectified_cosine(z_adv.data() + p * d, target.data(), d));
  return best;
}

namespace {

enum class Direction { kAscend, kDescend };

// Runs the shared sign-gradient loop over an objective graph whose data input
// is "x" and whose first output is the scalar objective.
AdversarialExample run_pgd(const diff::Graph& graph, diff::Bindings bindings, const Tensor& x,
                           const AttackBudget& budget, Direction direction,
                           const std::function<bool(double)>& optimal) {
  budget.validate();
  AdversarialExample ex;
  ex.x_adv = x;
  bindings.bind("x", ex.x_adv);
  const std::vector<std::string> wrt{"x"};
  const double sign_dir = direction == Direction::kAscend ? 1.0 : -1.0;
  const NodeId objective = graph.outputs().front().second;

  diff::Evaluation ev = diff::evaluate(graph, bindings);
  ex.initial_objective = ev.value(objective).item();
  double current = ex.initial_objective;
  for (std::size_t t = 0; t < budget.steps; ++t) {
    if (optimal(current)) break;
    const Tensor g = diff::backward(ev, wrt).at("x");
    if (g.max_abs() == 0.0) {
      ex.degenerate = true;
      break;
    }
    Tensor candidate = ex.x_adv;
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      const double s = static_cast<double>((g[i] > 0.0) - (g[i] < 0.0));
      candidate[i] += sign_dir * budget.alpha * s;
    }
    ex.x_adv = clip_project(candidate, x, budget.epsilon);
    double linf = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) linf = std::max(linf, std::abs(ex.x_adv[i] - x[i]));
    ex.linf_trace.push_back(linf);
    ev = diff::evaluate(graph, bindings);
    current = ev.value(objective).item();
    ex.objective_trace.push_back(current);
  }
  ex.delta = Tensor(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) ex.delta[i] = ex.x_adv[i] - x[i];
  return ex;
}

void check_input(const models::Model& model, const Tensor& x) {
  if (x.shape() != model.schema().input_shape) {
    throw ContractError("attack input shape " + to_string(x.shape()) + " does not match the model");
  }
}

bool never(double) { return false; }

}  // namespace

AdversarialExample pgd_output_untargeted(const models::Model& model, const models::ParameterSet& params,
                                         const Tensor& x, const Tensor& y, const AttackBudget& budget,
                                         const losses::AsymmetricLossConfig& loss) {
  check_input(model, x);
  const auto& schema = model.schema();
  if (y.shape() != Shape{schema.num_classes}) throw ContractError("label vector length does not match the model");
  GraphBuilder b;
  NodeId xn = b.input("x", schema.input_shape);
  NodeId yn = b.input("y", {schema.num_classes});
  auto p = models::declare_parameters(b, schema);
  auto head = models::append_head(b, schema, p, models::append_extractor(b, schema, p, xn));
  b.output("objective", losses::append_asymmetric_loss(b, head.scores, yn, loss));
  diff::Graph g = std::move(b).build();

  diff::Bindings in;
  models::bind_parameters(in, params);
  in.bind("y", y);
  return run_pgd(g, in, x, budget, Direction::kAscend, never);
}

AdversarialExample fgsm_output(const models::Model& model, const models::ParameterSet& params, const Tensor& x,
                               const Tensor& y, double epsilon, const losses::AsymmetricLossConfig& loss) {
  return pgd_output_untargeted(model, params, x, y, AttackBudget::fgsm(epsilon), loss);
}

AdversarialExample pgd_embedding_untargeted(const models::Model& model, const models::ParameterSet& params,
                                            const Tensor& x, const AttackBudget& budget) {
  check_input(model, x);
  const auto& schema = model.schema();
  const Tensor z_clean = model.embed(params, x);

  GraphBuilder b;
  NodeId xn = b.input("x", schema.input_shape);
  NodeId zref = b.input("z_clean", schema.embedding_shape());
  auto p = models::declare_parameters(b, schema);
  NodeId z = models::append_extractor(b, schema, p, xn);
  NodeId sim = b.relu(b.cosine_pairwise(z, zref, ZeroNormPolicy::kZeroSimilarity));
  b.output("objective", b.shift(b.scale(b.mean(sim), -1.0), 1.0));
  diff::Graph g = std::move(b).build();

  diff::Bindings in;
  models::bind_parameters(in, params);
  in.bind("z_clean", z_clean);
  return run_pgd(g, in, x, budget, Direction::kAscend, never);
}

AdversarialExample fgsm_embedding(const models::Model& model, const models::ParameterSet& params, const Tensor& x,
                                  double epsilon) {
  return pgd_embedding_untargeted(model, params, x, AttackBudget::fgsm(epsilon));
}

AdversarialExample pgd_embedding_targeted(const models::Model& model, const models::ParameterSet& params,
                                          const Tensor& x, const Tensor& target, const AttackBudget& budget) {
  check_input(model, x);
  const auto& schema = model.schema();
  const std::size_t d = schema.embedding_dim();
  if (target.size() != d) throw ContractError("target embedding length does not match D");
  if (target.l2_norm() == 0.0) throw ContractError("target embedding must have nonzero norm");
  const Tensor bank(Shape{1, d}, std::vector<double>(target.values().begin(), target.values().end()));

  GraphBuilder b;
  NodeId xn = b.input("x", schema.input_shape);
  NodeId tn = b.input("target", {1, d});
  auto p = models::declare_parameters(b, schema);
  NodeId z = models::append_extractor(b, schema, p, xn);
  NodeId best = b.spatial_max(b.relu(b.cosine_bank(z, tn, ZeroNormPolicy::kZeroSimilarity)));
  b.output("objective", b.sum(b.shift(b.scale(best, -1.0), 1.0)));
  diff::Graph g = std::move(b).build();

  diff::Bindings in;
  models::bind_parameters(in, params);
  in.bind("target", bank);
  return run_pgd(g, in, x, budget, Direction::kDescend, [](double v) { return v <= 0.0; });
}

AttackRecord make_record(std::string instance_id, AttackKind kind, double epsilon, const AdversarialExample& ex,
                         long target_id) {
  AttackRecord r;
  r.instance_id = std::move(instance_id);
  r.kind = kind;
  r.epsilon = epsilon;
  r.initial_objective = ex.initial_objective;
  r.final_objective = ex.final_objective();
  r.max_linf = ex.linf_trace.empty() ? 0.0 : *std::max_element(ex.linf_trace.begin(), ex.linf_trace.end());
  r.degenerate = ex.degenerate;
  r.target_id = target_id;
  r.trace = ex.objective_trace;
  return r;
}

void write_attack_records(std::ostream& out, const std::vector<AttackRecord>& records) {
  out << "instance_id,attack,epsilon,initial_objective,final_objective,steps,max_linf,degenerate,target_id,trace\n";
  for (const auto& r : records) {
    std::string trace;
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
      if (i > 0) trace += ';';
      trace += fmt::format("{:.17g}", r.trace[i]);
    }
    out << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{},{:.17g},{},{},{}\n", r.instance_id, attack_name(r.kind),
                       r.epsilon, r.initial_objective, r.final_objective, r.trace.size(), r.max_linf,
                       r.degenerate ? 1 : 0, r.target_id, trace);
  }
}

}  // namespace advlab::attacks
