// SPDX-License-Identifier: Apache-2.0
#pragma once

// l-inf bounded sign-gradient attacks.
//
//   output, untargeted      ascend   L_asym(f(x + d), y)
//   embedding, untargeted   ascend   D_avg(embed(x + d), embed(x))
//   embedding, targeted     descend  D_min(embed(x + d), target)
//
// Every attack starts at the clean input and after each step projects back
// into [x - eps, x + eps]. FGSM is the one-step case with alpha = eps.
// Cosine similarities treat zero-norm operands as similarity 0.

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "advlab/losses.hpp"
#include "advlab/models.hpp"
#include "advlab/tensor.hpp"

namespace advlab::attacks {

enum class AttackKind { kOutputUntargeted, kEmbeddingUntargeted, kEmbeddingTargeted };

std::string_view attack_name(AttackKind kind);
AttackKind parse_attack(std::string_view name);

struct AttackBudget {
  double epsilon = 0.1;
  double alpha = 0.02;
  std::size_t steps = 10;

  /// Evaluation default: alpha = 2 * eps / steps.
  static AttackBudget pgd(double epsilon, std::size_t steps = 10);
  static AttackBudget fgsm(double epsilon) { return {epsilon, epsilon, 1}; }
  void validate() const;
};

struct AdversarialExample {
  Tensor x_adv;
  Tensor delta;
  double initial_objective = 0.0;
  std::vector<double> objective_trace;  // objective after each completed step
  std::vector<double> linf_trace;       // max |x_adv - x| after each completed step
  bool degenerate = false;              // stopped on an all-zero gradient

  double final_objective() const { return objective_trace.empty() ? initial_objective : objective_trace.back(); }
};

Tensor clip_project(const Tensor& candidate, const Tensor& x, double epsilon);

/// Mean over positions of 1 - max(0, cos(z, z_adv)); maps are [H, W, D].
double d_avg(const Tensor& z, const Tensor& z_adv);
/// Minimum over positions of 1 - max(0, cos(z_adv, target)); target is [D].
double d_min(const Tensor& z_adv, const Tensor& target);

AdversarialExample pgd_output_untargeted(const models::Model& model, const models::ParameterSet& params,
                                         const Tensor& x, const Tensor& y, const AttackBudget& budget,
                                         const losses::AsymmetricLossConfig& loss = {});
AdversarialExample fgsm_output(const models::Model& model, const models::ParameterSet& params, const Tensor& x,
                               const Tensor& y, double epsilon, const losses::AsymmetricLossConfig& loss = {});

AdversarialExample pgd_embedding_untargeted(const models::Model& model, const models::ParameterSet& params,
                                            const Tensor& x, const AttackBudget& budget);
AdversarialExample fgsm_embedding(const models::Model& model, const models::ParameterSet& params, const Tensor& x,
                                  double epsilon);

/// Stops early once D_min reaches 0, since no step can improve on it.
AdversarialExample pgd_embedding_targeted(const models::Model& model, const models::ParameterSet& params,
                                          const Tensor& x, const Tensor& target, const AttackBudget& budget);

/// One row of an attack record file.
struct AttackRecord {
  std::string instance_id;
  AttackKind kind = AttackKind::kOutputUntargeted;
  double epsilon = 0.0;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double max_linf = 0.0;
  bool degenerate = false;
  long target_id = -1;
  std::vector<double> trace;
};

AttackRecord make_record(std::string instance_id, AttackKind kind, double epsilon, const AdversarialExample& ex,
                         long target_id = -1);
void write_attack_records(std::ostream& out, const std::vector<AttackRecord>& records);

}  // namespace advlab::attacks
