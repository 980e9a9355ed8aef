// SPDX-License-Identifier: Apache-2.0
#pragma once

// Ranking metrics over an N x K batch (labels binary, scores in [0, 1]) and
// the robustness scores built on them.

#include <span>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab::metrics {

inline constexpr double kGuard = 1e-10;

/// Row-major N x K labels and scores.
class EvaluationBatch {
 public:
  EvaluationBatch(std::size_t n, std::size_t k, std::vector<double> labels, std::vector<double> scores);
  /// Stacks per-instance [K] label and score tensors.
  static EvaluationBatch from_rows(const std::vector<Tensor>& labels, const std::vector<Tensor>& scores);

  std::size_t instances() const noexcept { return n_; }
  std::size_t classes() const noexcept { return k_; }
  double label(std::size_t i, std::size_t k) const { return labels_[i * k_ + k]; }
  double score(std::size_t i, std::size_t k) const { return scores_[i * k_ + k]; }
  std::vector<double> label_column(std::size_t k) const;
  std::vector<double> score_column(std::size_t k) const;
  /// Same labels, different scores.
  EvaluationBatch with_scores(std::vector<double> scores) const;

 private:
  std::size_t n_, k_;
  std::vector<double> labels_, scores_;
};

enum class TieMode { kHalfCredit, kStrict };

/// Mean score together with the classes left out of it.
struct ClassMean {
  double value = 0.0;
  std::vector<std::size_t> excluded;
};

/// Rank-based AP; ties keep the original order. Throws ContractError when no
/// label is positive.
double average_precision(std::span<const double> scores, std::span<const double> labels);
/// Macro mean of per-class AP over classes with at least one positive.
ClassMean cmap_detail(const EvaluationBatch& batch);
double cmap(const EvaluationBatch& batch);
/// Macro AUROC over classes with at least one positive and one negative.
ClassMean auroc_detail(const EvaluationBatch& batch, TieMode ties = TieMode::kHalfCredit);
double auroc(const EvaluationBatch& batch, TieMode ties = TieMode::kHalfCredit);
/// Fraction of rows whose highest-scoring class (lowest index on ties) is labeled.
double top1_accuracy(const EvaluationBatch& batch);

/// min(exp(1 - clean / (adv + guard)), 1) for two performance values.
double robustness_ratio(double clean, double adv);
double prs(const EvaluationBatch& clean, const EvaluationBatch& adversarial);
double prs_from_cmap(double cmap_clean, double cmap_adv);
/// Distortion score for one targeted attack; z maps [H, W, D], target [D].
double drs(const Tensor& z, const Tensor& z_adv, const Tensor& target);
double drs_from_distances(double d_min_clean, double d_min_adv);
double tars(double prs_value, double drs_value, double beta = 1.0);

}  // namespace advlab::metrics
