// SPDX-License-Identifier: Apache-2.0
#include "advlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "advlab/attacks.hpp"
#include "advlab/errors.hpp"

namespace advlab::metrics {

EvaluationBatch::EvaluationBatch(std::size_t n, std::size_t k, std::vector<double> labels, std::vector<double> scores)
    : n_(n), k_(k), labels_(std::move(labels)), scores_(std::move(scores)) {
  if (n_ == 0 || k_ == 0) throw ContractError("evaluation batch needs N >= 1 and K >= 1");
  if (labels_.size() != n_ * k_ || scores_.size() != n_ * k_) throw ContractError("evaluation batch size mismatch");
  for (double v : labels_)
    if (v != 0.0 && v != 1.0) throw ContractError("labels must be 0 or 1");
  for (double v : scores_)
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("scores must lie in [0, 1]");
}

EvaluationBatch EvaluationBatch::from_rows(const std::vector<Tensor>& labels, const std::vector<Tensor>& scores) {
  if (labels.empty() || labels.size() != scores.size()) throw ContractError("label and score rows differ in count");
  const std::size_t k = labels.front().size();
  std::vector<double> l, s;
  l.reserve(labels.size() * k);
  s.reserve(labels.size() * k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != k || scores[i].size() != k) throw ContractError("ragged evaluation rows");
    l.insert(l.end(), labels[i].values().begin(), labels[i].values().end());
    s.insert(s.end(), scores[i].values().begin(), scores[i].values().end());
  }
  return EvaluationBatch(labels.size(), k, std::move(l), std::move(s));
}

std::vector<double> EvaluationBatch::label_column(std::size_t k) const {
  std::vector<double> out(n_);
  for (std::size_t i = 0; i < n_; ++i) out[i] = label(i, k);
  return out;
}

std::vector<double> EvaluationBatch::score_column(std::size_t k) const {
  std::vector<double> out(n_);
  for (std::size_t i = 0; i < n_; ++i) out[i] = score(i, k);
  return out;
}

EvaluationBatch EvaluationBatch::with_scores(std::vector<double> scores) const {
  return EvaluationBatch(n_, k_, labels_, std::move(scores));
}

double average_precision(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ContractError("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]] == 1.0) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  if (hits == 0.0) throw ContractError("average precision is undefined without positive labels");
  return sum / hits;
}

ClassMean cmap_detail(const EvaluationBatch& batch) {
  ClassMean out;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < batch.classes(); ++k) {
    const auto labels = batch.label_column(k);
    if (std::find(labels.begin(), labels.end(), 1.0) == labels.end()) {
      out.excluded.push_back(k);
      continue;
    }
    total += average_precision(batch.score_column(k), labels);
    ++used;
  }
  if (used == 0) throw ContractError("cmAP undefined: no class has a positive label");
  out.value = total / static_cast<double>(used);
  return out;
}

double cmap(const EvaluationBatch& batch) { return cmap_detail(batch).value; }

namespace {

// Pairwise count via sorting: for each positive, negatives strictly below plus
// half (or none) of the tied ones.
double class_auroc(const std::vector<double>& scores, const std::vector<double>& labels, TieMode ties) {
  std::vector<double> neg;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (labels[i] == 0.0) neg.push_back(scores[i]);
  std::sort(neg.begin(), neg.end());
  double credit = 0.0, pos = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1.0) continue;
    pos += 1.0;
    const auto lo = std::lower_bound(neg.begin(), neg.end(), scores[i]);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), scores[i]);
    credit += static_cast<double>(lo - neg.begin());
    if (ties == TieMode::kHalfCredit) credit += 0.5 * static_cast<double>(hi - lo);
  }
  return credit / (pos * static_cast<double>(neg.size()));
}

}  // namespace

ClassMean auroc_detail(const EvaluationBatch& batch, TieMode ties) {
  ClassMean out;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < batch.classes(); ++k) {
    const auto labels = batch.label_column(k);
    const auto positives = std::count(labels.begin(), labels.end(), 1.0);
    if (positives == 0 || positives == static_cast<long>(labels.size())) {
      out.excluded.push_back(k);
      continue;
    }
    total += class_auroc(batch.score_column(k), labels, ties);
    ++used;
  }
  if (used == 0) throw ContractError("AUROC undefined: no class has both positives and negatives");
  out.value = total / static_cast<double>(used);
  return out;
}

double auroc(const EvaluationBatch& batch, TieMode ties) { return auroc_detail(batch, ties).value; }

double top1_accuracy(const EvaluationBatch& batch) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < batch.instances(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < batch.classes(); ++k)
      if (batch.score(i, k) > batch.score(i, best)) best = k;
    if (batch.label(i, best) == 1.0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(batch.instances());
}

double robustness_ratio(double clean, double adv) {
  return std::min(std::exp(1.0 - clean / (adv + kGuard)), 1.0);
}

double prs_from_cmap(double cmap_clean, double cmap_adv) { return robustness_ratio(cmap_clean, cmap_adv); }

double prs(const EvaluationBatch& clean, const EvaluationBatch& adversarial) {
  if (clean.instances() != adversarial.instances() || clean.classes() != adversarial.classes()) {
    throw ContractError("prs: batches differ in shape");
  }
  return prs_from_cmap(cmap(clean), cmap(adversarial));
}

double drs_from_distances(double d_min_clean, double d_min_adv) { return robustness_ratio(d_min_clean, d_min_adv); }

double drs(const Tensor& z, const Tensor& z_adv, const Tensor& target) {
  if (z.shape() != z_adv.shape()) throw ContractError("drs: maps differ in shape");
  return drs_from_distances(attacks::d_min(z, target), attacks::d_min(z_adv, target));
}

double tars(double prs_value, double drs_value, double beta) {
  if (!(beta > 0.0)) throw ContractError("tars: beta must be > 0");
  for (double v : {prs_value, drs_value})
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("tars: inputs must lie in [0, 1]");
  const double b2 = beta * beta;
  const double denom = b2 * prs_value + drs_value;
  if (denom == 0.0) return 0.0;
  return (1.0 + b2) * prs_value * drs_value / denom;
}

}  // namespace advlab::metrics
