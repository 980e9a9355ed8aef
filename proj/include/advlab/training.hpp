// SPDX-License-Identifier: Apache-2.0
#pragma once

// Ordinary training (OT) and TRADES-style adversarial training with adversarial
// weight perturbation (AT-O: output-space FGSM, AT-E: embedding-space FGSM).
//
// Per adversarial batch:
//   1. copy the weights and add Gaussian noise (std = weight_randomization_std)
//   2. FGSM against the noisy copy gives x_adv for every instance
//   3. from awp_warmup_epochs on, one ascent step on the batch loss w.r.t. the
//      weights gives v, rescaled per layer to ||v_j|| = gamma * ||theta_j||
//   4. gradient of  L_asym(f(x), y) + lambda_inv * L_asym(f(x_adv), sg(f(x)))
//      at theta + v
//   5. AdamW step applied to theta (v is never committed)

#include <chrono>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "advlab/losses.hpp"
#include "advlab/models.hpp"
#include "advlab/synthdata.hpp"

namespace advlab::training {

struct OptimizerConfig {
  double base_lr = 1e-2;
  double prototype_lr = 1e-1;
  double weight_decay = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double warmup_fraction = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

enum class AttackSpace { kOutput, kEmbedding };

struct TradesAwpConfig {
  double lambda_inv = 1.0;
  double awp_gamma = 0.005;
  std::size_t awp_warmup_epochs = 8;
  double weight_randomization_std = 1e-4;
  AttackSpace space = AttackSpace::kOutput;
  double epsilon = 0.1;

  void validate() const;
};

/// Linear ramp to base_lr over warmup_fraction * total_steps, then cosine decay to 0.
double cosine_schedule(std::size_t step, std::size_t total_steps, double warmup_fraction, double base_lr);

/// Copy of `params` with N(0, std^2) noise added to every tensor.
models::ParameterSet randomize_weights(const models::ParameterSet& params, double std, std::uint64_t seed);

/// Per-layer perturbation, aligned with params.names().
struct WeightPerturbation {
  std::vector<Tensor> entries;
  bool all_zero() const;
};

/// An adversarial batch: clean inputs, their perturbed versions, and labels.
struct AdversarialBatch {
  std::vector<const Tensor*> x;
  std::vector<Tensor> x_adv;
  std::vector<const Tensor*> y;
};

/// Mean over the batch of the full inner loss and its gradient w.r.t. every layer.
struct BatchLoss {
  double total = 0.0;
  double classification = 0.0;
  double consistency = 0.0;
  std::vector<Tensor> gradients;  // aligned with params.names()
};

BatchLoss adversarial_batch_loss(const models::Model& model, const models::ParameterSet& params,
                                 const AdversarialBatch& batch, double lambda_inv,
                                 const losses::AsymmetricLossConfig& loss);

WeightPerturbation awp_perturbation(const models::Model& model, const models::ParameterSet& params,
                                    const AdversarialBatch& batch, const TradesAwpConfig& cfg,
                                    const losses::AsymmetricLossConfig& loss = {});

models::ParameterSet apply_perturbation(const models::ParameterSet& params, const WeightPerturbation& v);

struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double lr = 0.0;
  double classification = 0.0;
  double consistency = 0.0;
  double total = 0.0;
  bool awp_applied = false;
  double probe_committed_norm = 0.0;  // ||conv0.weight|| after the step
  double probe_perturbed_norm = 0.0;  // ||conv0.weight + v|| used for the gradient
};

struct EpochRecord {
  std::size_t epoch = 0;
  double classification = 0.0;
  double consistency = 0.0;
  double total = 0.0;
  double val_loss = 0.0;
  double val_cmap = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::size_t awp_batches = 0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::vector<BatchRecord> batches;
  std::size_t selected_epoch = 0;  // 0 = initial parameters
  std::size_t awp_applications = 0;
};

void write_epoch_csv(std::ostream& out, const TrainingLog& log);
void write_batch_csv(std::ostream& out, const TrainingLog& log);

struct TrainOptions {
  losses::AsymmetricLossConfig loss;
  std::optional<models::ParameterSet> initial;  // warm start instead of init_params(schema, seed)
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainingResult {
  models::ParameterSet params;
  TrainingLog log;
};

/// `corpus` must be standardized; its mixup and no-call settings augment every
/// training batch.
TrainingResult train_ordinary(const synth::LabeledCorpus& corpus, const models::ModelSchema& schema,
                              const OptimizerConfig& opt, std::uint64_t seed, const TrainOptions& options = {});
TrainingResult train_adversarial(const synth::LabeledCorpus& corpus, const models::ModelSchema& schema,
                                 const OptimizerConfig& opt, const TradesAwpConfig& trades, std::uint64_t seed,
                                 const TrainOptions& options = {});

/// Mean asymmetric loss and cmAP of clean predictions over a split.
std::pair<double, double> validation_metrics(const models::Model& model, const models::ParameterSet& params,
                                             const std::vector<synth::Instance>& split,
                                             const losses::AsymmetricLossConfig& loss);

}  // namespace advlab::training
