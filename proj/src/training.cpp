// SPDX-License-Identifier: Apache-2.0
#include "advlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <tuple>

#include "advlab/attacks.hpp"
#include "advlab/errors.hpp"
#include "advlab/metrics.hpp"
#include "advlab/random.hpp"
#include "fmt/format.h"

namespace advlab::training {

using diff::GraphBuilder;
using diff::NodeId;

void OptimizerConfig::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(std::isfinite(v) && v > 0.0)) throw ConfigError(std::string(what) + " must be finite and > 0");
  };
  positive(base_lr, "base_lr");
  positive(prototype_lr, "prototype_lr");
  positive(adam_eps, "adam_eps");
  if (!(std::isfinite(weight_decay) && weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
}

void TradesAwpConfig::validate() const {
  if (!(std::isfinite(lambda_inv) && lambda_inv > 0.0)) throw ConfigError("lambda_inv must be finite and > 0");
  if (!(awp_gamma >= 0.0 && awp_gamma < 1.0)) throw ConfigError("awp_gamma must lie in [0, 1)");
  if (!(std::isfinite(weight_randomization_std) && weight_randomization_std >= 0.0)) {
    throw ConfigError("weight_randomization_std must be >= 0");
  }
  if (!(std::isfinite(epsilon) && epsilon > 0.0)) throw ConfigError("attack epsilon must be finite and > 0");
}

double cosine_schedule(std::size_t step, std::size_t total_steps, double warmup_fraction, double base_lr) {
  if (total_steps == 0) throw ContractError("cosine_schedule: total_steps must be > 0");
  if (step > total_steps) throw ContractError("cosine_schedule: step beyond total_steps");
  const double total = static_cast<double>(total_steps);
  const double warmup = warmup_fraction * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  const double progress = (s - warmup) / (total - warmup);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

models::ParameterSet randomize_weights(const models::ParameterSet& params, double std, std::uint64_t seed) {
  if (!(std >= 0.0)) throw ContractError("randomize_weights: std must be >= 0");
  models::ParameterSet out = params;
  if (std == 0.0) return out;
  std::mt19937_64 rng(derive_seed(seed, {0x7a9d}));
  std::normal_distribution<double> noise(0.0, std);
  for (std::size_t i = 0; i < out.size(); ++i)
    for (double& v : out.at(i).values()) v += noise(rng);
  return out;
}

bool WeightPerturbation::all_zero() const {
  for (const auto& t : entries)
    if (t.max_abs() != 0.0) return false;
  return true;
}

models::ParameterSet apply_perturbation(const models::ParameterSet& params, const WeightPerturbation& v) {
  if (v.entries.size() != params.size()) throw ContractError("perturbation does not match the parameter set");
  models::ParameterSet out = params;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto dst = out.at(i).values();
    auto add = v.entries[i].values();
    for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += add[e];
  }
  return out;
}

namespace {

// Instance loss graph. Without the adversarial branch "total" is the
// classification term alone.
diff::Graph instance_graph(const models::ModelSchema& schema, bool adversarial, double lambda_inv,
                           const losses::AsymmetricLossConfig& loss) {
  GraphBuilder b;
  NodeId x = b.input("x", schema.input_shape);
  NodeId y = b.input("y", {schema.num_classes});
  auto p = models::declare_parameters(b, schema);
  auto clean = models::append_head(b, schema, p, models::append_extractor(b, schema, p, x));
  NodeId cls = losses::append_asymmetric_loss(b, clean.scores, y, loss);
  if (!adversarial) {
    b.output("total", cls);
    b.output("classification", cls);
    return std::move(b).build();
  }
  NodeId xa = b.input("x_adv", schema.input_shape);
  auto adv = models::append_head(b, schema, p, models::append_extractor(b, schema, p, xa));
  NodeId cons = losses::append_consistency_loss(b, adv.scores, clean.scores, loss);
  b.output("total", b.add(cls, b.scale(cons, lambda_inv)));
  b.output("classification", cls);
  b.output("consistency", cons);
  return std::move(b).build();
}

// Per-instance losses and parameter gradients, reduced in instance order so
// the result does not depend on the thread count.
BatchLoss evaluate_batch(const diff::Graph& graph, const models::ParameterSet& params,
                         const std::vector<const Tensor*>& x, const std::vector<const Tensor*>& y,
                         const std::vector<Tensor>* x_adv) {
  const std::size_t n = x.size();
  if (n == 0 || y.size() != n || (x_adv != nullptr && x_adv->size() != n)) {
    throw ContractError("batch inputs differ in length or are empty");
  }
  const auto& names = params.names();
  std::vector<diff::GradientMap> grads(n);
  std::vector<double> total(n), cls(n), cons(n);
  std::vector<std::exception_ptr> errors(n);
  const bool adversarial = x_adv != nullptr;

  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    try {
      diff::Bindings in;
      models::bind_parameters(in, params);
      in.bind("x", *x[i]).bind("y", *y[i]);
      if (adversarial) in.bind("x_adv", (*x_adv)[i]);
      diff::Evaluation ev = diff::evaluate(graph, in);
      total[i] = ev.output("total").item();
      cls[i] = ev.output("classification").item();
      cons[i] = adversarial ? ev.output("consistency").item() : 0.0;
      grads[i] = diff::backward(ev, names, "total");
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  BatchLoss out;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.total += total[i];
    out.classification += cls[i];
    out.consistency += cons[i];
  }
  out.total *= inv;
  out.classification *= inv;
  out.consistency *= inv;
  out.gradients.reserve(names.size());
  for (const auto& name : names) {
    Tensor sum(params.at(name).shape());
    for (std::size_t i = 0; i < n; ++i) {
      auto g = grads[i].at(name).values();
      for (std::size_t e = 0; e < g.size(); ++e) sum[e] += g[e];
    }
    for (double& v : sum.values()) v *= inv;
    out.gradients.push_back(std::move(sum));
  }
  return out;
}

}  // namespace

BatchLoss adversarial_batch_loss(const models::Model& model, const models::ParameterSet& params,
                                 const AdversarialBatch& batch, double lambda_inv,
                                 const losses::AsymmetricLossConfig& loss) {
  const diff::Graph g = instance_graph(model.schema(), true, lambda_inv, loss);
  return evaluate_batch(g, params, batch.x, batch.y, &batch.x_adv);
}

namespace {

WeightPerturbation scale_to_budget(const models::ParameterSet& params, const std::vector<Tensor>& grads,
                                   double gamma) {
  WeightPerturbation v;
  for (std::size_t j = 0; j < params.size(); ++j) {
    Tensor vj(params.at(j).shape());
    const double gnorm = grads[j].l2_norm();
    const double budget = gamma * params.at(j).l2_norm();
    if (gnorm > 0.0 && budget > 0.0) {
      const double scale = budget / gnorm;
      for (std::size_t e = 0; e < vj.size(); ++e) vj[e] = scale * grads[j][e];
    }
    v.entries.push_back(std::move(vj));
  }
  return v;
}

}  // namespace

WeightPerturbation awp_perturbation(const models::Model& model, const models::ParameterSet& params,
                                    const AdversarialBatch& batch, const TradesAwpConfig& cfg,
                                    const losses::AsymmetricLossConfig& loss) {
  if (batch.x.empty()) throw ContractError("awp_perturbation needs a nonempty batch");
  if (cfg.awp_gamma == 0.0) {
    WeightPerturbation v;
    for (std::size_t j = 0; j < params.size(); ++j) v.entries.emplace_back(params.at(j).shape());
    return v;
  }
  const BatchLoss inner = adversarial_batch_loss(model, params, batch, cfg.lambda_inv, loss);
  return scale_to_budget(params, inner.gradients, cfg.awp_gamma);
}

// ---------------------------------------------------------------- logs

void write_epoch_csv(std::ostream& out, const TrainingLog& log) {
  out << "epoch,classification,consistency,total,val_loss,val_cmap,lr,wall_seconds,awp_batches,selected\n";
  for (const auto& r : log.epochs) {
    out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.3f},{},{}\n", r.epoch, r.classification,
                       r.consistency, r.total, r.val_loss, r.val_cmap, r.lr, r.wall_seconds, r.awp_batches,
                       r.epoch == log.selected_epoch ? 1 : 0);
  }
}

void write_batch_csv(std::ostream& out, const TrainingLog& log) {
  out << "epoch,batch,lr,classification,consistency,total,awp_applied,probe_committed_norm,probe_perturbed_norm\n";
  for (const auto& r : log.batches) {
    out << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{},{:.17g},{:.17g}\n", r.epoch, r.batch, r.lr,
                       r.classification, r.consistency, r.total, r.awp_applied ? 1 : 0, r.probe_committed_norm,
                       r.probe_perturbed_norm);
  }
}

// ---------------------------------------------------------------- training loop

std::pair<double, double> validation_metrics(const models::Model& model, const models::ParameterSet& params,
                                             const std::vector<synth::Instance>& split,
                                             const losses::AsymmetricLossConfig& loss) {
  if (split.empty()) throw ContractError("validation split is empty");
  std::vector<Tensor> labels(split.size()), scores(split.size());
  std::vector<double> losses_v(split.size());
  const auto count = static_cast<std::ptrdiff_t>(split.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    scores[i] = model.predict(params, split[i].x).scores;
    labels[i] = split[i].y;
    losses_v[i] = losses::asymmetric_loss(scores[i].values(), labels[i].values(), loss);
  }
  double mean_loss = 0.0;
  for (double v : losses_v) mean_loss += v;
  mean_loss /= static_cast<double>(split.size());
  return {mean_loss, metrics::cmap(metrics::EvaluationBatch::from_rows(labels, scores))};
}

namespace {

// Decoupled weight decay on weight matrices and prototypes; biases are not decayed.
class AdamW {
 public:
  AdamW(const models::ParameterSet& params, const OptimizerConfig& cfg) : cfg_(cfg) {
    for (std::size_t j = 0; j < params.size(); ++j) {
      m_.emplace_back(params.at(j).shape());
      v_.emplace_back(params.at(j).shape());
    }
  }

  void step(models::ParameterSet& params, const std::vector<Tensor>& grads, double lr, double proto_lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t j = 0; j < params.size(); ++j) {
      const std::string& name = params.names()[j];
      const double rate = models::ParameterSet::is_prototype_layer(name) ? proto_lr : lr;
      const bool decay = !name.ends_with(".bias");
      auto theta = params.at(j).values();
      auto g = grads[j].values();
      auto m = m_[j].values();
      auto v = v_[j].values();
      for (std::size_t e = 0; e < theta.size(); ++e) {
        m[e] = cfg_.beta1 * m[e] + (1.0 - cfg_.beta1) * g[e];
        v[e] = cfg_.beta2 * v[e] + (1.0 - cfg_.beta2) * g[e] * g[e];
        if (decay) theta[e] -= rate * cfg_.weight_decay * theta[e];
        theta[e] -= rate * (m[e] / c1) / (std::sqrt(v[e] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

enum Stream : std::uint64_t { kShuffle = 1, kNocall, kMixup, kRandomize };

TrainingResult train_impl(const synth::LabeledCorpus& corpus, const models::ModelSchema& schema,
                          const OptimizerConfig& opt, const std::optional<TradesAwpConfig>& trades,
                          std::uint64_t seed, const TrainOptions& options) {
  opt.validate();
  if (trades) trades->validate();
  options.loss.validate();
  if (!corpus.standardized) throw ContractError("training expects a standardized corpus");
  if (corpus.train.empty() || corpus.val.empty()) throw ContractError("training needs nonempty train and val splits");

  const models::Model model(schema);
  TrainingResult result{options.initial ? *options.initial : models::init_params(schema, seed), {}};
  if (options.initial && !(options.initial->schema() == schema)) throw ContractError("initial parameters do not match the schema");
  result.params.validate();
  if (opt.epochs == 0) return result;

  const bool adversarial = trades.has_value();
  const diff::Graph graph = instance_graph(schema, adversarial, adversarial ? trades->lambda_inv : 1.0, options.loss);
  const std::size_t n = corpus.train.size();
  const std::size_t batches_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = batches_per_epoch * opt.epochs;
  const auto& aug = corpus.config;
  const bool has_probe = result.params.contains("conv0.weight");

  models::ParameterSet& params = result.params;
  AdamW optimizer(params, opt);
  models::ParameterSet best = params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(derive_seed(seed, {kShuffle, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    const bool awp_on = adversarial && epoch >= trades->awp_warmup_epochs && trades->awp_gamma > 0.0;

    for (std::size_t b = 0; b < batches_per_epoch; ++b, ++step) {
      std::vector<synth::Instance> batch;
      for (std::size_t i = b * opt.batch_size; i < std::min(n, (b + 1) * opt.batch_size); ++i) {
        batch.push_back(corpus.train[order[i]]);
      }
      batch = synth::inject_nocall(batch, aug.nocall_probability, derive_seed(seed, {kNocall, epoch, b}), aug);
      batch = synth::mixup_multilabel(batch, aug.mixup.probability, aug.mixup.max_components,
                                      derive_seed(seed, {kMixup, epoch, b}));
      AdversarialBatch ab;
      for (const auto& inst : batch) {
        ab.x.push_back(&inst.x);
        ab.y.push_back(&inst.y);
      }

      const double lr = cosine_schedule(step + 1, total_steps, opt.warmup_fraction, opt.base_lr);
      const double proto_lr = opt.prototype_lr * lr / opt.base_lr;
      BatchRecord br;
      br.epoch = epoch + 1;
      br.batch = b;
      br.lr = lr;

      try {
        BatchLoss loss;
        if (!adversarial) {
          loss = evaluate_batch(graph, params, ab.x, ab.y, nullptr);
          if (has_probe) br.probe_perturbed_norm = params.at("conv0.weight").l2_norm();
        } else {
          const models::ParameterSet noisy =
              randomize_weights(params, trades->weight_randomization_std, derive_seed(seed, {kRandomize, epoch, b}));
          ab.x_adv.resize(batch.size());
          std::vector<std::exception_ptr> errors(batch.size());
          const auto count = static_cast<std::ptrdiff_t>(batch.size());
#pragma omp parallel for schedule(dynamic)
          for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            try {
              ab.x_adv[i] = trades->space == AttackSpace::kOutput
                                ? attacks::fgsm_output(model, noisy, *ab.x[i], *ab.y[i], trades->epsilon, options.loss).x_adv
                                : attacks::fgsm_embedding(model, noisy, *ab.x[i], trades->epsilon).x_adv;
            } catch (...) {
              errors[i] = std::current_exception();
            }
          }
          for (auto& e : errors)
            if (e) std::rethrow_exception(e);

          if (awp_on) {
            const WeightPerturbation v = awp_perturbation(model, params, ab, *trades, options.loss);
            const models::ParameterSet perturbed = apply_perturbation(params, v);
            loss = evaluate_batch(graph, perturbed, ab.x, ab.y, &ab.x_adv);
            br.awp_applied = true;
            ++rec.awp_batches;
            ++result.log.awp_applications;
            if (has_probe) br.probe_perturbed_norm = perturbed.at("conv0.weight").l2_norm();
          } else {
            loss = evaluate_batch(graph, params, ab.x, ab.y, &ab.x_adv);
            if (has_probe) br.probe_perturbed_norm = params.at("conv0.weight").l2_norm();
          }
        }
        if (!std::isfinite(loss.total)) throw NumericError("batch loss is not finite");
        optimizer.step(params, loss.gradients, lr, proto_lr);
        for (std::size_t j = 0; j < params.size(); ++j) {
          if (!params.at(j).all_finite()) throw NumericError("layer '" + params.names()[j] + "' became non-finite");
        }
        br.classification = loss.classification;
        br.consistency = loss.consistency;
        br.total = loss.total;
      } catch (const NumericError& e) {
        throw DivergenceError(fmt::format("training diverged at epoch {}, batch {} (lr {:.3g}): {}", epoch + 1, b, lr,
                                          e.what()));
      }
      if (has_probe) br.probe_committed_norm = params.at("conv0.weight").l2_norm();
      rec.classification += br.classification;
      rec.consistency += br.consistency;
      rec.total += br.total;
      rec.lr = lr;
      result.log.batches.push_back(br);
    }
    const double inv = 1.0 / static_cast<double>(batches_per_epoch);
    rec.classification *= inv;
    rec.consistency *= inv;
    rec.total *= inv;
    std::tie(rec.val_loss, rec.val_cmap) = validation_metrics(model, params, corpus.val, options.loss);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best = params;
      result.log.selected_epoch = rec.epoch;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  result.params = std::move(best);
  return result;
}

}  // namespace

TrainingResult train_ordinary(const synth::LabeledCorpus& corpus, const models::ModelSchema& schema,
                              const OptimizerConfig& opt, std::uint64_t seed, const TrainOptions& options) {
  return train_impl(corpus, schema, opt, std::nullopt, seed, options);
}

TrainingResult train_adversarial(const synth::LabeledCorpus& corpus, const models::ModelSchema& schema,
                                 const OptimizerConfig& opt, const TradesAwpConfig& trades, std::uint64_t seed,
                                 const TrainOptions& options) {
  return train_impl(corpus, schema, opt, trades, seed, options);
}

}  // namespace advlab::training
