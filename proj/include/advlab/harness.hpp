// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment grid runner: corpus per seed, every (model, mode) pair trained,
// every configured attack evaluated on the shifted test split, then CSV and
// Markdown reports.
//
// Output directory layout (see docs/formats.md):
//   config.json             canonical config, refused on resume if it differs
//   seed-<s>/<model>-<mode>/checkpoint.bin, epochs.csv, batches.csv
//   seed-<s>/<model>-<mode>/attacks/<attack>-<eps>.csv   per-instance records
//   seed-<s>/<model>-<mode>/rows/<attack>-<eps>.csv      one report row
//   report.csv, aggregate.csv, report.md

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/losses.hpp"
#include "advlab/models.hpp"
#include "advlab/synthdata.hpp"
#include "advlab/training.hpp"

namespace advlab::harness {

enum class TrainingMode { kOT, kATE, kATO };

std::string_view mode_name(TrainingMode mode);  // "OT", "AT-E", "AT-O"
TrainingMode parse_mode(std::string_view name);

struct ModeConfig {
  TrainingMode mode = TrainingMode::kOT;
  training::TradesAwpConfig trades;  // attack space follows the mode; unused for OT
};

struct ModelEntry {
  std::string name;  // unique, used in paths and reports
  models::ModelSchema schema;
  std::vector<attacks::AttackKind> attacks;
  std::optional<std::filesystem::path> target_file;  // targeted attacks on linear heads
};

struct ExperimentConfig {
  synth::CorpusConfig corpus;  // corpus.seed is replaced by each run seed
  std::vector<ModelEntry> models;
  std::vector<ModeConfig> modes;
  std::vector<double> epsilons{0.001, 0.01, 0.05, 0.1, 0.2};
  std::size_t pgd_steps = 10;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  training::OptimizerConfig optimizer;
  losses::AsymmetricLossConfig loss;

  /// Linear and prototype models, OT/AT-E/AT-O. Targeted attacks only run on
  /// the prototype model, whose own bank supplies the targets.
  static ExperimentConfig defaults();
  void validate() const;
  const ModelEntry& model(std::string_view name) const;
  const ModeConfig& mode(TrainingMode mode) const;
};

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct ReportRow {
  std::string model;
  std::string mode;
  std::uint64_t seed = 0;
  attacks::AttackKind attack = attacks::AttackKind::kOutputUntargeted;
  double epsilon = 0.0;
  double clean_cmap = 0.0;
  double adv_cmap = 0.0;
  double prs = 0.0;
  std::optional<double> drs;   // targeted only: mean per-instance DRS
  std::optional<double> tars;  // targeted only: TARS(PRS, mean DRS)
  double wall_seconds = 0.0;
  std::size_t violations = 0;  // records with max |delta| > eps + 1e-12
};

struct RobustnessReport {
  std::vector<ReportRow> rows;

  /// Seed means per (model, mode, attack, eps), in first-appearance order;
  /// the seed field holds the number of seeds averaged.
  std::vector<ReportRow> aggregate() const;
};

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_report_csv(std::istream& in);

/// Target embeddings for targeted attacks: [M, D] bank plus per-instance draws.
struct TargetSource {
  Tensor bank;
  std::uint64_t seed = 0;
};

/// Reads a target bank: one comma-separated D-vector per line.
Tensor load_target_file(const std::filesystem::path& path);

struct Evaluation {
  ReportRow row;  // model, mode and seed are left for the caller
  std::vector<attacks::AttackRecord> records;
};

/// Attacks every instance of `instances`. Targeted attacks need `targets`;
/// prototype models may pass their own bank via prototype_targets().
Evaluation evaluate_robustness(const models::Model& model, const models::ParameterSet& params,
                               const std::vector<synth::Instance>& instances, attacks::AttackKind kind,
                               const attacks::AttackBudget& budget, const std::optional<TargetSource>& targets,
                               const losses::AsymmetricLossConfig& loss = {});

/// The model's own prototype bank, or ConfigError for a linear head.
TargetSource prototype_targets(const models::ParameterSet& params, std::uint64_t seed);

/// CSV: id, split, labels (';'-joined), then D pooled embedding columns.
void dump_embeddings(const models::Model& model, const models::ParameterSet& params,
                     const synth::LabeledCorpus& corpus, const std::filesystem::path& path);

struct RenderedReport {
  std::string markdown;
  std::vector<std::string> missing;  // "<model> <mode> seed <s> <attack> eps <e>"
};

/// Tables of seed means; best per column bold, second best underlined.
RenderedReport render_report(const RobustnessReport& report, const ExperimentConfig& cfg);

struct RunOptions {
  bool resume = false;
  std::optional<std::uint64_t> only_seed;
  std::ostream* log = nullptr;
};

/// Training stage for every (seed, model, mode); skips cells with a checkpoint.
void run_training(const ExperimentConfig& cfg, const std::filesystem::path& out, const RunOptions& options);
/// Evaluation stage; every cell needs its checkpoint.
void run_evaluation(const ExperimentConfig& cfg, const std::filesystem::path& out, const RunOptions& options);
/// Collects row files into report.csv / aggregate.csv / report.md.
RenderedReport assemble_report(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// All three stages. Returns the rendered report; complete iff nothing is missing.
RenderedReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                              const RunOptions& options = {});

/// Writes config.json into a fresh directory, or checks it against an existing
/// one (ConfigError on mismatch or when `resume` is false and state exists).
void prepare_directory(const ExperimentConfig& cfg, const std::filesystem::path& out, bool resume);

std::filesystem::path cell_dir(const std::filesystem::path& out, std::uint64_t seed, std::string_view model,
                               TrainingMode mode);
synth::LabeledCorpus corpus_for_seed(const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace advlab::harness
