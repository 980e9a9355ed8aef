// SPDX-License-Identifier: Apache-2.0
// Command-line front end for the experiment harness.
//
// Exit codes: 0 complete, 1 runtime failure, 2 configuration error,
// 3 report written but grid incomplete.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "advlab/errors.hpp"
#include "advlab/harness.hpp"

namespace {

using namespace advlab;
namespace fs = std::filesystem;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
};

harness::ExperimentConfig load(const Globals& g) {
  return g.config.empty() ? harness::ExperimentConfig::defaults() : harness::load_config(g.config);
}

std::uint64_t corpus_seed(const Globals& g, const harness::ExperimentConfig& cfg) {
  return g.seed ? *g.seed : cfg.seeds.front();
}

harness::RunOptions run_options(const Globals& g) {
  harness::RunOptions o;
  o.resume = g.resume;
  o.only_seed = g.seed;
  o.log = &std::cerr;
  return o;
}

void require_out(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out is required");
}

int finish(const harness::RenderedReport& r, const std::string& out) {
  std::cout << "report written to " << (fs::path(out) / "report.md").string() << "\n";
  if (!r.missing.empty()) {
    std::cerr << r.missing.size() << " grid cell(s) missing:\n";
    for (const auto& m : r.missing) std::cerr << "  " << m << "\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advlab: adversarial robustness experiments on synthetic spectrograms"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON); defaults when omitted")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "restrict to one seed / corpus seed");
  app.add_option("--out", g.out, "output directory or file");
  app.add_flag("--resume", g.resume, "continue an existing experiment directory");

  auto* gen = app.add_subcommand("generate-data", "write the corpus for one seed (raw scale)");
  auto* train = app.add_subcommand("train", "train every (model, mode) cell");
  auto* evaluate = app.add_subcommand("evaluate", "run the attack grid on trained cells");
  auto* report = app.add_subcommand("report", "collect rows into report.csv / aggregate.csv / report.md");
  auto* run = app.add_subcommand("run", "train, evaluate and report");

  auto* attack = app.add_subcommand("attack", "attack the test split with one checkpoint");
  std::string checkpoint, kind = "output-untargeted", targets_file;
  double epsilon = 0.05;
  attack->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  attack->add_option("--attack", kind, "output-untargeted | embedding-untargeted | embedding-targeted");
  attack->add_option("--epsilon", epsilon, "l-inf budget");
  attack->add_option("--targets", targets_file, "target bank CSV (one D-vector per line)")->check(CLI::ExistingFile);

  auto* dump = app.add_subcommand("dump-embeddings", "pooled embeddings of every instance as CSV");
  std::string dump_checkpoint;
  dump->add_option("--checkpoint", dump_checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    const harness::ExperimentConfig cfg = load(g);
    if (gen->parsed()) {
      require_out(g);
      synth::CorpusConfig c = cfg.corpus;
      c.seed = corpus_seed(g, cfg);
      synth::export_corpus(synth::generate_corpus(c), g.out);
      std::cout << "corpus written to " << g.out << "\n";
      return 0;
    }
    if (train->parsed()) {
      require_out(g);
      harness::prepare_directory(cfg, g.out, g.resume);
      harness::run_training(cfg, g.out, run_options(g));
      return 0;
    }
    if (evaluate->parsed()) {
      require_out(g);
      harness::prepare_directory(cfg, g.out, true);
      harness::run_evaluation(cfg, g.out, run_options(g));
      return 0;
    }
    if (report->parsed()) {
      require_out(g);
      harness::prepare_directory(cfg, g.out, true);
      return finish(harness::assemble_report(cfg, g.out), g.out);
    }
    if (run->parsed()) {
      require_out(g);
      return finish(harness::run_experiment(cfg, g.out, run_options(g)), g.out);
    }
    if (attack->parsed()) {
      const auto params = models::load_checkpoint(checkpoint);
      const models::Model model(params.schema());
      const auto corpus = harness::corpus_for_seed(cfg, corpus_seed(g, cfg));
      const auto k = attacks::parse_attack(kind);
      std::optional<harness::TargetSource> targets;
      if (k == attacks::AttackKind::kEmbeddingTargeted) {
        targets = targets_file.empty() ? harness::prototype_targets(params, corpus_seed(g, cfg))
                                       : harness::TargetSource{harness::load_target_file(targets_file), corpus_seed(g, cfg)};
      }
      auto ev = harness::evaluate_robustness(model, params, corpus.test, k, attacks::AttackBudget::pgd(epsilon, cfg.pgd_steps),
                                             targets, cfg.loss);
      if (!g.out.empty()) {
        std::ofstream out(g.out);
        if (!out) throw std::runtime_error("cannot write '" + g.out + "'");
        attacks::write_attack_records(out, ev.records);
      }
      harness::write_report_csv(std::cout, {ev.row});
      return 0;
    }
    if (dump->parsed()) {
      require_out(g);
      const auto params = models::load_checkpoint(dump_checkpoint);
      const models::Model model(params.schema());
      harness::dump_embeddings(model, params, harness::corpus_for_seed(cfg, corpus_seed(g, cfg)), g.out);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
