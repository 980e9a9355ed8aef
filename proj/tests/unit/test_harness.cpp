// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "advlab/errors.hpp"
#include "advlab/harness.hpp"
#include "doctest.h"

using namespace advlab;
using namespace advlab::harness;
namespace fs = std::filesystem;

namespace {

// 1 mode x 1 eps x 1 seed on a tiny corpus with a single epoch.
ExperimentConfig micro_config() {
  ExperimentConfig cfg = ExperimentConfig::defaults();
  cfg.corpus.train = 32;
  cfg.corpus.val = 16;
  cfg.corpus.test = 12;
  cfg.modes.resize(1);
  cfg.epsilons = {0.05};
  cfg.seeds = {3};
  cfg.pgd_steps = 2;
  cfg.optimizer.epochs = 1;
  cfg.optimizer.batch_size = 16;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ReportRow row(std::string model, std::string mode, std::uint64_t seed, attacks::AttackKind kind, double eps,
              double clean, double prs) {
  ReportRow r;
  r.model = std::move(model);
  r.mode = std::move(mode);
  r.seed = seed;
  r.attack = kind;
  r.epsilon = eps;
  r.clean_cmap = clean;
  r.adv_cmap = clean * prs;
  r.prs = prs;
  return r;
}

}  // namespace

TEST_CASE("config JSON round trip and validation") {
  const auto cfg = ExperimentConfig::defaults();
  CHECK(cfg.models.size() == 2);
  CHECK(cfg.modes.size() == 3);
  CHECK(config_to_json(config_from_json(config_to_json(cfg))) == config_to_json(cfg));
  CHECK(parse_mode("AT-O") == TrainingMode::kATO);
  CHECK_THROWS_AS(parse_mode("AT"), ConfigError);

  auto bad = cfg;
  bad.models[0].attacks.push_back(attacks::AttackKind::kEmbeddingTargeted);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.models[1].name = bad.models[0].name;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"epsilons\": \"many\"}"), ConfigError);
}

TEST_CASE("report CSV round trip and aggregation") {
  std::vector<ReportRow> rows{row("m", "OT", 1, attacks::AttackKind::kOutputUntargeted, 0.05, 0.8, 0.5),
                              row("m", "OT", 2, attacks::AttackKind::kOutputUntargeted, 0.05, 0.6, 0.25)};
  rows[1].drs = 0.4;
  rows[1].tars = 0.3;
  std::stringstream s;
  write_report_csv(s, rows);
  const auto back = read_report_csv(s);
  REQUIRE(back.size() == 2);
  CHECK(back[1].drs == 0.4);
  CHECK_FALSE(back[0].drs.has_value());
  CHECK(back[0].prs == 0.5);
  const auto agg = RobustnessReport{rows}.aggregate();
  REQUIRE(agg.size() == 1);
  CHECK(agg[0].seed == 2);
  CHECK(agg[0].clean_cmap == doctest::Approx(0.7));
  CHECK(agg[0].prs == doctest::Approx(0.375));
}

TEST_CASE("rendered tables mark best and second best; missing cells are listed") {
  auto cfg = ExperimentConfig::defaults();
  cfg.models.resize(1);
  cfg.models[0].attacks = {attacks::AttackKind::kOutputUntargeted};
  cfg.epsilons = {0.05};
  cfg.seeds = {1};
  RobustnessReport report;
  const auto kind = attacks::AttackKind::kOutputUntargeted;
  report.rows = {row("linear", "OT", 1, kind, 0.05, 0.70, 0.10), row("linear", "AT-E", 1, kind, 0.05, 0.65, 0.40),
                 row("linear", "AT-O", 1, kind, 0.05, 0.60, 0.90)};
  const auto r = render_report(report, cfg);
  CHECK(r.missing.empty());
  CHECK(r.markdown.find("**0.90**") != std::string::npos);
  CHECK(r.markdown.find("<u>0.40</u>") != std::string::npos);
  CHECK(r.markdown.find("**0.70**") != std::string::npos);

  report.rows.pop_back();
  const auto partial = render_report(report, cfg);
  REQUIRE(partial.missing.size() == 1);
  CHECK(partial.missing[0].find("AT-O") != std::string::npos);
}

TEST_CASE("targets: linear heads have no prototype bank; file banks load") {
  const auto lin = models::init_params(models::ModelSchema::desk_default(models::HeadKind::kLinear), 1);
  CHECK_THROWS_AS(prototype_targets(lin, 1), ConfigError);
  const auto proto = models::init_params(models::ModelSchema::desk_default(models::HeadKind::kPrototype), 1);
  CHECK(prototype_targets(proto, 1).bank.shape() == Shape{18, 32});

  TempDir dir("advlab_test_targets");
  fs::create_directories(dir.path);
  {
    std::ofstream f(dir.path / "t.csv");
    f << "1,0,0\n0,0.5,0.5\n";
  }
  const Tensor bank = load_target_file(dir.path / "t.csv");
  CHECK(bank.shape() == Shape{2, 3});
  CHECK(bank[4] == 0.5);
  {
    std::ofstream f(dir.path / "ragged.csv");
    f << "1,0,0\n0,1\n";
  }
  CHECK_THROWS_AS(load_target_file(dir.path / "ragged.csv"), ConfigError);
}

TEST_CASE("evaluate_robustness: vanishing budget, counts, and targeted requirements") {
  const auto cfg = micro_config();
  const auto corpus = corpus_for_seed(cfg, 3);
  const auto schema = models::ModelSchema::desk_default(models::HeadKind::kPrototype);
  const models::Model model(schema);
  const auto params = models::init_params(schema, 3);
  const auto& test = corpus.test;

  for (auto kind : {attacks::AttackKind::kOutputUntargeted, attacks::AttackKind::kEmbeddingUntargeted,
                    attacks::AttackKind::kEmbeddingTargeted}) {
    const auto ev = evaluate_robustness(model, params, test, kind, attacks::AttackBudget::pgd(1e-12, 2),
                                        prototype_targets(params, 3));
    CHECK(ev.records.size() == test.size());
    CHECK(std::abs(ev.row.prs - 1.0) < 1e-6);
    CHECK(ev.row.violations == 0);
    CHECK(ev.row.drs.has_value() == (kind == attacks::AttackKind::kEmbeddingTargeted));
  }
  CHECK_THROWS_AS(evaluate_robustness(model, params, test, attacks::AttackKind::kEmbeddingTargeted,
                                      attacks::AttackBudget::pgd(0.05, 2), std::nullopt),
                  ConfigError);
  const auto a = evaluate_robustness(model, params, test, attacks::AttackKind::kEmbeddingTargeted,
                                     attacks::AttackBudget::pgd(0.05, 2), prototype_targets(params, 3));
  const auto b = evaluate_robustness(model, params, test, attacks::AttackKind::kEmbeddingTargeted,
                                     attacks::AttackBudget::pgd(0.05, 2), prototype_targets(params, 3));
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].target_id == b.records[i].target_id);
    CHECK(a.records[i].final_objective == b.records[i].final_objective);
  }
}

TEST_CASE("dump_embeddings: one row per instance, pooled means, stable bytes") {
  const auto cfg = micro_config();
  const auto corpus = corpus_for_seed(cfg, 3);
  const auto schema = models::ModelSchema::desk_default(models::HeadKind::kLinear);
  const models::Model model(schema);
  const auto params = models::init_params(schema, 4);
  TempDir dir("advlab_test_dump");
  fs::create_directories(dir.path);
  dump_embeddings(model, params, corpus, dir.path / "a.csv");
  dump_embeddings(model, params, corpus, dir.path / "b.csv");
  const std::string text = slurp(dir.path / "a.csv");
  CHECK(text == slurp(dir.path / "b.csv"));

  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0;
  std::string first;
  while (std::getline(in, line)) {
    if (rows == 0) first = line;
    ++rows;
  }
  CHECK(rows == 32 + 16 + 12);

  const Tensor z = model.embed(params, corpus.train.front().x);
  double mean0 = 0.0;
  for (std::size_t p = 0; p < z.size() / 32; ++p) mean0 += z[p * 32];
  mean0 /= static_cast<double>(z.size() / 32);
  std::vector<std::string> cells;
  std::stringstream fields(first);
  for (std::string c; std::getline(fields, c, ',');) cells.push_back(c);
  REQUIRE(cells.size() == 3 + 32);
  CHECK(cells[0] == corpus.train.front().id);
  CHECK(std::stod(cells[3]) == doctest::Approx(mean0).epsilon(1e-12));
}

TEST_CASE("experiment directory: counting contract, resume and refusal") {
  const auto cfg = micro_config();
  TempDir dir("advlab_test_run");
  const auto report = run_experiment(cfg, dir.path);
  CHECK(report.missing.empty());

  std::ifstream csv(dir.path / "report.csv");
  const auto rows = read_report_csv(csv);
  // linear: 2 attacks, prototype: 3 attacks
  CHECK(rows.size() == 5);
  std::map<std::string, int> per_kind;
  for (const auto& r : rows) ++per_kind[r.model + "/" + std::string(attacks::attack_name(r.attack))];
  for (const auto& [key, n] : per_kind) CHECK_MESSAGE(n == 1, key);
  for (const auto& r : rows) CHECK(r.violations == 0);
  CHECK(fs::exists(cell_dir(dir.path, 3, "prototype", TrainingMode::kOT) / "checkpoint.bin"));

  CHECK_THROWS_AS(prepare_directory(cfg, dir.path, false), ConfigError);
  CHECK_NOTHROW(prepare_directory(cfg, dir.path, true));
  auto changed = cfg;
  changed.epsilons = {0.1};
  CHECK_THROWS_AS(prepare_directory(changed, dir.path, true), ConfigError);

  // Resuming a finished run rewrites nothing but the reports.
  const auto before = slurp(cell_dir(dir.path, 3, "linear", TrainingMode::kOT) / "checkpoint.bin");
  RunOptions resume;
  resume.resume = true;
  CHECK(run_experiment(cfg, dir.path, resume).markdown == report.markdown);
  CHECK(slurp(cell_dir(dir.path, 3, "linear", TrainingMode::kOT) / "checkpoint.bin") == before);
}
