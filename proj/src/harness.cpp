// SPDX-License-Identifier: Apache-2.0
#include "advlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "advlab/errors.hpp"
#include "advlab/metrics.hpp"
#include "advlab/random.hpp"
#include "fmt/format.h"
#include "json.hpp"

namespace advlab::harness {

namespace fs = std::filesystem;
using attacks::AttackKind;
using nlohmann::json;

std::string_view mode_name(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::kOT: return "OT";
    case TrainingMode::kATE: return "AT-E";
    case TrainingMode::kATO: return "AT-O";
  }
  return "?";
}

TrainingMode parse_mode(std::string_view name) {
  for (auto m : {TrainingMode::kOT, TrainingMode::kATE, TrainingMode::kATO})
    if (mode_name(m) == name) return m;
  throw ConfigError("unknown training mode '" + std::string(name) + "' (expected OT, AT-E or AT-O)");
}

// ---------------------------------------------------------------- config

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.models.push_back({"linear", models::ModelSchema::desk_default(models::HeadKind::kLinear),
                        {AttackKind::kOutputUntargeted, AttackKind::kEmbeddingUntargeted},
                        std::nullopt});
  cfg.models.push_back({"prototype", models::ModelSchema::desk_default(models::HeadKind::kPrototype),
                        {AttackKind::kOutputUntargeted, AttackKind::kEmbeddingUntargeted,
                         AttackKind::kEmbeddingTargeted},
                        std::nullopt});
  ModeConfig ate{TrainingMode::kATE, {}};
  ate.trades.space = training::AttackSpace::kEmbedding;
  ModeConfig ato{TrainingMode::kATO, {}};
  ato.trades.space = training::AttackSpace::kOutput;
  cfg.modes = {{TrainingMode::kOT, {}}, ate, ato};
  return cfg;
}

void ExperimentConfig::validate() const {
  corpus.validate();
  optimizer.validate();
  loss.validate();
  if (models.empty()) throw ConfigError("experiment needs at least one model");
  if (modes.empty()) throw ConfigError("experiment needs at least one training mode");
  if (epsilons.empty()) throw ConfigError("experiment needs at least one epsilon");
  if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
  if (pgd_steps < 1) throw ConfigError("pgd_steps must be >= 1");

  std::set<std::string> names;
  for (const auto& m : models) {
    if (m.name.empty() || !std::all_of(m.name.begin(), m.name.end(), [](char c) {
          return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
        })) {
      throw ConfigError("model name '" + m.name + "' must be non-empty [A-Za-z0-9_-]");
    }
    if (!names.insert(m.name).second) throw ConfigError("duplicate model name '" + m.name + "'");
    try {
      m.schema.validate();
    } catch (const ContractError& e) {
      throw ConfigError("model '" + m.name + "': " + e.what());
    }
    if (m.schema.input_shape != corpus.input_shape) throw ConfigError("model '" + m.name + "' input shape differs from the corpus");
    if (m.schema.num_classes != corpus.num_classes) throw ConfigError("model '" + m.name + "' class count differs from the corpus");
    if (m.attacks.empty()) throw ConfigError("model '" + m.name + "' has no attacks");
    std::set<AttackKind> kinds(m.attacks.begin(), m.attacks.end());
    if (kinds.size() != m.attacks.size()) throw ConfigError("model '" + m.name + "' lists an attack twice");
    if (kinds.contains(AttackKind::kEmbeddingTargeted) && m.schema.head == models::HeadKind::kLinear &&
        !m.target_file) {
      throw ConfigError("model '" + m.name + "': targeted attacks on a linear head need a target_file");
    }
  }
  std::set<TrainingMode> seen;
  for (const auto& m : modes) {
    if (!seen.insert(m.mode).second) throw ConfigError("training mode listed twice");
    if (m.mode != TrainingMode::kOT) {
      m.trades.validate();
      const auto want = m.mode == TrainingMode::kATE ? training::AttackSpace::kEmbedding : training::AttackSpace::kOutput;
      if (m.trades.space != want) throw ConfigError(std::string(mode_name(m.mode)) + " attack space does not match the mode");
    }
  }
  for (double e : epsilons)
    if (!(std::isfinite(e) && e > 0.0)) throw ConfigError("epsilons must be finite and > 0");
  if (std::set<double>(epsilons.begin(), epsilons.end()).size() != epsilons.size()) throw ConfigError("duplicate epsilon");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("duplicate seed");
}

const ModelEntry& ExperimentConfig::model(std::string_view name) const {
  for (const auto& m : models)
    if (m.name == name) return m;
  throw LookupError("no model named '" + std::string(name) + "' in the config");
}

const ModeConfig& ExperimentConfig::mode(TrainingMode mode) const {
  for (const auto& m : modes)
    if (m.mode == mode) return m;
  throw LookupError("mode " + std::string(mode_name(mode)) + " is not configured");
}

namespace {

json trades_json(const training::TradesAwpConfig& t) {
  return {{"lambda_inv", t.lambda_inv},
          {"awp_gamma", t.awp_gamma},
          {"awp_warmup_epochs", t.awp_warmup_epochs},
          {"weight_randomization_std", t.weight_randomization_std},
          {"epsilon", t.epsilon}};
}

training::TradesAwpConfig trades_from(const json& j, training::TradesAwpConfig t) {
  t.lambda_inv = j.value("lambda_inv", t.lambda_inv);
  t.awp_gamma = j.value("awp_gamma", t.awp_gamma);
  t.awp_warmup_epochs = j.value("awp_warmup_epochs", t.awp_warmup_epochs);
  t.weight_randomization_std = j.value("weight_randomization_std", t.weight_randomization_std);
  t.epsilon = j.value("epsilon", t.epsilon);
  return t;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["corpus"] = json::parse(synth::config_to_json(cfg.corpus));
  j["models"] = json::array();
  for (const auto& m : cfg.models) {
    json e{{"name", m.name}, {"schema", json::parse(models::schema_to_json(m.schema))}};
    e["attacks"] = json::array();
    for (auto k : m.attacks) e["attacks"].push_back(std::string(attacks::attack_name(k)));
    if (m.target_file) e["target_file"] = m.target_file->string();
    j["models"].push_back(e);
  }
  j["modes"] = json::array();
  for (const auto& m : cfg.modes) {
    json e{{"mode", std::string(mode_name(m.mode))}};
    if (m.mode != TrainingMode::kOT) e["trades"] = trades_json(m.trades);
    j["modes"].push_back(e);
  }
  j["epsilons"] = cfg.epsilons;
  j["pgd_steps"] = cfg.pgd_steps;
  j["seeds"] = cfg.seeds;
  const auto& o = cfg.optimizer;
  j["optimizer"] = {{"base_lr", o.base_lr},         {"prototype_lr", o.prototype_lr},
                    {"weight_decay", o.weight_decay}, {"epochs", o.epochs},
                    {"batch_size", o.batch_size},     {"warmup_fraction", o.warmup_fraction},
                    {"beta1", o.beta1},               {"beta2", o.beta2},
                    {"adam_eps", o.adam_eps}};
  j["loss"] = {{"gamma_pos", cfg.loss.gamma_pos}, {"gamma_neg", cfg.loss.gamma_neg},
               {"clip_margin", cfg.loss.clip_margin}};
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(std::string_view text) {
  ExperimentConfig cfg = ExperimentConfig::defaults();
  try {
    const json j = json::parse(text);
    if (j.contains("corpus")) cfg.corpus = synth::config_from_json(j.at("corpus").dump());
    if (j.contains("models")) {
      cfg.models.clear();
      for (const auto& e : j.at("models")) {
        ModelEntry m;
        m.name = e.at("name").get<std::string>();
        m.schema = models::schema_from_json(e.at("schema").dump());
        for (const auto& a : e.at("attacks")) m.attacks.push_back(attacks::parse_attack(a.get<std::string>()));
        if (e.contains("target_file")) m.target_file = e.at("target_file").get<std::string>();
        cfg.models.push_back(std::move(m));
      }
    }
    if (j.contains("modes")) {
      cfg.modes.clear();
      for (const auto& e : j.at("modes")) {
        ModeConfig m;
        m.mode = parse_mode(e.at("mode").get<std::string>());
        m.trades.space = m.mode == TrainingMode::kATE ? training::AttackSpace::kEmbedding : training::AttackSpace::kOutput;
        if (e.contains("trades")) m.trades = trades_from(e.at("trades"), m.trades);
        cfg.modes.push_back(m);
      }
    }
    if (j.contains("epsilons")) cfg.epsilons = j.at("epsilons").get<std::vector<double>>();
    cfg.pgd_steps = j.value("pgd_steps", cfg.pgd_steps);
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      auto& c = cfg.optimizer;
      c.base_lr = o.value("base_lr", c.base_lr);
      c.prototype_lr = o.value("prototype_lr", c.prototype_lr);
      c.weight_decay = o.value("weight_decay", c.weight_decay);
      c.epochs = o.value("epochs", c.epochs);
      c.batch_size = o.value("batch_size", c.batch_size);
      c.warmup_fraction = o.value("warmup_fraction", c.warmup_fraction);
      c.beta1 = o.value("beta1", c.beta1);
      c.beta2 = o.value("beta2", c.beta2);
      c.adam_eps = o.value("adam_eps", c.adam_eps);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      cfg.loss.gamma_pos = l.value("gamma_pos", cfg.loss.gamma_pos);
      cfg.loss.gamma_neg = l.value("gamma_neg", cfg.loss.gamma_neg);
      cfg.loss.clip_margin = l.value("clip_margin", cfg.loss.clip_margin);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

// ---------------------------------------------------------------- report rows

std::vector<ReportRow> RobustnessReport::aggregate() const {
  struct Acc {
    ReportRow row;
    std::size_t n = 0;
  };
  std::vector<Acc> cells;
  auto same = [](const ReportRow& a, const ReportRow& b) {
    return a.model == b.model && a.mode == b.mode && a.attack == b.attack && a.epsilon == b.epsilon;
  };
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const Acc& a) { return same(a.row, r); });
    if (it == cells.end()) {
      cells.push_back({r, 1});
      continue;
    }
    auto& a = it->row;
    a.clean_cmap += r.clean_cmap;
    a.adv_cmap += r.adv_cmap;
    a.prs += r.prs;
    if (a.drs && r.drs) *a.drs += *r.drs;
    if (a.tars && r.tars) *a.tars += *r.tars;
    a.wall_seconds += r.wall_seconds;
    a.violations += r.violations;
    ++it->n;
  }
  std::vector<ReportRow> out;
  for (auto& [r, n] : cells) {
    const double d = static_cast<double>(n);
    r.seed = n;
    r.clean_cmap /= d;
    r.adv_cmap /= d;
    r.prs /= d;
    if (r.drs) *r.drs /= d;
    if (r.tars) *r.tars /= d;
    r.wall_seconds /= d;
    out.push_back(r);
  }
  return out;
}

namespace {

constexpr const char* kRowHeader = "model,mode,seed,attack,epsilon,clean_cmap,adv_cmap,prs,drs,tars,wall_seconds,violations";

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream s(line);
  while (std::getline(s, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("malformed number '" + s + "' in report file");
  }
}

}  // namespace

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << kRowHeader << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:.17g}", *v) : std::string(); };
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{},{},{:.3f},{}\n", r.model, r.mode, r.seed,
                       attacks::attack_name(r.attack), r.epsilon, r.clean_cmap, r.adv_cmap, r.prs, opt(r.drs),
                       opt(r.tars), r.wall_seconds, r.violations);
  }
}

std::vector<ReportRow> read_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kRowHeader) throw ConfigError("report file has an unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 12) throw ConfigError("report row has " + std::to_string(f.size()) + " fields, expected 12");
    ReportRow r;
    r.model = f[0];
    r.mode = f[1];
    r.seed = std::stoull(f[2]);
    r.attack = attacks::parse_attack(f[3]);
    r.epsilon = parse_double(f[4]);
    r.clean_cmap = parse_double(f[5]);
    r.adv_cmap = parse_double(f[6]);
    r.prs = parse_double(f[7]);
    if (!f[8].empty()) r.drs = parse_double(f[8]);
    if (!f[9].empty()) r.tars = parse_double(f[9]);
    r.wall_seconds = parse_double(f[10]);
    r.violations = std::stoull(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------- evaluation

Tensor load_target_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read target file '" + path.string() + "'");
  std::vector<double> values;
  std::size_t rows = 0, d = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto f = split(line, ',');
    if (rows == 0) d = f.size();
    if (f.size() != d || d == 0) throw ConfigError("target file rows must all have the same length");
    for (const auto& s : f) values.push_back(parse_double(s));
    ++rows;
  }
  if (rows == 0) throw ConfigError("target file '" + path.string() + "' is empty");
  return Tensor({rows, d}, std::move(values));
}

TargetSource prototype_targets(const models::ParameterSet& params, std::uint64_t seed) {
  if (!params.contains("prototypes")) {
    throw ConfigError("targeted attacks on a linear-head model need an explicit target file");
  }
  return {params.at("prototypes"), seed};
}

Evaluation evaluate_robustness(const models::Model& model, const models::ParameterSet& params,
                               const std::vector<synth::Instance>& instances, AttackKind kind,
                               const attacks::AttackBudget& budget, const std::optional<TargetSource>& targets,
                               const losses::AsymmetricLossConfig& loss) {
  budget.validate();
  if (instances.empty()) throw ContractError("evaluate_robustness: no instances");
  const bool targeted = kind == AttackKind::kEmbeddingTargeted;
  const std::size_t d = model.schema().embedding_dim();
  if (targeted) {
    if (!targets) throw ConfigError("targeted attack without a target source");
    if (targets->bank.rank() != 2 || targets->bank.shape()[1] != d || targets->bank.shape()[0] == 0) {
      throw ContractError("target bank must be [M, " + std::to_string(d) + "]");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = instances.size();
  std::vector<Tensor> labels(n), clean(n), adv(n);
  std::vector<double> drs(n, 0.0);
  std::vector<attacks::AttackRecord> records(n);
  std::exception_ptr failure;

#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    try {
      const auto& inst = instances[i];
      auto [z, pred] = model.embed_and_predict(params, inst.x);
      labels[i] = inst.y;
      clean[i] = pred.scores;
      attacks::AdversarialExample ex;
      long target_id = -1;
      Tensor target;
      switch (kind) {
        case AttackKind::kOutputUntargeted:
          ex = attacks::pgd_output_untargeted(model, params, inst.x, inst.y, budget, loss);
          break;
        case AttackKind::kEmbeddingUntargeted:
          ex = attacks::pgd_embedding_untargeted(model, params, inst.x, budget);
          break;
        case AttackKind::kEmbeddingTargeted: {
          std::mt19937_64 rng(derive_seed(targets->seed, {i}));
          const std::size_t m = targets->bank.shape()[0];
          const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
          target = Tensor({d}, std::vector<double>(targets->bank.data() + pick * d, targets->bank.data() + (pick + 1) * d));
          target_id = static_cast<long>(pick);
          ex = attacks::pgd_embedding_targeted(model, params, inst.x, target, budget);
          break;
        }
      }
      auto [z_adv, adv_pred] = model.embed_and_predict(params, ex.x_adv);
      adv[i] = adv_pred.scores;
      if (targeted) drs[i] = metrics::drs(z, z_adv, target);
      records[i] = attacks::make_record(inst.id, kind, budget.epsilon, ex, target_id);
    } catch (...) {
#pragma omp critical(advlab_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  Evaluation out;
  auto& r = out.row;
  r.attack = kind;
  r.epsilon = budget.epsilon;
  r.clean_cmap = metrics::cmap(metrics::EvaluationBatch::from_rows(labels, clean));
  r.adv_cmap = metrics::cmap(metrics::EvaluationBatch::from_rows(labels, adv));
  r.prs = metrics::prs_from_cmap(r.clean_cmap, r.adv_cmap);
  if (targeted) {
    double sum = 0.0;
    for (double v : drs) sum += v;
    r.drs = sum / static_cast<double>(n);
    r.tars = metrics::tars(r.prs, *r.drs);
  }
  for (const auto& rec : records)
    if (rec.max_linf > budget.epsilon + 1e-12) ++r.violations;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.records = std::move(records);
  return out;
}

void dump_embeddings(const models::Model& model, const models::ParameterSet& params,
                     const synth::LabeledCorpus& corpus, const fs::path& path) {
  std::vector<const synth::Instance*> all;
  std::vector<synth::Split> splits;
  for (auto s : {synth::Split::kTrain, synth::Split::kVal, synth::Split::kTest}) {
    for (const auto& inst : corpus.split(s)) {
      all.push_back(&inst);
      splits.push_back(s);
    }
  }
  const std::size_t d = model.schema().embedding_dim();
  std::vector<std::vector<double>> pooled(all.size(), std::vector<double>(d, 0.0));
  std::exception_ptr failure;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(all.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    try {
      const Tensor z = model.embed(params, all[i]->x);
      const std::size_t positions = z.size() / d;
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t c = 0; c < d; ++c) pooled[i][c] += z[p * d + c];
      for (double& v : pooled[i]) v /= static_cast<double>(positions);
    } catch (...) {
#pragma omp critical(advlab_dump_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "id,split,labels";
  for (std::size_t c = 0; c < d; ++c) out << ",e" << c;
  out << '\n';
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::string labels;
    for (std::size_t k = 0; k < all[i]->y.size(); ++k) {
      if (k > 0) labels += ';';
      labels += all[i]->y[k] > 0.5 ? '1' : '0';
    }
    out << all[i]->id << ',' << synth::split_name(splits[i]) << ',' << labels;
    for (double v : pooled[i]) out << fmt::format(",{:.17g}", v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

// ---------------------------------------------------------------- rendering

namespace {

std::string eps_label(double e) { return fmt::format("{:g}", e); }

// Bold for the best value in a column, underline for the second best.
std::vector<std::string> ranked_cells(const std::vector<std::optional<double>>& values) {
  std::vector<double> distinct;
  for (const auto& v : values)
    if (v) distinct.push_back(std::round(*v * 100.0) / 100.0);
  std::sort(distinct.begin(), distinct.end(), std::greater<>());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<std::string> out;
  for (const auto& v : values) {
    if (!v) {
      out.emplace_back("n/a");
      continue;
    }
    const double shown = std::round(*v * 100.0) / 100.0;
    std::string s = fmt::format("{:.2f}", *v);
    if (!distinct.empty() && shown == distinct[0]) {
      s = "**" + s + "**";
    } else if (distinct.size() > 1 && shown == distinct[1]) {
      s = "<u>" + s + "</u>";
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace

RenderedReport render_report(const RobustnessReport& report, const ExperimentConfig& cfg) {
  RenderedReport out;
  for (std::uint64_t seed : cfg.seeds) {
    for (const auto& m : cfg.models) {
      for (const auto& mode : cfg.modes) {
        for (auto kind : m.attacks) {
          for (double e : cfg.epsilons) {
            const bool found = std::any_of(report.rows.begin(), report.rows.end(), [&](const ReportRow& r) {
              return r.seed == seed && r.model == m.name && r.mode == mode_name(mode.mode) && r.attack == kind &&
                     r.epsilon == e;
            });
            if (!found) {
              out.missing.push_back(fmt::format("{} {} seed {} {} eps {}", m.name, mode_name(mode.mode), seed,
                                                attacks::attack_name(kind), eps_label(e)));
            }
          }
        }
      }
    }
  }

  const auto agg = report.aggregate();
  auto lookup = [&](const std::string& model, std::string_view mode, AttackKind kind, double e) -> const ReportRow* {
    for (const auto& r : agg)
      if (r.model == model && r.mode == mode && r.attack == kind && r.epsilon == e) return &r;
    return nullptr;
  };
  // Clean cmAP is the same for every attack cell of a model; average it per seed once.
  auto clean_mean = [&](const std::string& model, std::string_view mode) -> std::optional<double> {
    std::map<std::uint64_t, double> per_seed;
    for (const auto& r : report.rows)
      if (r.model == model && r.mode == mode) per_seed.emplace(r.seed, r.clean_cmap);
    if (per_seed.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& [seed, v] : per_seed) s += v;
    return s / static_cast<double>(per_seed.size());
  };

  std::string md = "# Robustness report\n\n";
  md += fmt::format("Seed means over {} seed(s). Best value per column in bold, second best underlined.\n\n",
                    cfg.seeds.size());

  md += "## Clean test cmAP\n\n| Mode |";
  for (const auto& m : cfg.models) md += " " + m.name + " |";
  md += "\n|---|";
  for (std::size_t i = 0; i < cfg.models.size(); ++i) md += "---|";
  md += "\n";
  {
    std::vector<std::vector<std::string>> cols;
    for (const auto& m : cfg.models) {
      std::vector<std::optional<double>> v;
      for (const auto& mode : cfg.modes) v.push_back(clean_mean(m.name, mode_name(mode.mode)));
      cols.push_back(ranked_cells(v));
    }
    for (std::size_t r = 0; r < cfg.modes.size(); ++r) {
      md += "| " + std::string(mode_name(cfg.modes[r].mode)) + " |";
      for (const auto& c : cols) md += " " + c[r] + " |";
      md += "\n";
    }
  }

  struct Metric {
    const char* title;
    std::optional<double> (*get)(const ReportRow&);
    bool targeted_only;
  };
  const Metric metrics_list[] = {
      {"PRS", [](const ReportRow& r) -> std::optional<double> { return r.prs; }, false},
      {"adversarial cmAP", [](const ReportRow& r) -> std::optional<double> { return r.adv_cmap; }, false},
      {"DRS", [](const ReportRow& r) { return r.drs; }, true},
      {"TARS", [](const ReportRow& r) { return r.tars; }, true},
  };
  for (const auto& m : cfg.models) {
    for (auto kind : m.attacks) {
      for (const auto& metric : metrics_list) {
        if (metric.targeted_only && kind != AttackKind::kEmbeddingTargeted) continue;
        md += fmt::format("\n## {} model, {} attack: {}\n\n| Mode |", m.name, attacks::attack_name(kind), metric.title);
        for (double e : cfg.epsilons) md += " eps " + eps_label(e) + " |";
        md += "\n|---|";
        for (std::size_t i = 0; i < cfg.epsilons.size(); ++i) md += "---|";
        md += "\n";
        std::vector<std::vector<std::string>> cols;
        for (double e : cfg.epsilons) {
          std::vector<std::optional<double>> v;
          for (const auto& mode : cfg.modes) {
            const ReportRow* r = lookup(m.name, mode_name(mode.mode), kind, e);
            v.push_back(r ? metric.get(*r) : std::nullopt);
          }
          cols.push_back(ranked_cells(v));
        }
        for (std::size_t r = 0; r < cfg.modes.size(); ++r) {
          md += "| " + std::string(mode_name(cfg.modes[r].mode)) + " |";
          for (const auto& c : cols) md += " " + c[r] + " |";
          md += "\n";
        }
      }
    }
  }

  if (!out.missing.empty()) {
    md += fmt::format("\n## Missing cells ({})\n\n", out.missing.size());
    for (const auto& s : out.missing) md += "- " + s + "\n";
  }
  out.markdown = std::move(md);
  return out;
}

// ---------------------------------------------------------------- experiment directory

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Write to a sibling temp file, then rename, so a crash never leaves a
// half-written file under the final name.
template <class Fn>
void write_atomically(const fs::path& path, Fn&& fn) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    fn(out);
    if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path);
}

void note(const RunOptions& o, const std::string& msg) {
  if (o.log) *o.log << msg << std::endl;
}

std::vector<std::uint64_t> selected_seeds(const ExperimentConfig& cfg, const RunOptions& o) {
  if (!o.only_seed) return cfg.seeds;
  if (std::find(cfg.seeds.begin(), cfg.seeds.end(), *o.only_seed) == cfg.seeds.end()) {
    throw ConfigError(fmt::format("seed {} is not part of the experiment", *o.only_seed));
  }
  return {*o.only_seed};
}

fs::path row_path(const fs::path& cell, AttackKind kind, double e) {
  return cell / "rows" / fmt::format("{}-{}.csv", attacks::attack_name(kind), eps_label(e));
}

}  // namespace

fs::path cell_dir(const fs::path& out, std::uint64_t seed, std::string_view model, TrainingMode mode) {
  return out / fmt::format("seed-{}", seed) / fmt::format("{}-{}", model, mode_name(mode));
}

synth::LabeledCorpus corpus_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  synth::CorpusConfig c = cfg.corpus;
  c.seed = seed;
  return synth::standardize(synth::generate_corpus(c));
}

void prepare_directory(const ExperimentConfig& cfg, const fs::path& out, bool resume) {
  cfg.validate();
  const std::string text = config_to_json(cfg);
  const std::string hash = fmt::format("{:016x}\n", fnv1a(text));
  const fs::path hash_path = out / "config.hash";
  if (fs::exists(hash_path)) {
    if (read_file(hash_path) != hash) {
      throw ConfigError("'" + out.string() + "' holds an experiment with a different config hash; refusing to resume");
    }
    if (!resume) throw ConfigError("'" + out.string() + "' already holds this experiment; pass --resume to continue it");
    return;
  }
  if (fs::exists(out) && !fs::is_empty(out)) {
    throw ConfigError("'" + out.string() + "' is not empty and has no config.hash; refusing to write into it");
  }
  write_atomically(out / "config.json", [&](std::ostream& o) { o << text; });
  write_atomically(hash_path, [&](std::ostream& o) { o << hash; });
}

void run_training(const ExperimentConfig& cfg, const fs::path& out, const RunOptions& options) {
  for (std::uint64_t seed : selected_seeds(cfg, options)) {
    std::optional<synth::LabeledCorpus> corpus;
    for (const auto& m : cfg.models) {
      for (const auto& mode : cfg.modes) {
        const fs::path dir = cell_dir(out, seed, m.name, mode.mode);
        if (fs::exists(dir / "checkpoint.bin")) {
          note(options, fmt::format("seed {} {} {}: trained, skipping", seed, m.name, mode_name(mode.mode)));
          continue;
        }
        if (!corpus) corpus = corpus_for_seed(cfg, seed);
        const auto t0 = std::chrono::steady_clock::now();
        training::TrainOptions topt;
        topt.loss = cfg.loss;
        training::TrainingResult res =
            mode.mode == TrainingMode::kOT
                ? training::train_ordinary(*corpus, m.schema, cfg.optimizer, seed, topt)
                : training::train_adversarial(*corpus, m.schema, cfg.optimizer, mode.trades, seed, topt);
        write_atomically(dir / "epochs.csv", [&](std::ostream& o) { training::write_epoch_csv(o, res.log); });
        write_atomically(dir / "batches.csv", [&](std::ostream& o) { training::write_batch_csv(o, res.log); });
        // The checkpoint goes last: its presence marks the cell as trained.
        const fs::path tmp = dir / "checkpoint.bin.tmp";
        models::save_checkpoint(res.params, tmp);
        fs::rename(tmp, dir / "checkpoint.bin");
        note(options, fmt::format("seed {} {} {}: trained in {:.1f}s, selected epoch {}", seed, m.name,
                                  mode_name(mode.mode),
                                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                                  res.log.selected_epoch));
      }
    }
  }
}

void run_evaluation(const ExperimentConfig& cfg, const fs::path& out, const RunOptions& options) {
  for (std::uint64_t seed : selected_seeds(cfg, options)) {
    std::optional<synth::LabeledCorpus> corpus;
    for (const auto& m : cfg.models) {
      const models::Model model(m.schema);
      std::optional<Tensor> file_bank;
      if (m.target_file) file_bank = load_target_file(*m.target_file);
      for (const auto& mode : cfg.modes) {
        const fs::path dir = cell_dir(out, seed, m.name, mode.mode);
        std::optional<models::ParameterSet> params;
        for (auto kind : m.attacks) {
          for (std::size_t ei = 0; ei < cfg.epsilons.size(); ++ei) {
            const double e = cfg.epsilons[ei];
            const fs::path rp = row_path(dir, kind, e);
            if (fs::exists(rp)) continue;
            if (!params) {
              if (!fs::exists(dir / "checkpoint.bin")) {
                throw ConfigError("no checkpoint in '" + dir.string() + "'; run the training stage first");
              }
              params = models::load_checkpoint(dir / "checkpoint.bin");
              if (!(params->schema() == m.schema)) throw ConfigError("checkpoint schema in '" + dir.string() + "' differs from the config");
            }
            if (!corpus) corpus = corpus_for_seed(cfg, seed);
            // Targets depend on (seed, eps) only, so every mode faces the same draws.
            const std::uint64_t target_seed = derive_seed(seed, {0x7A46, ei});
            std::optional<TargetSource> targets;
            if (kind == AttackKind::kEmbeddingTargeted) {
              targets = file_bank ? TargetSource{*file_bank, target_seed} : prototype_targets(*params, target_seed);
            }
            Evaluation ev = evaluate_robustness(model, *params, corpus->test, kind,
                                                attacks::AttackBudget::pgd(e, cfg.pgd_steps), targets, cfg.loss);
            ev.row.model = m.name;
            ev.row.mode = std::string(mode_name(mode.mode));
            ev.row.seed = seed;
            write_atomically(dir / "attacks" / fmt::format("{}-{}.csv", attacks::attack_name(kind), eps_label(e)),
                             [&](std::ostream& o) { attacks::write_attack_records(o, ev.records); });
            write_atomically(rp, [&](std::ostream& o) { write_report_csv(o, {ev.row}); });
            note(options, fmt::format("seed {} {} {} {} eps {}: clean {:.3f} adv {:.3f} PRS {:.3f}{} ({:.1f}s)", seed,
                                      m.name, mode_name(mode.mode), attacks::attack_name(kind), eps_label(e),
                                      ev.row.clean_cmap, ev.row.adv_cmap, ev.row.prs,
                                      ev.row.tars ? fmt::format(" DRS {:.3f} TARS {:.3f}", *ev.row.drs, *ev.row.tars) : "",
                                      ev.row.wall_seconds));
          }
        }
      }
    }
  }
}

RenderedReport assemble_report(const ExperimentConfig& cfg, const fs::path& out) {
  RobustnessReport report;
  for (std::uint64_t seed : cfg.seeds) {
    for (const auto& m : cfg.models) {
      for (const auto& mode : cfg.modes) {
        for (auto kind : m.attacks) {
          for (double e : cfg.epsilons) {
            const fs::path rp = row_path(cell_dir(out, seed, m.name, mode.mode), kind, e);
            if (!fs::exists(rp)) continue;
            std::ifstream in(rp);
            for (auto& r : read_report_csv(in)) report.rows.push_back(std::move(r));
          }
        }
      }
    }
  }
  RenderedReport rendered = render_report(report, cfg);
  write_atomically(out / "report.csv", [&](std::ostream& o) { write_report_csv(o, report.rows); });
  write_atomically(out / "aggregate.csv", [&](std::ostream& o) { write_report_csv(o, report.aggregate()); });
  write_atomically(out / "report.md", [&](std::ostream& o) { o << rendered.markdown; });
  return rendered;
}

RenderedReport run_experiment(const ExperimentConfig& cfg, const fs::path& out, const RunOptions& options) {
  prepare_directory(cfg, out, options.resume);
  run_training(cfg, out, options);
  run_evaluation(cfg, out, options);
  return assemble_report(cfg, out);
}

}  // namespace advlab::harness
