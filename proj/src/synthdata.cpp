// SPDX-License-Identifier: Apache-2.0
#include "advlab/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "advlab/errors.hpp"
#include "advlab/random.hpp"
#include "fmt/format.h"
#include "json.hpp"

namespace advlab::synth {

namespace {

constexpr double kRidgeWidth = 1.0;  // rows, Gaussian sigma of the chirp profile
constexpr double kMaxSlope = 0.6;    // rows per column, for the most central band
constexpr std::size_t kMinLength = 20, kMaxLength = 40;

std::size_t band_count(std::size_t num_classes) { return num_classes; }

}  // namespace

void CorpusConfig::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (input_shape.size() != 3 || input_shape[0] == 0 || input_shape[1] == 0 || input_shape[2] == 0) {
    throw ConfigError("input_shape must be (H, W, C) with positive entries");
  }
  const std::size_t h = input_shape[0], w = input_shape[1];
  if (h / (band_count(num_classes) + 1) < 3) {
    throw ConfigError(fmt::format("height {} is too small to separate {} class bands", h, band_count(num_classes)));
  }
  if (w < kMaxLength) throw ConfigError(fmt::format("width {} is shorter than the longest chirp ({})", w, kMaxLength));
  for (std::size_t n : {train, val, test}) {
    if (n < num_classes) throw ConfigError("every split needs at least num_classes instances");
  }
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
  };
  prob(mixup.probability, "mixup probability");
  prob(nocall_probability, "nocall probability");
  if (mixup.max_components != 2 && mixup.max_components != 3) throw ConfigError("mixup max_components must be 2 or 3");
  if (!(shift.noise_multiplier > 0.0) || !(shift.frequency_jitter >= 0.0)) throw ConfigError("invalid shift parameters");
  if (!(noise_std >= 0.0) || !(pattern_amplitude > 0.0) || !(texture_amplitude >= 0.0)) {
    throw ConfigError("generator amplitudes must be non-negative");
  }
}

double CorpusConfig::target_positive_rate() const {
  const double patterns = num_classes >= 3 ? 2.0 : (1.0 + static_cast<double>(num_classes)) / 2.0;
  return patterns / static_cast<double>(num_classes);
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

const std::vector<Instance>& LabeledCorpus::split(Split s) const {
  return s == Split::kTrain ? train : s == Split::kVal ? val : test;
}

std::vector<Instance>& LabeledCorpus::split(Split s) {
  return s == Split::kTrain ? train : s == Split::kVal ? val : test;
}

std::pair<double, double> class_geometry(std::size_t k, std::size_t num_classes, std::size_t height) {
  const std::size_t bands = band_count(num_classes);
  const double center = static_cast<double>(height) * static_cast<double>(k + 1) / static_cast<double>(bands + 1);
  // Central bands get the steepest slopes so ridges stay in frame; bands below
  // the middle rise and bands above it fall, so every class has its own slope.
  const std::size_t levels = (num_classes + 1) / 2;
  const std::size_t level = std::min(k, num_classes - 1 - k);  // 0 = outermost
  const double magnitude = kMaxSlope * static_cast<double>(level + 1) / static_cast<double>(levels);
  return {center, 2 * k + 1 < num_classes ? magnitude : -magnitude};
}

Tensor background(const CorpusConfig& cfg, bool shifted, std::mt19937_64& rng) {
  const std::size_t h = cfg.input_shape[0], w = cfg.input_shape[1], c = cfg.input_shape[2];
  std::uniform_real_distribution<double> period_d(5.0, 9.0), phase_d(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double period = period_d(rng), phase = phase_d(rng);
  const bool vertical = shifted && cfg.shift.texture_swap;
  const double sigma = cfg.noise_std * (shifted ? cfg.shift.noise_multiplier : 1.0);
  Tensor x({h, w, c});
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      const double axis = static_cast<double>(vertical ? col : r);
      const double tex = cfg.texture_amplitude * std::sin(2.0 * std::numbers::pi * axis / period + phase);
      for (std::size_t ch = 0; ch < c; ++ch) x[(r * w + col) * c + ch] = tex + sigma * noise(rng);
    }
  }
  return x;
}

namespace {

void draw_chirp(Tensor& x, const PlacedPattern& p) {
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const double mid = static_cast<double>(p.length) / 2.0;
  for (std::size_t t = 0; t < p.length && p.onset + t < w; ++t) {
    const double envelope = std::sin(std::numbers::pi * (static_cast<double>(t) + 0.5) / static_cast<double>(p.length));
    const double center = p.center_row + p.slope * (static_cast<double>(t) - mid);
    for (std::size_t r = 0; r < h; ++r) {
      const double d = (static_cast<double>(r) - center) / kRidgeWidth;
      const double v = p.amplitude * envelope * std::exp(-0.5 * d * d);
      for (std::size_t ch = 0; ch < c; ++ch) x[(r * w + p.onset + t) * c + ch] += v;
    }
  }
}

Instance make_instance(const CorpusConfig& cfg, Split split, std::size_t index) {
  std::mt19937_64 rng(derive_seed(cfg.seed, {0xC0A9, static_cast<std::uint64_t>(split), index}));
  const bool shifted = split == Split::kTest;
  const std::size_t k = cfg.num_classes;
  const std::size_t h = cfg.input_shape[0], w = cfg.input_shape[1];

  // 1-3 distinct classes; the first K instances of each split cover every class once.
  std::uniform_int_distribution<std::size_t> count_d(1, std::min<std::size_t>(3, k));
  const std::size_t count = count_d(rng);
  std::vector<std::size_t> classes(k);
  for (std::size_t i = 0; i < k; ++i) classes[i] = i;
  std::shuffle(classes.begin(), classes.end(), rng);
  if (index < k) {
    auto it = std::find(classes.begin(), classes.end(), index);
    std::iter_swap(classes.begin(), it);
  }
  classes.resize(count);

  Instance inst;
  inst.id = fmt::format("{}-{:05d}", split_name(split), index);
  inst.x = background(cfg, shifted, rng);
  inst.y = Tensor({k});
  std::uniform_int_distribution<std::size_t> len_d(kMinLength, kMaxLength);
  std::uniform_real_distribution<double> amp_d(0.7, 1.3), jitter_d(-1.0, 1.0);
  for (std::size_t cls : classes) {
    auto [center, slope] = class_geometry(cls, k, h);
    PlacedPattern p;
    p.class_id = cls;
    p.length = len_d(rng);
    p.onset = std::uniform_int_distribution<std::size_t>(0, w - p.length)(rng);
    p.slope = slope;
    p.amplitude = cfg.pattern_amplitude * amp_d(rng);
    const double jitter = jitter_d(rng);
    p.center_row = center + (shifted ? cfg.shift.frequency_jitter * jitter : 0.0);
    draw_chirp(inst.x, p);
    inst.y[cls] = 1.0;
    inst.patterns.push_back(p);
  }
  inst.x = destandardize(inst.x);
  return inst;
}

}  // namespace

LabeledCorpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  LabeledCorpus corpus;
  corpus.config = cfg;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const std::size_t n = s == Split::kTrain ? cfg.train : s == Split::kVal ? cfg.val : cfg.test;
    auto& out = corpus.split(s);
    out.resize(n);
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = make_instance(cfg, s, static_cast<std::size_t>(i));
  }
  return corpus;
}

Tensor standardize(const Tensor& x, const NormalizationConfig& norm) {
  if (!(norm.std > 0.0)) throw ContractError("standardization std must be > 0");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - norm.mean) / norm.std;
  return out;
}

Tensor destandardize(const Tensor& x, const NormalizationConfig& norm) {
  if (!(norm.std > 0.0)) throw ContractError("standardization std must be > 0");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * norm.std + norm.mean;
  return out;
}

LabeledCorpus standardize(const LabeledCorpus& corpus, const NormalizationConfig& norm) {
  if (corpus.standardized) throw ContractError("corpus is already standardized");
  LabeledCorpus out = corpus;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
    for (auto& inst : out.split(s)) inst.x = standardize(inst.x, norm);
  out.standardized = true;
  return out;
}

std::vector<Instance> mixup_multilabel(const std::vector<Instance>& batch, double probability,
                                       std::size_t max_components, std::uint64_t seed) {
  if (max_components < 2) throw ContractError("mixup needs max_components >= 2");
  std::vector<Instance> out = batch;
  if (batch.size() < 2 || probability <= 0.0) return out;
  std::mt19937_64 rng(derive_seed(seed, {0x3170}));
  std::bernoulli_distribution mix(probability);
  const std::size_t most = std::min(max_components, batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!mix(rng)) continue;
    const std::size_t m = std::uniform_int_distribution<std::size_t>(2, most)(rng);
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < batch.size(); ++j)
      if (j != i) others.push_back(j);
    std::shuffle(others.begin(), others.end(), rng);
    others.resize(m - 1);

    Instance& dst = out[i];
    for (std::size_t e = 0; e < dst.x.size(); ++e) {
      double acc = batch[i].x[e];
      for (std::size_t j : others) acc += batch[j].x[e];
      dst.x[e] = acc / static_cast<double>(m);
    }
    for (std::size_t j : others) {
      for (std::size_t k = 0; k < dst.y.size(); ++k) dst.y[k] = std::max(dst.y[k], batch[j].y[k]);
      dst.patterns.insert(dst.patterns.end(), batch[j].patterns.begin(), batch[j].patterns.end());
    }
  }
  return out;
}

std::vector<Instance> inject_nocall(const std::vector<Instance>& batch, double probability, std::uint64_t seed,
                                    const CorpusConfig& cfg, bool standardized) {
  if (!(probability >= 0.0 && probability <= 1.0)) throw ContractError("nocall probability must lie in [0, 1]");
  std::vector<Instance> out = batch;
  std::mt19937_64 rng(derive_seed(seed, {0x0ca1}));
  std::bernoulli_distribution replace(probability);
  for (auto& inst : out) {
    if (!replace(rng)) continue;
    Tensor x = background(cfg, false, rng);
    if (x.shape() != inst.x.shape()) throw ContractError("nocall background shape differs from the batch");
    inst.x = standardized ? std::move(x) : destandardize(x);
    inst.y = Tensor(inst.y.shape());
    inst.patterns.clear();
  }
  return out;
}

// ---------------------------------------------------------------- export

using nlohmann::json;

std::string config_to_json(const CorpusConfig& c) {
  json j;
  j["num_classes"] = c.num_classes;
  j["train"] = c.train;
  j["val"] = c.val;
  j["test"] = c.test;
  j["input_shape"] = c.input_shape;
  j["shift"] = {{"noise_multiplier", c.shift.noise_multiplier},
                {"frequency_jitter", c.shift.frequency_jitter},
                {"texture_swap", c.shift.texture_swap}};
  j["mixup"] = {{"probability", c.mixup.probability}, {"max_components", c.mixup.max_components}};
  j["nocall_probability"] = c.nocall_probability;
  j["noise_std"] = c.noise_std;
  j["pattern_amplitude"] = c.pattern_amplitude;
  j["texture_amplitude"] = c.texture_amplitude;
  j["seed"] = c.seed;
  return j.dump(2);
}

CorpusConfig config_from_json(std::string_view text) {
  CorpusConfig c;
  try {
    const json j = json::parse(text);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.train = j.value("train", c.train);
    c.val = j.value("val", c.val);
    c.test = j.value("test", c.test);
    if (j.contains("input_shape")) c.input_shape = j.at("input_shape").get<Shape>();
    if (j.contains("shift")) {
      const auto& s = j.at("shift");
      c.shift.noise_multiplier = s.value("noise_multiplier", c.shift.noise_multiplier);
      c.shift.frequency_jitter = s.value("frequency_jitter", c.shift.frequency_jitter);
      c.shift.texture_swap = s.value("texture_swap", c.shift.texture_swap);
    }
    if (j.contains("mixup")) {
      const auto& m = j.at("mixup");
      c.mixup.probability = m.value("probability", c.mixup.probability);
      c.mixup.max_components = m.value("max_components", c.mixup.max_components);
    }
    c.nocall_probability = j.value("nocall_probability", c.nocall_probability);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.pattern_amplitude = j.value("pattern_amplitude", c.pattern_amplitude);
    c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corpus config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

std::string label_string(const Tensor& y) {
  std::string s;
  for (double v : y.values()) s += v == 1.0 ? '1' : '0';
  return s;
}

std::string pattern_string(const std::vector<PlacedPattern>& ps) {
  std::string s;
  for (const auto& p : ps) {
    if (!s.empty()) s += '|';
    s += fmt::format("{}:{:.17g}:{:.17g}:{}:{}:{:.17g}", p.class_id, p.center_row, p.slope, p.onset, p.length,
                     p.amplitude);
  }
  return s.empty() ? "-" : s;
}

std::vector<PlacedPattern> parse_patterns(const std::string& s) {
  std::vector<PlacedPattern> out;
  if (s == "-") return out;
  std::stringstream all(s);
  std::string item;
  while (std::getline(all, item, '|')) {
    PlacedPattern p;
    char sep;
    std::stringstream in(item);
    in >> p.class_id >> sep >> p.center_row >> sep >> p.slope >> sep >> p.onset >> sep >> p.length >> sep >>
        p.amplitude;
    if (!in) throw ConfigError("malformed pattern entry '" + item + "'");
    out.push_back(p);
  }
  return out;
}

}  // namespace

void export_corpus(const LabeledCorpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "tensors");
  {
    json meta = json::parse(config_to_json(corpus.config));
    meta["standardized"] = corpus.standardized;
    std::ofstream out(dir / "config.json");
    out << meta.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  }
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.tsv").string());
  manifest << "id\tsplit\tlabels\tpatterns\n";
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (const auto& inst : corpus.split(s)) {
      manifest << inst.id << '\t' << split_name(s) << '\t' << label_string(inst.y) << '\t'
               << pattern_string(inst.patterns) << '\n';
      std::ofstream t(dir / "tensors" / (inst.id + ".f64"), std::ios::binary | std::ios::trunc);
      t.write(reinterpret_cast<const char*>(inst.x.data()), static_cast<std::streamsize>(inst.x.size() * sizeof(double)));
      if (!t) throw std::runtime_error("cannot write tensor file for " + inst.id);
    }
  }
}

LabeledCorpus import_corpus(const std::filesystem::path& dir) {
  LabeledCorpus corpus;
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw std::runtime_error("cannot read " + (dir / "config.json").string());
  std::stringstream buf;
  buf << cfg_in.rdbuf();
  corpus.config = config_from_json(buf.str());
  corpus.standardized = json::parse(buf.str()).value("standardized", false);

  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot read " + (dir / "manifest.tsv").string());
  std::string line;
  std::getline(manifest, line);  // header
  const Shape& shape = corpus.config.input_shape;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string id, split, labels, patterns;
    std::getline(row, id, '\t');
    std::getline(row, split, '\t');
    std::getline(row, labels, '\t');
    std::getline(row, patterns, '\t');
    Instance inst;
    inst.id = id;
    inst.y = Tensor({corpus.config.num_classes});
    if (labels.size() != corpus.config.num_classes) throw ConfigError("label width mismatch for " + id);
    for (std::size_t k = 0; k < labels.size(); ++k) inst.y[k] = labels[k] == '1' ? 1.0 : 0.0;
    inst.patterns = parse_patterns(patterns);
    std::vector<double> data(element_count(shape));
    std::ifstream t(dir / "tensors" / (id + ".f64"), std::ios::binary);
    if (!t.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw std::runtime_error("cannot read tensor file for " + id);
    }
    inst.x = Tensor(shape, std::move(data));
    if (split == "train") {
      corpus.train.push_back(std::move(inst));
    } else if (split == "val") {
      corpus.val.push_back(std::move(inst));
    } else if (split == "test") {
      corpus.test.push_back(std::move(inst));
    } else {
      throw ConfigError("unknown split '" + split + "' in manifest");
    }
  }
  return corpus;
}

}  // namespace advlab::synth
