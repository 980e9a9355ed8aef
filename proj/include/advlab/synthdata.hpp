// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic multi-label spectrogram corpus with a train -> test shift.
//
// Each class is a chirp ridge: a Gaussian-profile line in the time-frequency
// plane with a class-specific band (row) and slope. Bands are evenly spaced;
// slopes steepen toward the middle of the map, with lower bands rising and
// upper bands falling, so a class is recognizable from its local orientation
// alone. An instance superposes 1-3 class chirps on a background texture plus
// Gaussian noise.
//
// Values are produced in standardized units and mapped to the raw dB-like
// scale through the inverse of standardize(), so a consumer that standardizes
// with the default NormalizationConfig gets back unit-scale inputs.
//
// The test split can differ from train/val by louder noise, jittered chirp
// bands, and a background texture swap (horizontal bands -> vertical bands).

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab::synth {

struct ShiftConfig {
  double noise_multiplier = 1.6;
  double frequency_jitter = 2.0;  // rows, uniform in [-j, j] per placed chirp
  bool texture_swap = true;

  static ShiftConfig neutral() { return {1.0, 0.0, false}; }
  friend bool operator==(const ShiftConfig&, const ShiftConfig&) = default;
};

struct MixupConfig {
  double probability = 0.0;
  std::size_t max_components = 3;
  friend bool operator==(const MixupConfig&, const MixupConfig&) = default;
};

struct CorpusConfig {
  std::size_t num_classes = 6;
  std::size_t train = 600;
  std::size_t val = 150;
  std::size_t test = 300;
  Shape input_shape{32, 64, 1};
  ShiftConfig shift;
  MixupConfig mixup;
  double nocall_probability = 0.075;
  // Generator knobs, in standardized units.
  double noise_std = 0.08;
  double pattern_amplitude = 0.4;
  double texture_amplitude = 0.08;
  std::uint64_t seed = 0;

  void validate() const;
  /// Expected positive rate of each class (patterns per instance / K).
  double target_positive_rate() const;
  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

struct NormalizationConfig {
  double mean = -13.369;
  double std = 13.162;
};

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split split);

struct PlacedPattern {
  std::size_t class_id = 0;
  double center_row = 0.0;  // band center at the chirp onset
  double slope = 0.0;       // rows per column
  std::size_t onset = 0;    // first column
  std::size_t length = 0;   // columns
  double amplitude = 0.0;
};

struct Instance {
  std::string id;
  Tensor x;  // [H, W, C]
  Tensor y;  // [K] multi-hot
  std::vector<PlacedPattern> patterns;
};

struct LabeledCorpus {
  CorpusConfig config;
  std::vector<Instance> train, val, test;
  bool standardized = false;

  const std::vector<Instance>& split(Split s) const;
  std::vector<Instance>& split(Split s);
};

/// Throws ConfigError when the shape cannot hold the class bands.
LabeledCorpus generate_corpus(const CorpusConfig& cfg);

/// Band center row and slope of class k's chirp for a given map height.
std::pair<double, double> class_geometry(std::size_t k, std::size_t num_classes, std::size_t height);

Tensor standardize(const Tensor& x, const NormalizationConfig& norm = {});
Tensor destandardize(const Tensor& x, const NormalizationConfig& norm = {});
LabeledCorpus standardize(const LabeledCorpus& corpus, const NormalizationConfig& norm = {});

/// Per instance with probability p: replace input by the mean of itself and
/// 1..max_components-1 other batch members, labels by the union.
std::vector<Instance> mixup_multilabel(const std::vector<Instance>& batch, double probability,
                                       std::size_t max_components, std::uint64_t seed);

/// Per instance with probability p: replace input with pattern-free background
/// and noise (training distribution, standardized units unless `raw`) and the
/// label with zeros.
std::vector<Instance> inject_nocall(const std::vector<Instance>& batch, double probability, std::uint64_t seed,
                                    const CorpusConfig& cfg, bool standardized = true);

/// Pattern-free background for the train (texture_swap=false) or shifted
/// distribution, in standardized units.
Tensor background(const CorpusConfig& cfg, bool shifted, std::mt19937_64& rng);

/// Directory export: manifest.tsv, config.json, and tensors/<id>.f64 files.
void export_corpus(const LabeledCorpus& corpus, const std::filesystem::path& dir);
LabeledCorpus import_corpus(const std::filesystem::path& dir);

std::string config_to_json(const CorpusConfig& cfg);
CorpusConfig config_from_json(std::string_view text);

}  // namespace advlab::synth
