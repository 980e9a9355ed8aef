// SPDX-License-Identifier: Apache-2.0
#pragma once

// Convolutional embedding extractor plus two classifier heads:
//   linear     global average pool -> affine -> sigmoid
//   prototype  rectified cosine to every prototype -> spatial max -> affine -> sigmoid
//
// Parameter names:
//   conv{i}.weight [3, 3, C_in, C_out], conv{i}.bias [C_out]
//   head.weight [K, D] (linear) or [K, K*P] (prototype), head.bias [K]
//   prototypes [K*P, D]; prototype j belongs to class j / P

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "advlab/graph.hpp"
#include "advlab/tensor.hpp"

namespace advlab::models {

enum class HeadKind { kLinear, kPrototype };

std::string_view head_name(HeadKind kind);
HeadKind parse_head(std::string_view name);

struct ConvLayerSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct ModelSchema {
  Shape input_shape{32, 64, 1};
  std::size_t num_classes = 6;
  std::vector<ConvLayerSpec> conv{{8, 3, 2, 1}, {16, 3, 2, 1}, {32, 3, 1, 1}};
  HeadKind head = HeadKind::kLinear;
  std::size_t prototypes_per_class = 3;

  static ModelSchema desk_default(HeadKind head);

  /// (H_z, W_z, D) implied by the conv stack.
  Shape embedding_shape() const;
  std::size_t embedding_dim() const { return conv.back().out_channels; }
  std::size_t num_prototypes() const { return num_classes * prototypes_per_class; }
  /// Throws ContractError on an unusable schema.
  void validate() const;

  friend bool operator==(const ModelSchema&, const ModelSchema&) = default;
};

/// Named layer tensors in a fixed order, tied to the schema they were made for.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(ModelSchema schema);

  const ModelSchema& schema() const noexcept { return schema_; }
  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::size_t i) const { return tensors_.at(i); }
  Tensor& at(std::size_t i) { return tensors_.at(i); }
  bool contains(std::string_view name) const;

  /// Appends a layer; shapes are checked against the schema by validate().
  void add(std::string name, Tensor value);
  /// Names, shapes and finiteness consistent with the schema.
  void validate() const;
  std::size_t scalar_count() const;

  static bool is_prototype_layer(std::string_view name) { return name == "prototypes"; }

 private:
  ModelSchema schema_;
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b);

/// Expected (name, shape) list for a schema, in storage order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSchema& schema);

/// He-normal conv weights, zero conv biases, unit-norm random prototypes. The
/// prototype head weight starts at +1 for same-class connections and -0.5
/// otherwise, with the bias chosen so logits are 0 when every activation is
/// 0.5; the linear head is Xavier-uniform with a zero bias.
ParameterSet init_params(const ModelSchema& schema, std::uint64_t seed);

/// Binds every parameter tensor under its layer name.
void bind_parameters(diff::Bindings& bindings, const ParameterSet& params);

// ---------------------------------------------------------------- graph assembly

struct ParameterNodes {
  std::vector<std::pair<diff::NodeId, diff::NodeId>> conv;  // (weight, bias)
  diff::NodeId head_weight;
  diff::NodeId head_bias;
  diff::NodeId prototypes;  // valid for prototype heads only
};

struct HeadNodes {
  diff::NodeId logits;
  diff::NodeId scores;
  diff::NodeId activations;  // prototype heads only
};

ParameterNodes declare_parameters(diff::GraphBuilder& b, const ModelSchema& schema);
diff::NodeId append_extractor(diff::GraphBuilder& b, const ModelSchema& schema, const ParameterNodes& p,
                              diff::NodeId x);
HeadNodes append_head(diff::GraphBuilder& b, const ModelSchema& schema, const ParameterNodes& p, diff::NodeId z);

// ---------------------------------------------------------------- evaluation

struct Prediction {
  Tensor logits;  // [K]
  Tensor scores;  // [K], sigmoid(logits)
};

struct PrototypePrediction {
  Prediction prediction;
  Tensor activations;  // [K*P], each in [0, 1]
};

/// Forward evaluation with graphs built once per schema. Immutable after
/// construction; safe to share across threads.
class Model {
 public:
  explicit Model(ModelSchema schema);

  const ModelSchema& schema() const noexcept { return schema_; }

  Tensor embed(const ParameterSet& params, const Tensor& x) const;
  Prediction classify_linear(const ParameterSet& params, const Tensor& z) const;
  PrototypePrediction classify_prototype(const ParameterSet& params, const Tensor& z) const;
  /// End-to-end forward through extractor and head.
  Prediction predict(const ParameterSet& params, const Tensor& x) const;
  /// Embedding map and prediction from one end-to-end pass.
  std::pair<Tensor, Prediction> embed_and_predict(const ParameterSet& params, const Tensor& x) const;

  /// Graph with input "x" and outputs "z", "logits", "scores" (+ "activations").
  const diff::Graph& full_graph() const noexcept { return full_; }

 private:
  void check_params(const ParameterSet& params) const;
  ModelSchema schema_;
  diff::Graph extractor_;
  diff::Graph head_;
  diff::Graph full_;
};

// ---------------------------------------------------------------- checkpoints

/// Binary checkpoint; the layout is described in docs/formats.md.
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

std::string schema_to_json(const ModelSchema& schema);
ModelSchema schema_from_json(std::string_view text);

}  // namespace advlab::models
