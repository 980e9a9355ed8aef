// SPDX-License-Identifier: Apache-2.0
#include "advlab/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "advlab/errors.hpp"
#include "advlab/random.hpp"
#include "json.hpp"

namespace advlab::models {

using diff::GraphBuilder;
using diff::NodeId;
using diff::ZeroNormPolicy;

std::string_view head_name(HeadKind kind) { return kind == HeadKind::kLinear ? "linear" : "prototype"; }

HeadKind parse_head(std::string_view name) {
  if (name == "linear") return HeadKind::kLinear;
  if (name == "prototype") return HeadKind::kPrototype;
  throw ConfigError("unknown head kind '" + std::string(name) + "' (expected linear or prototype)");
}

// ---------------------------------------------------------------- schema

ModelSchema ModelSchema::desk_default(HeadKind head) {
  ModelSchema s;
  s.head = head;
  return s;
}

Shape ModelSchema::embedding_shape() const {
  std::size_t h = input_shape.at(0), w = input_shape.at(1), c = input_shape.at(2);
  for (const auto& layer : conv) {
    if (h + 2 * layer.padding < layer.kernel || w + 2 * layer.padding < layer.kernel) {
      throw ContractError("conv stack shrinks the map below the kernel size");
    }
    h = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
    w = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
    c = layer.out_channels;
  }
  return {h, w, c};
}

void ModelSchema::validate() const {
  if (input_shape.size() != 3) throw ContractError("input_shape must be (H, W, C)");
  for (std::size_t d : input_shape)
    if (d == 0) throw ContractError("input dimensions must be >= 1");
  if (num_classes == 0) throw ContractError("num_classes must be >= 1");
  if (conv.empty()) throw ContractError("at least one conv layer is required");
  for (const auto& layer : conv) {
    if (layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0) {
      throw ContractError("conv layers need positive channels, kernel and stride");
    }
  }
  const Shape z = embedding_shape();
  if (z[0] > input_shape[0] || z[1] > input_shape[1]) throw ContractError("embedding map larger than the input");
  if (head == HeadKind::kPrototype && prototypes_per_class == 0) {
    throw ContractError("prototype head needs prototypes_per_class >= 1");
  }
}

// ---------------------------------------------------------------- parameters

ParameterSet::ParameterSet(ModelSchema schema) : schema_(std::move(schema)) {}

const Tensor& ParameterSet::at(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return tensors_[i];
  throw LookupError("no parameter layer named '" + std::string(name) + "'");
}

Tensor& ParameterSet::at(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(name));
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto& n : names_)
    if (n == name) return true;
  return false;
}

void ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter layer '" + name + "'");
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

void ParameterSet::validate() const {
  const auto layout = parameter_layout(schema_);
  if (layout.size() != names_.size()) throw ContractError("parameter set does not match its schema");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].first != names_[i] || layout[i].second != tensors_[i].shape()) {
      throw ContractError("layer '" + names_[i] + "' " + to_string(tensors_[i].shape()) + " does not match '" +
                          layout[i].first + "' " + to_string(layout[i].second));
    }
    if (!tensors_[i].all_finite()) throw NumericError("layer '" + names_[i] + "' has non-finite values");
  }
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b) {
  if (a.names() != b.names() || !(a.schema() == b.schema())) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!advlab::bitwise_equal(a.at(i), b.at(i))) return false;
  return true;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSchema& schema) {
  std::vector<std::pair<std::string, Shape>> out;
  std::size_t c = schema.input_shape.at(2);
  for (std::size_t i = 0; i < schema.conv.size(); ++i) {
    const auto& l = schema.conv[i];
    out.emplace_back("conv" + std::to_string(i) + ".weight", Shape{l.kernel, l.kernel, c, l.out_channels});
    out.emplace_back("conv" + std::to_string(i) + ".bias", Shape{l.out_channels});
    c = l.out_channels;
  }
  const std::size_t k = schema.num_classes;
  if (schema.head == HeadKind::kLinear) {
    out.emplace_back("head.weight", Shape{k, c});
  } else {
    out.emplace_back("prototypes", Shape{schema.num_prototypes(), c});
    out.emplace_back("head.weight", Shape{k, schema.num_prototypes()});
  }
  out.emplace_back("head.bias", Shape{k});
  return out;
}

ParameterSet init_params(const ModelSchema& schema, std::uint64_t seed) {
  schema.validate();
  ParameterSet params(schema);
  std::mt19937_64 rng(derive_seed(seed, {0x1a17}));
  std::normal_distribution<double> normal(0.0, 1.0);

  for (const auto& [name, shape] : parameter_layout(schema)) {
    Tensor t(shape);
    if (name == "head.bias" && schema.head == HeadKind::kPrototype) {
      // Zero logits when every activation sits mid-range. With a zero bias the
      // -0.5 cross-class weights make "switch every prototype off" the fastest
      // way to raise all scores, and the head collapses to a constant.
      const std::size_t per = schema.prototypes_per_class, kp = schema.num_prototypes();
      const double row_sum = static_cast<double>(per) - 0.5 * static_cast<double>(kp - per);
      for (double& v : t.values()) v = -0.5 * row_sum;
    } else if (name.ends_with(".bias")) {
      // zeros
    } else if (name.starts_with("conv")) {
      const double fan_in = static_cast<double>(shape[0] * shape[1] * shape[2]);
      const double std = std::sqrt(2.0 / fan_in);
      for (double& v : t.values()) v = std * normal(rng);
    } else if (name == "prototypes") {
      const std::size_t d = shape[1];
      for (std::size_t j = 0; j < shape[0]; ++j) {
        double norm = 0.0;
        do {
          norm = 0.0;
          for (std::size_t e = 0; e < d; ++e) {
            t[j * d + e] = std::abs(normal(rng));
            norm += t[j * d + e] * t[j * d + e];
          }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (std::size_t e = 0; e < d; ++e) t[j * d + e] /= norm;
      }
    } else if (schema.head == HeadKind::kPrototype) {
      const std::size_t per = schema.prototypes_per_class;
      for (std::size_t k = 0; k < shape[0]; ++k)
        for (std::size_t j = 0; j < shape[1]; ++j) t[k * shape[1] + j] = j / per == k ? 1.0 : -0.5;
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (double& v : t.values()) v = u(rng);
    }
    params.add(name, std::move(t));
  }
  return params;
}

void bind_parameters(diff::Bindings& bindings, const ParameterSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i) bindings.bind(params.names()[i], params.at(i));
}

// ---------------------------------------------------------------- graphs

ParameterNodes declare_parameters(GraphBuilder& b, const ModelSchema& schema) {
  ParameterNodes p;
  for (const auto& [name, shape] : parameter_layout(schema)) {
    NodeId id = b.parameter(name, shape);
    if (name == "head.weight") {
      p.head_weight = id;
    } else if (name == "head.bias") {
      p.head_bias = id;
    } else if (name == "prototypes") {
      p.prototypes = id;
    } else if (name.ends_with(".weight")) {
      p.conv.emplace_back(id, NodeId{});
    } else {
      p.conv.back().second = id;
    }
  }
  return p;
}

NodeId append_extractor(GraphBuilder& b, const ModelSchema& schema, const ParameterNodes& p, NodeId x) {
  NodeId h = x;
  for (std::size_t i = 0; i < schema.conv.size(); ++i) {
    const auto& l = schema.conv[i];
    h = b.conv2d(h, p.conv[i].first, p.conv[i].second, l.stride, l.padding);
    // The last layer stays linear so embeddings can point in any direction.
    if (i + 1 < schema.conv.size()) h = b.relu(h);
  }
  return h;
}

HeadNodes append_head(GraphBuilder& b, const ModelSchema& schema, const ParameterNodes& p, NodeId z) {
  HeadNodes out;
  if (schema.head == HeadKind::kLinear) {
    out.logits = b.affine(b.global_avg_pool(z), p.head_weight, p.head_bias);
  } else {
    NodeId sim = b.relu(b.cosine_bank(z, p.prototypes, ZeroNormPolicy::kZeroSimilarity));
    out.activations = b.spatial_max(sim);
    out.logits = b.affine(out.activations, p.head_weight, p.head_bias);
  }
  out.scores = b.sigmoid(out.logits);
  return out;
}

namespace {

void add_head_outputs(GraphBuilder& b, const ModelSchema& schema, const HeadNodes& h) {
  b.output("logits", h.logits);
  b.output("scores", h.scores);
  if (schema.head == HeadKind::kPrototype) b.output("activations", h.activations);
}

}  // namespace

Model::Model(ModelSchema schema) : schema_(std::move(schema)) {
  schema_.validate();
  {
    GraphBuilder b;
    NodeId x = b.input("x", schema_.input_shape);
    auto p = declare_parameters(b, schema_);
    b.output("z", append_extractor(b, schema_, p, x));
    extractor_ = std::move(b).build();
  }
  {
    GraphBuilder b;
    NodeId z = b.input("z", schema_.embedding_shape());
    auto p = declare_parameters(b, schema_);
    add_head_outputs(b, schema_, append_head(b, schema_, p, z));
    head_ = std::move(b).build();
  }
  {
    GraphBuilder b;
    NodeId x = b.input("x", schema_.input_shape);
    auto p = declare_parameters(b, schema_);
    NodeId z = append_extractor(b, schema_, p, x);
    b.output("z", z);
    add_head_outputs(b, schema_, append_head(b, schema_, p, z));
    full_ = std::move(b).build();
  }
}

void Model::check_params(const ParameterSet& params) const {
  if (!(params.schema() == schema_)) throw ContractError("parameter set was made for a different schema");
}

Tensor Model::embed(const ParameterSet& params, const Tensor& x) const {
  check_params(params);
  if (x.shape() != schema_.input_shape) {
    throw ContractError("input shape " + to_string(x.shape()) + " does not match " + to_string(schema_.input_shape));
  }
  diff::Bindings in;
  bind_parameters(in, params);
  in.bind("x", x);
  return diff::evaluate(extractor_, in).output("z");
}

Prediction Model::classify_linear(const ParameterSet& params, const Tensor& z) const {
  if (schema_.head != HeadKind::kLinear) throw ContractError("classify_linear on a prototype-head model");
  check_params(params);
  if (z.shape() != schema_.embedding_shape()) throw ContractError("embedding map shape mismatch");
  diff::Bindings in;
  bind_parameters(in, params);
  in.bind("z", z);
  auto ev = diff::evaluate(head_, in);
  return {ev.output("logits"), ev.output("scores")};
}

PrototypePrediction Model::classify_prototype(const ParameterSet& params, const Tensor& z) const {
  if (schema_.head != HeadKind::kPrototype) throw ContractError("classify_prototype on a linear-head model");
  check_params(params);
  if (z.shape() != schema_.embedding_shape()) throw ContractError("embedding map shape mismatch");
  diff::Bindings in;
  bind_parameters(in, params);
  in.bind("z", z);
  auto ev = diff::evaluate(head_, in);
  return {{ev.output("logits"), ev.output("scores")}, ev.output("activations")};
}

std::pair<Tensor, Prediction> Model::embed_and_predict(const ParameterSet& params, const Tensor& x) const {
  check_params(params);
  if (x.shape() != schema_.input_shape) throw ContractError("input shape mismatch");
  diff::Bindings in;
  bind_parameters(in, params);
  in.bind("x", x);
  auto ev = diff::evaluate(full_, in);
  return {ev.output("z"), {ev.output("logits"), ev.output("scores")}};
}

Prediction Model::predict(const ParameterSet& params, const Tensor& x) const {
  return embed_and_predict(params, x).second;
}

// ---------------------------------------------------------------- checkpoints

using nlohmann::json;

std::string schema_to_json(const ModelSchema& s) {
  json j;
  j["input_shape"] = s.input_shape;
  j["num_classes"] = s.num_classes;
  j["head"] = std::string(head_name(s.head));
  j["prototypes_per_class"] = s.prototypes_per_class;
  json layers = json::array();
  for (const auto& l : s.conv) {
    layers.push_back({{"out_channels", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride},
                      {"padding", l.padding}});
  }
  j["conv"] = layers;
  return j.dump();
}

ModelSchema schema_from_json(std::string_view text) {
  ModelSchema s;
  try {
    const json j = json::parse(text);
    s.input_shape = j.at("input_shape").get<Shape>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.head = parse_head(j.at("head").get<std::string>());
    s.prototypes_per_class = j.value("prototypes_per_class", std::size_t{3});
    s.conv.clear();
    for (const auto& l : j.at("conv")) {
      s.conv.push_back({l.at("out_channels").get<std::size_t>(), l.value("kernel", std::size_t{3}),
                        l.value("stride", std::size_t{1}), l.value("padding", std::size_t{1})});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model schema: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ConfigError("checkpoint truncated");
  return v;
}

std::string read_string(std::istream& in, std::uint64_t limit) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > limit) throw ConfigError("checkpoint string length out of range");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw ConfigError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  params.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof kMagic);
  write_pod(out, kVersion);
  const std::string header = schema_to_json(params.schema());
  write_pod<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  write_pod<std::uint64_t>(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& t = params.at(i);
    write_pod<std::uint64_t>(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint64_t>(out, t.rank());
    for (std::size_t d : t.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw ConfigError("'" + path.string() + "' is not a checkpoint");
  }
  if (read_pod<std::uint32_t>(in) != kVersion) throw ConfigError("unsupported checkpoint version");
  ParameterSet params(schema_from_json(read_string(in, 1 << 20)));
  const auto layers = read_pod<std::uint64_t>(in);
  for (std::uint64_t l = 0; l < layers; ++l) {
    std::string name = read_string(in, 4096);
    const auto rank = read_pod<std::uint64_t>(in);
    if (rank > 8) throw ConfigError("checkpoint tensor rank out of range");
    Shape shape(rank);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in);
    std::vector<double> data(element_count(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw ConfigError("checkpoint truncated");
    }
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  params.validate();
  return params;
}

}  // namespace advlab::models
