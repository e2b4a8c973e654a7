#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "cogdist/tensor.hpp"

namespace cogdist::nn {

enum class LayerKind { conv3x3, relu, maxpool2, global_avg_pool, linear };

std::string to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

/// One layer of a sequential network. `out` is the output channel count for
/// conv3x3 (stride 1, zero padding 1) and the output width for linear.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out = 0;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Architecture descriptor. The deep-feature head is the flattened output of
/// layer `feature_layer`; the logits head is the output of the last layer.
struct Architecture {
  std::string name;
  Shape input;  // n is ignored
  std::vector<LayerSpec> layers;
  std::size_t feature_layer = 0;
  int num_classes = 0;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Three conv blocks and a two-layer head:
///   conv3x3(c1) relu maxpool2, conv3x3(c2) relu maxpool2, conv3x3(c3) relu,
///   linear(c4) relu, linear(K)
/// with (c1, c2, c3, c4) = round((8, 16, 32, 64) * width_multiplier), each at least 1.
/// Features are the flattened last ReLU output: dim = c3 * floor(h/4) * floor(w/4).
Architecture reference_cnn(Shape input, int num_classes, double width_multiplier = 1.0);

/// Activations recorded by a forward pass, consumed by Model::backward.
struct ForwardTrace {
  std::vector<Batch> acts;  // acts[0] = input, acts[k + 1] = output of layer k
};

/// Differentiable sequential classifier with a flat parameter vector.
/// All const methods are pure and safe to call concurrently.
class Model {
 public:
  Model() = default;
  /// He-normal weights, zero biases, drawn from `seed`.
  Model(Architecture arch, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  int num_classes() const { return arch_.num_classes; }
  Shape input_shape() const { return arch_.input; }
  std::size_t feature_dim() const;
  std::size_t num_parameters() const { return params_.size(); }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }

  ForwardTrace forward(Batch x) const;
  const Batch& logits(const ForwardTrace& t) const { return t.acts.back(); }
  const Batch& features(const ForwardTrace& t) const { return t.acts[arch_.feature_layer + 1]; }

  /// Back-propagates output gradients (either may be null). Returns the input
  /// gradient; parameter gradients are accumulated into `d_params` when non-empty.
  Batch backward(const ForwardTrace& trace, const Batch* d_logits, const Batch* d_features,
                 std::span<double> d_params = {}) const;

  void save(const std::filesystem::path& blob) const;
  static Model load(const std::filesystem::path& blob);

  friend bool operator==(const Model&, const Model&) = default;

 private:
  void check_input(const Batch& x) const;

  Architecture arch_;
  std::vector<Shape> shapes_;         // per-item shape after each layer (shapes_[0] = input)
  std::vector<std::size_t> offsets_;  // parameter offset of each layer
  std::vector<double> params_;

  void layout();
};

Model build_reference_cnn(Shape input, int num_classes, double width_multiplier,
                          std::uint64_t seed);

/// Logits (n, K) and flattened features (n, F) computed in chunks.
Batch forward_logits(const Model& model, const Batch& images);
Batch forward_features(const Model& model, const Batch& images);

/// Row-wise softmax of an (n, K) batch.
Batch softmax(const Batch& logits);

/// Value and output gradients of a scalar objective J(logits, features).
/// A gradient left empty is treated as zero.
struct ObjectiveValue {
  double value = 0.0;
  Batch d_logits;
  Batch d_features;
};
using Objective = std::function<ObjectiveValue(const Batch& logits, const Batch& features)>;

/// dJ/dx for a scalar objective of the model outputs.
Batch input_gradient(const Model& model, const Batch& images, const Objective& objective);

}  // namespace cogdist::nn
