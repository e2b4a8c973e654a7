#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cogdist/data.hpp"
#include "cogdist/model.hpp"

namespace cogdist::distill {

enum class OutputLayer { logits, features };
enum class NoiseMode {
  per_step_uniform,  // unkept pixels replaced by a fresh Uniform[0,1]^c colour each step
  zero_fill,         // unkept pixels replaced by 0
};

std::string to_string(OutputLayer l);
std::string to_string(NoiseMode m);

/// Hyperparameters of the mask optimization.
struct CDConfig {
  double alpha = 0.01;  // L1 weight on the mask
  double beta = 10.0;   // total-variation weight
  int steps = 100;
  double lr = 0.1;
  double adam_beta1 = 0.1;
  double adam_beta2 = 0.1;
  double adam_eps = 1e-8;
  OutputLayer layer = OutputLayer::logits;
  NoiseMode noise_mode = NoiseMode::per_step_uniform;
  /// Raw (pre-tanh) initial mask parameter; 0 starts every pixel at 0.5.
  double init_raw = 0.0;
  /// Restrict the output distance to outputs [first, first + count); count 0 = all.
  std::size_t output_first = 0;
  std::size_t output_count = 0;
  /// Images optimized together. Purely a throughput knob: images never interact.
  std::size_t batch_size = 64;

  /// Defaults for a head: alpha 0.01 on logits, 0.001 on features.
  static CDConfig for_layer(OutputLayer layer);
  void validate() const;
  nlohmann::json to_json() const;
  static CDConfig from_json(const nlohmann::json& j);
};

/// Anisotropic total variation: sum |m(i+1,j) - m(i,j)| + sum |m(i,j+1) - m(i,j)|.
double tv_loss(std::span<const double> mask, std::size_t height, std::size_t width);
/// A subgradient of tv_loss (sign(0) = 0) added into `grad`, scaled by `weight`.
void tv_subgradient(std::span<const double> mask, std::size_t height, std::size_t width,
                    double weight, std::span<double> grad);

/// (tanh(w) + 1) / 2.
double mask_reparam(double w_raw);
std::vector<double> mask_reparam(std::span<const double> w_raw);

/// Adam with bias correction. One state per optimized tensor.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};
void adam_update(std::span<double> params, std::span<const double> grad, AdamState& state,
                 double lr, double beta1, double beta2, double eps);

struct ObjectiveTerms {
  double fidelity = 0.0;  // || f(x) - f(x_cp) ||_1
  double l1 = 0.0;        // alpha * || m ||_1
  double tv = 0.0;        // beta * TV(m)
  double total() const { return fidelity + l1 + tv; }
};

/// The three-term objective for one image `x` (c,h,w), raw mask `w_raw` (h,w)
/// and fill colour `delta` (c). `delta` is ignored under NoiseMode::zero_fill.
/// When `grad_w_raw` is given it receives d objective / d w_raw.
ObjectiveTerms cd_objective(const nn::Model& model, std::span<const float> x,
                            std::span<const double> w_raw, std::span<const double> delta,
                            const CDConfig& config, std::vector<double>* grad_w_raw = nullptr);

struct MaskResult {
  Mask mask;                         // (h, w) in [0,1]
  std::vector<float> pattern;        // cognitive pattern (c, h, w)
  double score = 0.0;                // || m ||_1, or NaN when failed
  std::vector<double> trace;         // objective at each step, before the update
  bool failed = false;
  std::string diagnostic;
};

/// Optimizes one mask per image. Image i draws its fill colours from
/// derive_seed(seed, i), so results do not depend on batching or `threads`.
std::vector<MaskResult> distill_mask(const nn::Model& model, const FloatTensor& images,
                                     const CDConfig& config, std::uint64_t seed,
                                     std::size_t threads = 1);

/// Keeps the backdoor pixels where mask >= threshold and the clean pixels elsewhere.
std::vector<float> simplify_trigger(const Mask& mask, std::span<const float> x_bd,
                                    std::span<const float> x_clean, Shape image_shape,
                                    double bin_threshold = 0.05);

/// Fraction of mask entries >= threshold.
double mask_area(const Mask& mask, double bin_threshold = 0.05);

}  // namespace cogdist::distill
