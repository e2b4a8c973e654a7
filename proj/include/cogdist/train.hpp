#pragma once

#include <cstdint>
#include <json.hpp>
#include <span>
#include <vector>

#include "cogdist/data.hpp"
#include "cogdist/model.hpp"

namespace cogdist::nn {

enum class LrSchedule { constant, cosine, step };

/// SGD with momentum. Defaults follow the usual CIFAR recipe (weight decay
/// 5e-4, momentum 0.9); epochs and learning rate are sized for small runs.
struct TrainConfig {
  int epochs = 20;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule schedule = LrSchedule::cosine;
  int step_size = 10;       // for LrSchedule::step
  double step_gamma = 0.1;  // for LrSchedule::step
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(int epoch) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Per-epoch, per-sample training loss, recorded as each sample's batch is visited.
struct LossHistory {
  std::size_t epochs = 0;
  std::size_t samples = 0;
  std::vector<double> losses;  // row-major (epochs, samples)

  double at(std::size_t epoch, std::size_t sample) const { return losses[epoch * samples + sample]; }
};

struct TrainResult {
  Model model;
  LossHistory history;
};

/// Mini-batch training on softmax cross-entropy. Single-threaded and
/// bit-deterministic for a fixed config. Throws DivergenceError on non-finite loss.
TrainResult train_classifier(Model model, const ImageSet& data, const TrainConfig& config);

/// Mini-batch training with one sigmoid/BCE output per attribute.
TrainResult train_multilabel(Model model, const ImageSet& data, const AttributeTable& targets,
                             const TrainConfig& config);

/// Per-sample softmax cross-entropy and its logits gradient (scaled by `grad_scale`).
std::vector<double> cross_entropy(const Batch& logits, std::span<const int> labels,
                                  Batch* d_logits = nullptr, double grad_scale = 1.0);

/// One momentum-SGD step with decoupled-from-loss L2 weight decay.
/// `direction` = +1 descends the loss, -1 ascends it.
void sgd_step(Model& model, std::span<const double> grad, std::vector<double>& velocity,
              double lr, double momentum, double weight_decay, double direction = 1.0);

std::vector<int> predict(const Model& model, const ImageSet& data);
double evaluate_accuracy(const Model& model, const ImageSet& data);
/// Fraction of triggered non-target images classified as `target_label`.
double evaluate_asr(const Model& model, const ImageSet& triggered, int target_label);

}  // namespace cogdist::nn
