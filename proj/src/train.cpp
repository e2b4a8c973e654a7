#include "cogdist/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cogdist/rng.hpp"

namespace cogdist::nn {

namespace {

std::string schedule_name(LrSchedule s) {
  switch (s) {
    case LrSchedule::constant: return "constant";
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::step: return "step";
  }
  return "?";
}

LrSchedule schedule_from_name(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "step") return LrSchedule::step;
  throw ConfigError("train.schedule", "unknown schedule '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("train.lr", "must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum", "must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay", "must be >= 0");
}

double TrainConfig::lr_at(int epoch) const {
  switch (schedule) {
    case LrSchedule::constant: return lr;
    case LrSchedule::cosine:
      return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(epochs)));
    case LrSchedule::step: return lr * std::pow(step_gamma, epoch / std::max(1, step_size));
  }
  return lr;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},         {"lr", lr},
          {"momentum", momentum},     {"weight_decay", weight_decay},
          {"schedule", schedule_name(schedule)},
          {"step_size", step_size},   {"step_gamma", step_gamma},
          {"batch_size", batch_size}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("schedule")) c.schedule = schedule_from_name(j.at("schedule").get<std::string>());
  c.step_size = j.value("step_size", c.step_size);
  c.step_gamma = j.value("step_gamma", c.step_gamma);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::vector<double> cross_entropy(const Batch& logits, std::span<const int> labels,
                                  Batch* d_logits, double grad_scale) {
  const std::size_t n = logits.shape().n;
  const std::size_t k = logits.shape().per_item();
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  const Batch p = softmax(logits);
  std::vector<double> losses(n);
  if (d_logits != nullptr) *d_logits = Batch(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= k) throw InvalidArgument("cross_entropy: label out of range");
    const double* z = logits.data() + i * k;
    const double mx = *std::max_element(z, z + k);
    double lse = 0.0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[j] - mx);
    losses[i] = std::log(lse) + mx - z[y];
    if (d_logits != nullptr) {
      for (std::size_t j = 0; j < k; ++j) {
        (*d_logits)[i * k + j] = grad_scale * (p[i * k + j] - (j == y ? 1.0 : 0.0));
      }
    }
  }
  return losses;
}

void sgd_step(Model& model, std::span<const double> grad, std::vector<double>& velocity,
              double lr, double momentum, double weight_decay, double direction) {
  auto params = model.parameters();
  if (velocity.size() != params.size()) velocity.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = direction * grad[i] + weight_decay * params[i];
    velocity[i] = momentum * velocity[i] + g;
    params[i] -= lr * velocity[i];
  }
}

namespace {

// Per-batch loss callback: fills per-sample losses and the logits gradient
// already scaled for a batch-mean objective.
using BatchLoss = std::function<std::vector<double>(const Batch& logits,
                                                    std::span<const std::size_t> idx,
                                                    Batch& d_logits)>;

TrainResult train_loop(Model model, const ImageSet& data, const TrainConfig& config,
                       const BatchLoss& loss_fn) {
  config.validate();
  const std::size_t n = data.size();
  if (n == 0) throw InvalidArgument("train: empty dataset");
  TrainResult result;
  result.history.epochs = static_cast<std::size_t>(config.epochs);
  result.history.samples = n;
  result.history.losses.assign(result.history.epochs * n, 0.0);

  std::vector<double> velocity(model.num_parameters(), 0.0);
  std::vector<double> grad(model.num_parameters());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    const double lr = config.lr_at(epoch);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto trace = model.forward(gather_batch(data.images, idx));
      Batch d_logits;
      const auto losses = loss_fn(model.logits(trace), idx, d_logits);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        if (!std::isfinite(losses[k])) {
          throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                ": non-finite loss on sample " + std::to_string(idx[k]) +
                                " (lr " + std::to_string(lr) + ")");
        }
        result.history.losses[static_cast<std::size_t>(epoch) * n + idx[k]] = losses[k];
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      model.backward(trace, &d_logits, nullptr, grad);
      sgd_step(model, grad, velocity, lr, config.momentum, config.weight_decay);
    }
  }
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train_classifier(Model model, const ImageSet& data, const TrainConfig& config) {
  if (data.num_classes != model.num_classes()) {
    throw ShapeError("train_classifier: dataset has " + std::to_string(data.num_classes) +
                     " classes, model has " + std::to_string(model.num_classes()));
  }
  return train_loop(std::move(model), data, config,
                    [&](const Batch& logits, std::span<const std::size_t> idx, Batch& d_logits) {
                      std::vector<int> labels(idx.size());
                      for (std::size_t k = 0; k < idx.size(); ++k) labels[k] = data.labels[idx[k]];
                      return cross_entropy(logits, labels, &d_logits,
                                           1.0 / static_cast<double>(idx.size()));
                    });
}

TrainResult train_multilabel(Model model, const ImageSet& data, const AttributeTable& targets,
                             const TrainConfig& config) {
  targets.validate(data.size());
  const std::size_t a = targets.num_attributes();
  if (static_cast<std::size_t>(model.num_classes()) != a) {
    throw ShapeError("train_multilabel: model outputs " + std::to_string(model.num_classes()) +
                     " values for " + std::to_string(a) + " attributes");
  }
  return train_loop(std::move(model), data, config,
                    [&](const Batch& logits, std::span<const std::size_t> idx, Batch& d_logits) {
                      const double scale = 1.0 / static_cast<double>(idx.size() * a);
                      d_logits = Batch(logits.shape());
                      std::vector<double> losses(idx.size(), 0.0);
                      for (std::size_t k = 0; k < idx.size(); ++k) {
                        for (std::size_t j = 0; j < a; ++j) {
                          const double z = logits[k * a + j];
                          const double y = targets.get(idx[k], j) ? 1.0 : 0.0;
                          // log(1 + e^z) - y z, computed stably
                          const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
                          losses[k] += (softplus - y * z) / static_cast<double>(a);
                          const double sig = 1.0 / (1.0 + std::exp(-z));
                          d_logits[k * a + j] = scale * (sig - y);
                        }
                      }
                      return losses;
                    });
}

std::vector<int> predict(const Model& model, const ImageSet& data) {
  const Batch logits = forward_logits(model, to_batch(data.images));
  const std::size_t k = logits.shape().per_item();
  std::vector<int> out(data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* z = logits.data() + i * k;
    out[i] = static_cast<int>(std::max_element(z, z + k) - z);
  }
  return out;
}

double evaluate_accuracy(const Model& model, const ImageSet& data) {
  if (data.size() == 0) throw InvalidArgument("evaluate_accuracy: empty evaluation set");
  const auto pred = predict(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double evaluate_asr(const Model& model, const ImageSet& triggered, int target_label) {
  if (triggered.size() == 0) throw InvalidArgument("evaluate_asr: empty evaluation set");
  for (std::size_t i = 0; i < triggered.size(); ++i) {
    if (triggered.labels[i] == target_label) {
      throw InvalidArgument("evaluate_asr: sample " + std::to_string(i) +
                            " already belongs to the target class");
    }
  }
  const auto pred = predict(model, triggered);
  std::size_t hits = 0;
  for (int p : pred) hits += p == target_label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace cogdist::nn
