#include "cogdist/mitigate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cogdist/rng.hpp"
#include "cogdist/train.hpp"

namespace cogdist::mitigate {

namespace {

void check_fractions(std::size_t n, double p_b, double p_c) {
  if (!(p_b >= 0.0 && p_c >= 0.0) || p_b + p_c > 1.0 + 1e-12) {
    throw InvalidArgument("partition: need p_b, p_c >= 0 and p_b + p_c <= 1");
  }
  if (std::floor(p_b * static_cast<double>(n) + 1e-9) < 1.0) {
    throw InvalidArgument("partition: p_b * n < 1 selects no suspect sample");
  }
}

std::size_t take(double p, std::size_t n) {
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 1e-9));
}

}  // namespace

Partition partition_by_score(const ImageSet& data, const ScoreTable& scores, double p_b, double p_c) {
  const std::size_t n = scores.size();
  if (n != data.size()) throw ShapeError("partition_by_score: score table does not match dataset");
  check_fractions(n, p_b, p_c);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = scores.suspicion(a), sb = scores.suspicion(b);
    if (sa != sb) return sa > sb;
    return scores.rows[a].index < scores.rows[b].index;
  });
  Partition part;
  const std::size_t nb = take(p_b, n), nc = take(p_c, n);
  for (std::size_t k = 0; k < nb; ++k) part.suspect.push_back(scores.rows[order[k]].index);
  for (std::size_t k = n - nc; k < n; ++k) part.trusted.push_back(scores.rows[order[k]].index);
  return part;
}

Partition random_partition(std::size_t n, double p_b, double p_c, std::uint64_t seed) {
  check_fractions(n, p_b, p_c);
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const std::size_t nb = take(p_b, n), nc = take(p_c, n);
  Partition part;
  part.suspect.assign(order.begin(), order.begin() + static_cast<long>(nb));
  part.trusted.assign(order.end() - static_cast<long>(nc), order.end());
  return part;
}

PartitionQuality partition_quality(const ImageSet& data, const Partition& part) {
  auto backdoors = [&](const std::vector<std::size_t>& idx) {
    return static_cast<double>(std::count_if(idx.begin(), idx.end(), [&](std::size_t i) { return data.is_backdoor[i]; }));
  };
  PartitionQuality q;
  const double total = static_cast<double>(data.count_backdoor());
  if (!part.suspect.empty()) q.trr = backdoors(part.suspect) / static_cast<double>(part.suspect.size());
  if (!part.trusted.empty()) q.far = backdoors(part.trusted) / static_cast<double>(part.trusted.size());
  if (total > 0.0) q.recall = backdoors(part.trusted) / total;
  return q;
}

std::vector<double> complement_loss(const Batch& logits, std::span<const int> labels, Batch* d_logits,
                                    double grad_scale) {
  const std::size_t n = logits.shape().n;
  const std::size_t k = logits.shape().per_item();
  if (labels.size() != n) throw ShapeError("complement_loss: label count mismatch");
  if (k < 2) throw InvalidArgument("complement_loss: needs at least two classes");
  std::vector<double> losses(n);
  if (d_logits != nullptr) *d_logits = Batch(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= k) throw InvalidArgument("complement_loss: label out of range");
    const double* z = logits.data() + i * k;
    const double mx = *std::max_element(z, z + k);
    double all = 0.0, rest = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(z[j] - mx);
      all += e;
      if (j != y) rest += e;
    }
    // 1 - p_y = rest / all, computed without cancellation
    losses[i] = std::log(all) - std::log(rest);
    if (d_logits != nullptr) {
      const double py = std::exp(z[y] - mx) / all;
      for (std::size_t j = 0; j < k; ++j) {
        const double g = j == y ? py : -py * std::exp(z[j] - mx) / rest;
        (*d_logits)[i * k + j] = grad_scale * g;
      }
    }
  }
  return losses;
}

std::string to_string(AscentLoss a) { return a == AscentLoss::ce ? "ce" : "complement"; }

AscentLoss ascent_loss_from_string(const std::string& s) {
  if (s == "ce") return AscentLoss::ce;
  if (s == "complement") return AscentLoss::complement;
  throw ConfigError("mitigation.ascent_loss", "unknown value '" + s + "' (expected ce|complement)");
}

void UnlearnConfig::validate() const {
  if (epochs < 0) throw ConfigError("mitigation.epochs", "must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("mitigation.lr", "must be >= 0");
  if (batch_size < 1) throw ConfigError("mitigation.batch_size", "must be >= 1");
  if (!(ascent_ceiling > 0.0)) throw ConfigError("mitigation.ascent_ceiling", "must be > 0");
}

nlohmann::json UnlearnConfig::to_json() const {
  return {{"epochs", epochs},         {"lr", lr},
          {"momentum", momentum},     {"weight_decay", weight_decay},
          {"batch_size", batch_size}, {"ascent_ceiling", ascent_ceiling},
          {"ascent_loss", to_string(ascent_loss)}, {"seed", seed}};
}

UnlearnConfig UnlearnConfig::from_json(const nlohmann::json& j) {
  UnlearnConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.ascent_ceiling = j.value("ascent_ceiling", c.ascent_ceiling);
  if (j.contains("ascent_loss")) c.ascent_loss = ascent_loss_from_string(j.at("ascent_loss").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

nn::Model unlearn_finetune(nn::Model model, const ImageSet& data, const Partition& part,
                           const UnlearnConfig& config) {
  config.validate();
  {
    std::vector<std::size_t> a = part.suspect, b = part.trusted;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    if (!both.empty()) throw InvalidArgument("unlearn_finetune: partitions overlap");
  }
  const double ceiling = config.ascent_ceiling * std::log(static_cast<double>(model.num_classes()));
  std::vector<double> velocity(model.num_parameters(), 0.0);
  std::vector<double> grad(model.num_parameters());

  // One pass over `indices`; direction +1 descends, -1 ascends.
  auto pass = [&](std::vector<std::size_t> indices, double direction, std::uint64_t stream) {
    Rng rng(derive_seed(config.seed, stream));
    rng.shuffle(indices);
    for (std::size_t start = 0; start < indices.size(); start += config.batch_size) {
      const std::size_t end = std::min(indices.size(), start + config.batch_size);
      std::span<const std::size_t> idx(indices.data() + start, end - start);
      const auto trace = model.forward(gather_batch(data.images, idx));
      std::vector<int> labels(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) labels[k] = data.labels[idx[k]];
      Batch d_logits;
      const auto losses = nn::cross_entropy(model.logits(trace), labels, &d_logits,
                                            1.0 / static_cast<double>(idx.size()));
      const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(idx.size());
      if (!std::isfinite(mean)) throw DivergenceError("unlearn_finetune: non-finite loss");
      if (direction < 0.0 && mean > ceiling) continue;
      double step_dir = direction;
      if (direction < 0.0 && config.ascent_loss == AscentLoss::complement) {
        // descend -log(1 - p_y) instead; same direction in p_y, no vanishing gradient
        complement_loss(model.logits(trace), labels, &d_logits, 1.0 / static_cast<double>(idx.size()));
        step_dir = 1.0;
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      model.backward(trace, &d_logits, nullptr, grad);
      nn::sgd_step(model, grad, velocity, config.lr, config.momentum, config.weight_decay, step_dir);
    }
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    pass(part.trusted, 1.0, 2 * static_cast<std::uint64_t>(epoch));
    pass(part.suspect, -1.0, 2 * static_cast<std::uint64_t>(epoch) + 1);
  }
  for (double p : model.parameters()) {
    if (!std::isfinite(p)) throw DivergenceError("unlearn_finetune: parameters became non-finite");
  }
  return model;
}

nlohmann::json MitigationReport::to_json() const {
  return {{"clean_accuracy_before", clean_accuracy_before},
          {"clean_accuracy_after", clean_accuracy_after},
          {"asr_before", asr_before},
          {"asr_after", asr_after},
          {"trr", quality.trr},
          {"far", quality.far},
          {"recall", quality.recall},
          {"suspect_size", suspect_size},
          {"trusted_size", trusted_size}};
}

}  // namespace cogdist::mitigate
