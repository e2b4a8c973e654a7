#pragma once

#include <cstdint>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "cogdist/data.hpp"
#include "cogdist/model.hpp"
#include "cogdist/score_table.hpp"

namespace cogdist::mitigate {

/// Suspected-backdoor and trusted-clean index sets; disjoint.
struct Partition {
  std::vector<std::size_t> suspect;  // most backdoor-like first
  std::vector<std::size_t> trusted;
};

/// suspect = floor(p_b n) most backdoor-like rows, trusted = floor(p_c n) least
/// backdoor-like. Ties are broken by ascending index.
Partition partition_by_score(const ImageSet& data, const ScoreTable& scores, double p_b, double p_c);

/// Uniformly random partition of the same sizes, for control experiments.
Partition random_partition(std::size_t n, double p_b, double p_c, std::uint64_t seed);

struct PartitionQuality {
  double trr = 0.0;     // backdoor share of the suspect set
  double far = 0.0;     // backdoor share of the trusted set
  double recall = 0.0;  // share of all backdoor samples that landed in the trusted set
};
PartitionQuality partition_quality(const ImageSet& data, const Partition& part);

/// What the ascent pass pushes on. `ce` ascends cross-entropy as written;
/// `complement` descends -log(1 - p_y), which moves p_y the same way but keeps
/// a usable gradient when the model is saturated on the suspect samples.
enum class AscentLoss { ce, complement };
std::string to_string(AscentLoss a);
AscentLoss ascent_loss_from_string(const std::string& s);

/// Per-sample -log(1 - p_y) and its logits gradient (scaled by `grad_scale`).
std::vector<double> complement_loss(const Batch& logits, std::span<const int> labels,
                                    Batch* d_logits = nullptr, double grad_scale = 1.0);

struct UnlearnConfig {
  int epochs = 5;
  double lr = 5e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  /// An ascent step is skipped for a batch whose mean loss exceeds ceiling * ln K.
  double ascent_ceiling = 4.0;
  AscentLoss ascent_loss = AscentLoss::ce;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static UnlearnConfig from_json(const nlohmann::json& j);
};

/// Each epoch: one descent pass over the trusted set, then one ascent pass
/// over the suspect set. Throws DivergenceError on non-finite loss.
nn::Model unlearn_finetune(nn::Model model, const ImageSet& data, const Partition& part,
                           const UnlearnConfig& config);

struct MitigationReport {
  double clean_accuracy_before = 0.0;
  double clean_accuracy_after = 0.0;
  double asr_before = 0.0;
  double asr_after = 0.0;
  PartitionQuality quality;
  std::size_t suspect_size = 0;
  std::size_t trusted_size = 0;

  nlohmann::json to_json() const;
};

}  // namespace cogdist::mitigate
