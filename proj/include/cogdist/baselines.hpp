#pragma once

#include <cstdint>
#include <map>

#include "cogdist/data.hpp"
#include "cogdist/model.hpp"
#include "cogdist/score_table.hpp"
#include "cogdist/train.hpp"

namespace cogdist::baselines {

/// Anti-backdoor-learning isolation: mean training loss over the first
/// `n_epochs` epochs (all epochs if fewer were recorded). Low = suspicious.
ScoreTable abl_scores(const nn::LossHistory& history, const ImageSet& data, std::size_t n_epochs = 20);

/// STRIP: mean softmax entropy over `n_overlays` superimpositions
/// 0.5 * (x + x_pool). Low = suspicious.
ScoreTable strip_scores(const nn::Model& model, const ImageSet& data, const FloatTensor& overlay_pool,
                        std::size_t n_overlays = 64, std::uint64_t seed = 0);

/// Spectral signatures: per class, squared projection of the centred
/// features on the top right singular vector. High = suspicious.
ScoreTable ss_scores(const Batch& features, const ImageSet& data);

struct ACResult {
  ScoreTable table;
  std::map<int, double> class_silhouette;  // mean silhouette per class
};

/// Activation clustering: per class, PCA to `reduced_dim`, 2-means, per-sample
/// silhouette. Members of the smaller cluster score +silhouette, members of the
/// larger cluster -silhouette. High = suspicious.
ACResult ac_scores(const Batch& features, const ImageSet& data, std::size_t reduced_dim = 10,
                   std::uint64_t seed = 0);

/// Per-sample silhouette of a two-cluster assignment of the rows of `points`.
std::vector<double> silhouette(const std::vector<std::vector<double>>& points,
                               const std::vector<int>& assignment);

}  // namespace cogdist::baselines
