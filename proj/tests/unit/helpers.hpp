#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cogdist/data.hpp"
#include "cogdist/model.hpp"
#include "cogdist/rng.hpp"
#include "cogdist/score_table.hpp"

namespace testutil {

// Small conv net used wherever a real model is needed but training is not.
inline cogdist::nn::Model tiny_cnn(std::size_t c = 1, std::size_t h = 6, std::size_t w = 6, int k = 3,
                                   std::uint64_t seed = 1) {
  using cogdist::nn::LayerKind;
  cogdist::nn::Architecture a;
  a.name = "tiny";
  a.input = {1, c, h, w};
  a.layers = {{LayerKind::conv3x3, 3}, {LayerKind::relu, 0}, {LayerKind::maxpool2, 0},
              {LayerKind::linear, 5},  {LayerKind::relu, 0}, {LayerKind::linear, static_cast<std::size_t>(k)}};
  a.feature_layer = 4;
  a.num_classes = k;
  return cogdist::nn::Model(a, seed);
}

// A single linear layer with zero weights: the logits are the bias.
inline cogdist::nn::Model constant_model(std::vector<double> bias, std::size_t c = 1, std::size_t h = 4,
                                         std::size_t w = 4) {
  using cogdist::nn::LayerKind;
  cogdist::nn::Architecture a;
  a.name = "const";
  a.input = {1, c, h, w};
  a.layers = {{LayerKind::linear, bias.size()}};
  a.feature_layer = 0;
  a.num_classes = static_cast<int>(bias.size());
  cogdist::nn::Model m(a, 0);
  auto p = m.parameters();
  std::fill(p.begin(), p.end(), 0.0);
  std::copy(bias.begin(), bias.end(), p.end() - static_cast<long>(bias.size()));
  return m;
}

inline cogdist::ImageSet random_images(std::size_t n, std::size_t c, std::size_t h, std::size_t w, int k,
                                       std::uint64_t seed) {
  cogdist::Rng rng(seed);
  cogdist::ImageSet s;
  s.images = cogdist::FloatTensor({n, c, h, w});
  for (auto& v : s.images.vec()) v = static_cast<float>(rng.uniform());
  s.num_classes = k;
  for (std::size_t i = 0; i < n; ++i) s.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(k)));
  s.is_backdoor.assign(n, false);
  return s;
}

inline cogdist::ScoreTable table(const std::vector<double>& scores, const std::vector<bool>& bd,
                                 cogdist::Orientation o = cogdist::Orientation::low_is_backdoor) {
  cogdist::ScoreTable t;
  t.orientation = o;
  for (std::size_t i = 0; i < scores.size(); ++i) t.rows.push_back({i, scores[i], bd[i], 0});
  return t;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("cogdist_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace testutil
