#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "../oracles.hpp"
#include "cogdist/mitigate.hpp"
#include "cogdist/train.hpp"
#include "helpers.hpp"

using namespace cogdist;
using namespace cogdist::mitigate;

namespace {
// scores 0..n-1 with the first `bd` rows (lowest scores) backdoor
std::pair<ImageSet, ScoreTable> ranked(std::size_t n, std::size_t bd) {
  auto data = testutil::random_images(n, 1, 4, 4, 3, 1);
  std::vector<double> s(n);
  std::vector<bool> flag(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = static_cast<double>(i);
    flag[i] = i < bd;
    data.is_backdoor[i] = flag[i];
  }
  return {data, testutil::table(s, flag)};
}
}  // namespace

TEST_CASE("partition sizes and quality") {
  auto [data, t] = ranked(200, 10);
  auto p = partition_by_score(data, t, 0.025, 0.70);
  CHECK(p.suspect.size() == 5);
  CHECK(p.trusted.size() == 140);
  for (auto i : p.suspect) CHECK(std::find(p.trusted.begin(), p.trusted.end(), i) == p.trusted.end());
  auto q = partition_quality(data, p);
  CHECK(q.trr == 1.0);
  CHECK(q.far == 0.0);
  CHECK(q.recall == 0.0);
  CHECK_THROWS(partition_by_score(data, t, 0.4, 0.7));
  CHECK_THROWS(partition_by_score(data, t, 0.001, 0.7));
  auto r = random_partition(200, 0.025, 0.70, 3);
  CHECK(r.suspect.size() == 5);
  CHECK(r.trusted.size() == 140);
}

TEST_CASE("partition ties fall back to index order") {
  auto data = testutil::random_images(8, 1, 4, 4, 3, 1);
  auto t = testutil::table(std::vector<double>(8, 1.0), std::vector<bool>(8, false));
  auto p = partition_by_score(data, t, 0.25, 0.5);
  CHECK(p.suspect == std::vector<std::size_t>{0, 1});
}

TEST_CASE("complement loss gradient") {
  Batch z({3, 4, 1, 1}, std::vector<double>{0.3, -1.2, 2.0, 0.1, 5.0, 0.0, 0.0, 0.0, -3, 1, 2, 40});
  std::vector<int> y = {2, 0, 3};
  Batch d;
  auto l = complement_loss(z, y, &d, 1.0);
  CHECK(std::isfinite(l[2]));
  auto fd = oracle::finite_diff(
      [&](const std::vector<double>& v) {
        auto ls = complement_loss(Batch(z.shape(), v), y);
        return ls[0] + ls[1] + ls[2];
      },
      z.vec(), 1e-6);
  CHECK(oracle::max_rel_err(d.vec(), fd, 1e-4) < 1e-4);
  // saturated sample keeps a gradient of order one
  CHECK(d[2 * 4 + 3] == doctest::Approx(1.0));
}

TEST_CASE("unlearning") {
  auto data = make_synthetic_shapes(20, 3, 12, 12, 1);
  auto model = nn::build_reference_cnn(data.image_shape(), 3, 0.5, 2);
  Partition part;
  for (std::size_t i = 0; i < 6; ++i) part.suspect.push_back(i);
  for (std::size_t i = 6; i < 60; ++i) part.trusted.push_back(i);
  UnlearnConfig cfg;
  SUBCASE("lr 0 is a no-op") {
    cfg.lr = 0.0;
    CHECK(unlearn_finetune(model, data, part, cfg) == model);
  }
  SUBCASE("one ascent step raises the suspect loss") {
    auto loss = [&](const nn::Model& m) {
      auto b = gather_batch(data.images, part.suspect);
      std::vector<int> lab;
      for (auto i : part.suspect) lab.push_back(data.labels[i]);
      auto l = nn::cross_entropy(nn::forward_logits(m, b), lab);
      return std::accumulate(l.begin(), l.end(), 0.0);
    };
    for (auto kind : {AscentLoss::ce, AscentLoss::complement}) {
      Partition only{part.suspect, {}};
      cfg.epochs = 1;
      cfg.lr = 1e-3;
      cfg.ascent_loss = kind;
      CHECK(loss(unlearn_finetune(model, data, only, cfg)) > loss(model));
    }
  }
  SUBCASE("overlap rejected") {
    part.trusted.push_back(0);
    CHECK_THROWS(unlearn_finetune(model, data, part, cfg));
  }
}

TEST_CASE("unlearn config json") {
  UnlearnConfig c;
  c.ascent_loss = AscentLoss::complement;
  CHECK(UnlearnConfig::from_json(c.to_json()).ascent_loss == AscentLoss::complement);
  CHECK_THROWS_AS(ascent_loss_from_string("hinge"), ConfigError);
}
