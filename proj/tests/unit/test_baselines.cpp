#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cogdist/baselines.hpp"
#include "cogdist/detect.hpp"
#include "helpers.hpp"

using namespace cogdist;
using namespace cogdist::baselines;

namespace {
ImageSet labelled(std::size_t n, int label = 0) {
  auto s = testutil::random_images(n, 1, 2, 2, 2, 0);
  std::fill(s.labels.begin(), s.labels.end(), label);
  return s;
}
}  // namespace

TEST_CASE("abl averages the early losses") {
  auto data = labelled(3);
  nn::LossHistory h;
  h.epochs = 4;
  h.samples = 3;
  h.losses = {0.7, 0.0, 1.0, 0.7, 0.0, 2.0, 0.7, 0.0, 3.0, 0.7, 0.0, 100.0};
  auto t = abl_scores(h, data, 3);
  CHECK(t.rows[0].score == doctest::Approx(0.7));
  CHECK(t.rows[1].score == 0.0);
  CHECK(t.rows[2].score == doctest::Approx(2.0));
  CHECK(t.orientation == Orientation::low_is_backdoor);
  // fewer epochs than requested: all of them
  CHECK(abl_scores(h, data, 20).rows[2].score == doctest::Approx(26.5));
  CHECK_THROWS(abl_scores(nn::LossHistory{}, data, 3));
}

TEST_CASE("strip entropy bounds") {
  auto data = testutil::random_images(4, 1, 4, 4, 3, 1);
  auto confident = testutil::constant_model({0, 800, 0});
  auto t = strip_scores(confident, data, data.images, 8, 0);
  for (const auto& r : t.rows) CHECK(r.score == doctest::Approx(0.0).epsilon(1e-12));
  auto flat = testutil::constant_model({1, 1, 1});
  auto u = strip_scores(flat, data, data.images, 8, 0);
  for (const auto& r : u.rows) CHECK(r.score == doctest::Approx(std::log(3.0)));
  auto model = testutil::tiny_cnn(1, 4, 4, 3);
  auto model_data = testutil::random_images(4, 1, 4, 4, 3, 1);
  CHECK(strip_scores(model, model_data, model_data.images, 8, 3) ==
        strip_scores(model, model_data, model_data.images, 8, 3));
  CHECK_THROWS(strip_scores(model, model_data, FloatTensor({0, 1, 4, 4}), 8, 0));
}

TEST_CASE("spectral signatures") {
  auto data = labelled(5);
  SUBCASE("identical features") {
    Batch f({5, 3, 1, 1}, 1.5);
    for (const auto& r : ss_scores(f, data).rows) CHECK(r.score == doctest::Approx(0.0).epsilon(1e-20));
  }
  SUBCASE("one-dimensional features") {
    Batch f({5, 1, 1, 1}, std::vector<double>{1, 2, 3, 4, 10});
    auto t = ss_scores(f, data);
    for (std::size_t i = 0; i < 5; ++i) CHECK(t.rows[i].score == doctest::Approx(std::pow(f[i] - 4.0, 2)));
  }
  SUBCASE("planted outlier direction") {
    Rng rng(4);
    const std::size_t n = 200, d = 8;
    auto big = labelled(n);
    Batch f({n, d, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) f[i * d + k] = rng.normal();
      if (i % 20 == 0) {
        f[i * d + 3] += 8.0;
        big.is_backdoor[i] = true;
      }
    }
    auto t = ss_scores(f, big);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return t.rows[a].score > t.rows[b].score; });
    for (std::size_t k = 0; k < 10; ++k) CHECK(big.is_backdoor[order[k]]);
  }
}

TEST_CASE("silhouette") {
  SUBCASE("separated blobs") {
    Rng rng(1);
    std::vector<std::vector<double>> pts;
    std::vector<int> a;
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 30; ++i) {
        pts.push_back({c * 50.0 + rng.normal(), rng.normal()});
        a.push_back(c);
      }
    auto s = silhouette(pts, a);
    double mean = 0;
    for (double v : s) mean += v / 60.0;
    CHECK(mean > 0.9);
  }
  SUBCASE("duplicates across clusters") {
    std::vector<std::vector<double>> pts = {{0, 0}, {0, 0}, {0, 0}, {0, 0}};
    auto s = silhouette(pts, {0, 0, 1, 1});
    for (double v : s) CHECK(v == 0.0);
  }
  SUBCASE("hand example") {
    std::vector<std::vector<double>> pts = {{0}, {1}, {5}};
    auto s = silhouette(pts, {0, 0, 1});
    // a = 1, b = 5 -> 0.8 ; a = 1, b = 4 -> 0.75 ; singleton -> 0
    CHECK(s[0] == doctest::Approx(0.8));
    CHECK(s[1] == doctest::Approx(0.75));
    CHECK(s[2] == 0.0);
  }
}

TEST_CASE("activation clustering") {
  SUBCASE("planted small cluster") {
    Rng rng(2);
    const std::size_t n = 120, d = 12;
    auto data = labelled(n);
    Batch f({n, d, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) f[i * d + k] = rng.normal() * 0.5;
      if (i < 12) {
        f[i * d + 0] += 10.0;
        data.is_backdoor[i] = true;
      }
    }
    auto r = ac_scores(f, data, 10, 0);
    CHECK(detect::auroc(r.table) > 0.99);
    CHECK(r.class_silhouette.at(0) > 0.3);
  }
  SUBCASE("single tight blob") {
    Rng rng(3);
    const std::size_t n = 100, d = 4;
    auto data = labelled(n);
    Batch f({n, d, 1, 1});
    for (auto& v : f.vec()) v = rng.normal();
    auto r = ac_scores(f, data, 2, 0);
    CHECK(std::abs(r.class_silhouette.at(0)) < 0.5);
  }
}
