#include <doctest.h>

#include <cmath>
#include <vector>

#include "../oracles.hpp"
#include "cogdist/distill.hpp"
#include "cogdist/rng.hpp"
#include "helpers.hpp"

using namespace cogdist;
using namespace cogdist::distill;

TEST_CASE("tv identities") {
  std::vector<double> constant(16, 0.3);
  CHECK(tv_loss(constant, 4, 4) == 0.0);
  CHECK(tv_loss(std::vector<double>{0, 1, 0, 1}, 2, 2) == 2.0);
  CHECK(tv_loss(std::vector<double>{0, 1, 1, 0}, 2, 2) == 4.0);
  // n x n checkerboard: 2 n (n - 1) unit jumps
  std::vector<double> cb(36);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) cb[i * 6 + j] = static_cast<double>((i + j) % 2);
  CHECK(tv_loss(cb, 6, 6) == 60.0);
  CHECK_THROWS(tv_loss(constant, 3, 4));
}

TEST_CASE("tv subgradient matches finite differences away from kinks") {
  Rng rng(3);
  std::vector<double> m(20);
  for (auto& v : m) v = rng.uniform();
  std::vector<double> g(20, 0.0);
  tv_subgradient(m, 4, 5, 2.0, g);
  auto fd = oracle::finite_diff([](const std::vector<double>& x) { return 2.0 * tv_loss(x, 4, 5); }, m, 1e-6);
  CHECK(oracle::max_rel_err(g, fd, 1.0) < 1e-6);
}

TEST_CASE("mask reparameterization") {
  CHECK(mask_reparam(0.0) == 0.5);
  CHECK(mask_reparam(20.0) > 1.0 - 1e-8);
  CHECK(mask_reparam(std::atanh(0.6)) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(mask_reparam(-50.0) >= 0.0);
}

TEST_CASE("adam first step matches the hand computation") {
  for (double g : {1.0, -0.37, 42.0}) {
    std::vector<double> p = {0.25};
    std::vector<double> grad = {g};
    AdamState st;
    adam_update(p, grad, st, 0.1, 0.1, 0.1, 1e-8);
    CHECK(std::abs(p[0] - oracle::adam_first_step(0.25, g, 0.1, 0.1, 0.1, 1e-8)) <= 1e-9);
    CHECK(std::abs((p[0] - 0.25) + 0.1 * (g > 0 ? 1.0 : -1.0)) < 1e-6);
  }
  std::vector<double> p = {1.5};
  std::vector<double> zero = {0.0};
  AdamState st;
  for (int i = 0; i < 10; ++i) adam_update(p, zero, st, 0.1, 0.9, 0.999, 1e-8);
  CHECK(p[0] == 1.5);
}

TEST_CASE("adam second step against the recurrence") {
  std::vector<double> p = {0.0};
  AdamState st;
  adam_update(p, std::vector<double>{1.0}, st, 0.1, 0.5, 0.25, 1e-8);
  adam_update(p, std::vector<double>{3.0}, st, 0.1, 0.5, 0.25, 1e-8);
  const double m1 = 0.5, v1 = 0.75;
  const double m2 = 0.5 * m1 + 0.5 * 3.0, v2 = 0.25 * v1 + 0.75 * 9.0;
  const double step2 = 0.1 * (m2 / (1 - 0.25)) / (std::sqrt(v2 / (1 - 0.0625)) + 1e-8);
  CHECK(std::abs(p[0] - (-0.1 - step2)) <= 1e-9);
}

TEST_CASE("cd objective special cases") {
  auto model = testutil::tiny_cnn();
  auto data = testutil::random_images(1, 1, 6, 6, 3, 7);
  auto x = data.images.item(0);
  CDConfig cfg;
  cfg.alpha = 0.01;
  cfg.beta = 10.0;
  std::vector<double> delta = {0.3};
  // m == 1: x_cp = x
  std::vector<double> big(36, 30.0);
  auto t1 = cd_objective(model, x, big, delta, cfg);
  CHECK(t1.fidelity == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(t1.l1 == doctest::Approx(0.01 * 36).epsilon(1e-9));
  CHECK(t1.tv == doctest::Approx(0.0).epsilon(1e-9));
  // m == 0: x_cp = delta everywhere
  std::vector<double> small(36, -30.0);
  auto t0 = cd_objective(model, x, small, delta, cfg);
  FloatTensor flat({1, 1, 6, 6}, 0.3f);
  auto lx = nn::forward_logits(model, to_batch(data.images));
  auto ld = nn::forward_logits(model, to_batch(flat));
  double expect = 0.0;
  for (std::size_t k = 0; k < 3; ++k) expect += std::abs(lx[k] - ld[k]);
  CHECK(t0.fidelity == doctest::Approx(expect).epsilon(1e-6));
  CHECK(t0.l1 == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cd objective gradient matches finite differences") {
  for (auto layer : {OutputLayer::logits, OutputLayer::features}) {
    auto model = testutil::tiny_cnn(2, 6, 6, 3, 11);
    auto data = testutil::random_images(1, 2, 6, 6, 3, 5);
    auto x = data.images.item(0);
    CDConfig cfg = CDConfig::for_layer(layer);
    cfg.alpha = 0.05;
    cfg.beta = 0.5;
    Rng rng(9);
    std::vector<double> w(36);
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    std::vector<double> delta = {0.2, 0.7};
    std::vector<double> grad;
    cd_objective(model, x, w, delta, cfg, &grad);
    auto fd = oracle::finite_diff(
        [&](const std::vector<double>& ww) { return cd_objective(model, x, ww, delta, cfg).total(); }, w, 1e-6);
    CHECK(oracle::max_rel_err(grad, fd, 1e-3) < 1e-3);
  }
}

TEST_CASE("distill_mask contracts") {
  auto model = testutil::tiny_cnn();
  auto data = testutil::random_images(5, 1, 6, 6, 3, 8);
  CDConfig cfg;
  cfg.steps = 0;
  auto r0 = distill_mask(model, data.images, cfg, 1);
  REQUIRE(r0.size() == 5);
  for (const auto& r : r0) {
    for (float v : r.mask.values) CHECK(v == 0.5f);
    CHECK(r.score == doctest::Approx(0.5 * 36));
  }
  cfg.steps = 20;
  cfg.batch_size = 2;
  auto a = distill_mask(model, data.images, cfg, 4, 1);
  cfg.batch_size = 64;
  auto b = distill_mask(model, data.images, cfg, 4, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(!a[i].failed);
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].trace.size() == 20);
    CHECK(a[i].score >= 0.0);
    CHECK(a[i].score <= 36.0);
    for (float v : a[i].mask.values) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(a[i].pattern.size() == 36);
  }
  auto c = distill_mask(model, data.images, cfg, 5, 1);
  CHECK(c[0].mask != a[0].mask);
}

TEST_CASE("simplify_trigger and mask_area") {
  Mask m{2, 2, {0.0f, 0.04f, 0.05f, 1.0f}};
  std::vector<float> bd = {1, 1, 1, 1}, clean = {0, 0, 0, 0};
  Shape s{1, 1, 2, 2};
  CHECK(simplify_trigger(m, bd, clean, s) == std::vector<float>{0, 0, 1, 1});
  CHECK(mask_area(m) == 0.5);
  Mask all{2, 2, {1, 1, 1, 1}};
  CHECK(simplify_trigger(all, bd, clean, s) == bd);
  Mask none{2, 2, {0, 0, 0, 0}};
  CHECK(simplify_trigger(none, bd, clean, s) == clean);
  // the mask is shared across channels
  std::vector<float> bd2(8, 1.0f), clean2(8, 0.0f);
  auto two = simplify_trigger(m, bd2, clean2, Shape{1, 2, 2, 2});
  CHECK(two == std::vector<float>{0, 0, 1, 1, 0, 0, 1, 1});
}

TEST_CASE("cd config validation") {
  CDConfig c;
  c.steps = -1;
  CHECK_THROWS(c.validate());
  CDConfig d;
  d.alpha = -0.1;
  CHECK_THROWS(d.validate());
  auto j = CDConfig::for_layer(OutputLayer::features).to_json();
  CHECK(CDConfig::from_json(j).layer == OutputLayer::features);
}
