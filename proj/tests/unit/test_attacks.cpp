#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "cogdist/attacks.hpp"
#include "helpers.hpp"

using namespace cogdist;
using namespace cogdist::attacks;

TEST_CASE("badnets patch") {
  Shape s{1, 1, 8, 8};
  std::vector<float> img(64, 0.3f);
  std::vector<float> patch = {1, 0, 1, 0, 1, 0, 1, 0, 1};
  apply_badnets(img, s, patch, 3, 3, 5, 5);
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      const float v = img[y * 8 + x];
      if (y >= 5 && x >= 5) CHECK(v == patch[(y - 5) * 3 + (x - 5)]);
      else CHECK(v == 0.3f);
    }
  }
  std::vector<float> same(64, 0.3f);
  apply_badnets(same, s, {}, 0, 0, 0, 0);
  CHECK(same == std::vector<float>(64, 0.3f));
  CHECK_THROWS(apply_badnets(same, s, patch, 3, 3, 6, 6));
}

TEST_CASE("blend formula") {
  std::vector<float> img = {0.2f, 0.4f}, trig = {0.8f, 0.0f};
  auto a = img;
  apply_blend(a, trig, 0.0);
  CHECK(a == img);
  auto b = img;
  apply_blend(b, trig, 1.0);
  CHECK(b == trig);
  auto c = img;
  apply_blend(c, trig, 0.5);
  CHECK(c[0] == doctest::Approx(0.5));
}

TEST_CASE("sig formula") {
  Shape s{1, 1, 2, 8};
  std::vector<float> zero(16, 0.0f);
  auto a = zero;
  apply_sig(a, s, 0.1, 1.0);
  CHECK(a[2] == doctest::Approx(0.1 * std::sin(std::numbers::pi / 2)));
  CHECK(a[8 + 2] == doctest::Approx(0.1));
  for (float v : a) CHECK(v >= 0.0f);  // negative half clipped
  auto b = zero;
  apply_sig(b, s, 0.0, 6.0);
  CHECK(b == zero);
  std::vector<float> bright(16, 0.98f);
  apply_sig(bright, s, 5.0, 3.0);
  for (float v : bright) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("warp") {
  Shape s{1, 1, 12, 12};
  auto f = make_warp_field(4, 12, 12, 3);
  auto g = make_warp_field(4, 12, 12, 3);
  CHECK(f.dy == g.dy);
  CHECK(f.dx == g.dx);
  auto base = testutil::random_images(1, 1, 12, 12, 2, 4);
  std::vector<float> img(base.images.item(0).begin(), base.images.item(0).end());
  auto same = img;
  apply_warp(same, s, f, 0.0);
  CHECK(same == img);
  double prev = 0.0;
  for (double strength : {0.25, 0.5, 1.0}) {
    auto w = img;
    apply_warp(w, s, f, strength);
    double change = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) change += std::abs(w[i] - img[i]);
    CHECK(change > prev);
    prev = change;
  }
}

TEST_CASE("poison_dataset contracts") {
  auto clean = testutil::random_images(1000, 1, 8, 8, 4, 2);
  AttackSpec spec;
  spec.family = Family::badnets;
  spec.poisoning_rate = 0.05;
  spec.target_label = 0;
  spec.seed = 7;
  auto r = poison_dataset(clean, spec);
  REQUIRE(r.poisoned.size() == 50);
  CHECK(std::is_sorted(r.poisoned.begin(), r.poisoned.end()));
  CHECK(r.data.count_backdoor() == 50);
  std::vector<bool> hit(clean.size(), false);
  for (auto i : r.poisoned) {
    hit[i] = true;
    CHECK(clean.labels[i] != 0);
    CHECK(r.data.labels[i] == 0);
    CHECK(r.data.is_backdoor[i]);
    auto a = r.data.images.item(i);
    auto b = clean.images.item(i);
    // only the 3x3 corner moves
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x)
        if (y < 5 || x < 5) CHECK(a[y * 8 + x] == b[y * 8 + x]);
  }
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (hit[i]) continue;
    CHECK(r.data.labels[i] == clean.labels[i]);
    CHECK(!r.data.is_backdoor[i]);
    auto a = r.data.images.item(i);
    auto b = clean.images.item(i);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  auto again = poison_dataset(clean, spec);
  CHECK(again.poisoned == r.poisoned);
  CHECK(again.data.images == r.data.images);
  CHECK(rematerialize(clean, spec, r.poisoned).images == r.data.images);

  spec.poisoning_rate = 0.0005;
  CHECK_THROWS(poison_dataset(clean, spec));
}

TEST_CASE("every family keeps pixels in range") {
  auto clean = testutil::random_images(200, 3, 8, 8, 4, 5);
  for (auto fam : {Family::badnets, Family::blend, Family::sig, Family::warp}) {
    AttackSpec spec;
    spec.family = fam;
    spec.poisoning_rate = 0.1;
    auto r = poison_dataset(clean, spec);
    CHECK(r.poisoned.size() == 20);
    for (float v : r.data.images.vec()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    auto test = triggered_test_set(clean, spec);
    for (int l : test.labels) CHECK(l != 0);
  }
}

TEST_CASE("attack spec json") {
  AttackSpec s;
  s.family = Family::sig;
  s.sig.frequency = 3;
  auto back = AttackSpec::from_json(s.to_json());
  CHECK(back.family == Family::sig);
  CHECK(back.sig.frequency == 3);
  CHECK(back.hash() == s.hash());
  CHECK_THROWS_AS(family_from_string("trojan"), ConfigError);
  AttackSpec bad;
  bad.target_label = 9;
  CHECK_THROWS_AS(bad.validate(4), ConfigError);
}
