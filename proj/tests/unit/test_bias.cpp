#include <doctest.h>

#include <cmath>

#include "cogdist/bias.hpp"
#include "helpers.hpp"

using namespace cogdist;
using namespace cogdist::bias;

namespace {
// attribute 0 on the first `on0` rows, attribute 1 on rows where i % 4 == 0, attribute 2 always on
AttributeTable make(std::size_t n, std::size_t on0) {
  AttributeTable t;
  t.names = {"a", "b", "c"};
  t.rows = n;
  for (std::size_t i = 0; i < n; ++i) {
    t.values.push_back(i < on0);
    t.values.push_back(i % 4 == 0);
    t.values.push_back(1);
  }
  return t;
}
}  // namespace

TEST_CASE("shift formula cases") {
  auto t = make(8, 4);  // P_0 = 0.5, P_1 = 0.25
  SUBCASE("subset mirrors the population") {
    auto s = attribute_shift(t, {0, 1, 5, 6}, 0);  // P_00 = 0.5, P_10 = 0.25
    CHECK(s.score[0] == doctest::Approx(0.0));
    CHECK(s.score[1] == doctest::Approx(0.0));
  }
  SUBCASE("full presence of a balanced attribute") {
    auto s = attribute_shift(t, {0, 1}, 0);
    CHECK(s.score[0] == doctest::Approx(1.0));
  }
  SUBCASE("absence of a rare attribute") {
    auto s = attribute_shift(t, {1, 2}, 0);
    CHECK(s.score[1] == doctest::Approx(-1.0 / 3.0));
  }
  SUBCASE("constant attribute skipped") {
    auto s = attribute_shift(t, {1, 2}, 0);
    CHECK(s.skipped[2]);
    CHECK(s.score[2] == 0.0);
  }
}

TEST_CASE("shift magnitude never exceeds one") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    AttributeTable t;
    t.names = {"x", "y", "z"};
    t.rows = 40;
    for (std::size_t i = 0; i < 120; ++i) t.values.push_back(rng.uniform() < 0.3);
    auto sub = rng.sample_without_replacement(40, 1 + rng.index(20));
    auto s = attribute_shift(t, sub, 1);
    for (double v : s.score) CHECK(std::abs(v) <= 1.0 + 1e-12);
  }
}

TEST_CASE("low-norm subset") {
  auto t = testutil::table({5, 1, 1, 3, 0, 9, 2, 2, 8, 4}, std::vector<bool>(10, false));
  CHECK(select_low_norm_subset(t, 0.3) == std::vector<std::size_t>{4, 1, 2});
  CHECK_THROWS(select_low_norm_subset(t, 0.01));
}

TEST_CASE("graph keeps strong off-diagonal shifts") {
  AttributeShift s0{0, {1.0, 0.9, -0.85}, {false, false, false}};
  AttributeShift s1{1, {0.2, 1.0, 0.79}, {false, false, false}};
  auto g = top_predictive_attributes({s0, s1}, {"a", "b", "c"}, 0.8);
  REQUIRE(g.edges.size() == 2);
  CHECK(g.edges[0].from == 1);
  CHECK(g.edges[0].to == 0);
  CHECK(g.edges[1].from == 2);
  CHECK(g.to_dot().find("digraph") != std::string::npos);
  CHECK(g.to_json()["edges"].size() == 2);
}
