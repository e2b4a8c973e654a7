#include <doctest.h>

#include <fstream>
#include <vector>

#include "cogdist/data.hpp"
#include "cogdist/score_table.hpp"
#include "helpers.hpp"

using namespace cogdist;

namespace {
void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}
std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
}
}  // namespace

TEST_CASE("cifar10 binary records") {
  auto dir = testutil::temp_dir("cifar");
  std::vector<unsigned char> rec(3073, 0);
  rec[0] = 5;
  rec[1] = 255;
  write_bytes(dir / "one.bin", rec);
  auto s = load_cifar10_binary(dir / "one.bin");
  REQUIRE(s.size() == 1);
  CHECK(s.labels[0] == 5);
  CHECK(s.images.shape() == Shape{1, 3, 32, 32});
  CHECK(s.images[0] == 1.0f);
  CHECK(s.images[1] == 0.0f);

  write_bytes(dir / "short.bin", std::vector<unsigned char>(3072, 0));
  CHECK_THROWS_AS(load_cifar10_binary(dir / "short.bin"), FormatError);

  write_cifar10_binary(dir / "rt.bin", s);
  CHECK(load_cifar10_binary(dir / "rt.bin").images == s.images);
}

TEST_CASE("idx images and labels") {
  auto dir = testutil::temp_dir("idx");
  std::vector<unsigned char> img = be32(0x803);
  for (auto v : {be32(2), be32(28), be32(28)}) img.insert(img.end(), v.begin(), v.end());
  img.resize(16 + 2 * 784, 0);
  img[16 + 784] = 255;
  std::vector<unsigned char> lab = be32(0x801);
  auto n = be32(2);
  lab.insert(lab.end(), n.begin(), n.end());
  lab.push_back(3);
  lab.push_back(7);
  write_bytes(dir / "i", img);
  write_bytes(dir / "l", lab);
  auto s = load_idx(dir / "i", dir / "l");
  CHECK(s.images.shape() == Shape{2, 1, 28, 28});
  CHECK(s.images[0] == 0.0f);
  CHECK(s.images[784] == 1.0f);
  CHECK(s.labels == std::vector<int>{3, 7});

  lab.pop_back();
  lab[7] = 1;
  write_bytes(dir / "l1", lab);
  CHECK_THROWS_AS(load_idx(dir / "i", dir / "l1"), FormatError);

  write_idx(dir / "i2", dir / "l2", s);
  CHECK(load_idx(dir / "i2", dir / "l2").images == s.images);
}

TEST_CASE("synthetic shapes") {
  auto a = make_synthetic_shapes(10, 2, 16, 16, 0);
  auto b = make_synthetic_shapes(10, 2, 16, 16, 0);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(make_synthetic_shapes(10, 3, 16, 16, 0).size() == 30);
  for (float v : a.images.vec()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("synthetic shapes are separable by nearest centroid") {
  auto train = make_synthetic_shapes(50, 4, 16, 16, 1);
  auto test = make_synthetic_shapes(50, 4, 16, 16, 2);
  const std::size_t d = 256;
  std::vector<std::vector<double>> centroid(4, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto x = train.images.item(i);
    for (std::size_t j = 0; j < d; ++j) centroid[train.labels[i]][j] += x[j] / 50.0;
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto x = test.images.item(i);
    int best = 0;
    double bd = 1e300;
    for (int k = 0; k < 4; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += (x[j] - centroid[k][j]) * (x[j] - centroid[k][j]);
      if (s < bd) bd = s, best = k;
    }
    hit += best == test.labels[i];
  }
  CHECK(static_cast<double>(hit) / static_cast<double>(test.size()) > 0.95);
}

TEST_CASE("score table csv round trip") {
  auto dir = testutil::temp_dir("scores");
  ScoreTable t;
  t.method = "cd_l";
  t.rows = {{0, 0.0, true, 1}, {1, 1.0 / 3.0, false, 2}, {2, 1e-17, false, 0}};
  save_scores(dir / "s.csv", t);
  auto back = load_scores(dir / "s.csv");
  CHECK(back == t);
  CHECK(back.rows[0].score == 0.0);
  std::ofstream(dir / "bad.csv") << "index,score,label\n0,1.0,1\n";
  CHECK_THROWS(load_scores(dir / "bad.csv"));
}

TEST_CASE("mask persistence") {
  auto dir = testutil::temp_dir("mask");
  Mask m{2, 3, {0.f, 0.25f, 0.5f, 0.75f, 1.f, 0.125f}};
  save_mask(dir / "m.f32", m);
  CHECK(load_mask(dir / "m.f32") == m);
  CHECK(std::filesystem::exists(dir / "m.f32.json"));
  CHECK(m.l1() == doctest::Approx(2.625));
}

TEST_CASE("image set invariants") {
  auto s = testutil::random_images(4, 1, 2, 2, 2, 0);
  s.validate();
  s.labels[0] = 5;
  CHECK_THROWS(s.validate());
}
