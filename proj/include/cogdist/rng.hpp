#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace cogdist {

/// Mixes a seed with a stream index into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Portable random source. The distributions are written out by hand so
/// results do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  /// `k` distinct values from [0, n) in selection order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cogdist
