#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "maskspec/common.hpp"

namespace maskspec {

/// Deterministic random source. All distributions are built from the raw
/// mt19937_64 stream by hand, so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [lo, hi], both inclusive, rejection-sampled so every
  /// value is exactly equally likely.
  long uniform_int(long lo, long hi) {
    if (hi < lo) throw contract_error("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / span * span;
    std::uint64_t r;
    do {
      r = gen_();
    } while (r >= limit);
    return lo + static_cast<long>(r % span);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Normal(0, stddev) resampled until the draw lands within two standard
  /// deviations.
  double trunc_normal(double stddev) {
    double v;
    do {
      v = normal();
    } while (v < -2.0 || v > 2.0);
    return v * stddev;
  }

  /// Beta(a, b) from two gamma draws.
  double beta(double a, double b) {
    const double x = gamma_sample(a);
    const double y = gamma_sample(b);
    return x / (x + y);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const long n = static_cast<long>(last - first);
    for (long i = n - 1; i > 0; --i) {
      const long j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

 private:
  // Marsaglia-Tsang; shapes below one are boosted through Gamma(shape + 1).
  double gamma_sample(double shape) {
    if (shape <= 0.0) throw contract_error("gamma_sample: shape must be positive");
    if (shape < 1.0) {
      const double u = uniform01();
      return gamma_sample(shape + 1.0) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform01();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::mt19937_64 gen_;
  bool have_spare_{false};
  double spare_{0.0};
};

/// Derives an independent stream seed from a master seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1u);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace maskspec
