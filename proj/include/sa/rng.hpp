#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "sa/error.hpp"

namespace sa {

// Deterministic random source. The engine (mt19937_64) is bit-exact by the
// standard; all value transforms are hand-rolled here so that a seed fully
// determines every draw regardless of standard-library vendor.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [0, n) without modulo bias (fixed-point multiply).
  size_t index(size_t n) {
    if (n == 0) throw ArgumentError("Rng::index: n must be positive");
    return static_cast<size_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal(0, stddev) with draws beyond `cut` standard deviations rejected.
  double truncated_normal(double stddev, double cut = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::fabs(z) > cut);
    return stddev * z;
  }

  // Laplace(0, b) by inverse CDF.
  double laplace(double b) {
    double t;
    do {
      t = uniform();
    } while (t == 0.0);
    const double u = t - 0.5;  // (-0.5, 0.5)
    const double sign = (u < 0.0) ? -1.0 : 1.0;
    return -b * sign * std::log1p(-2.0 * std::fabs(u));
  }

  // Beta(a, b) by Johnk's method; intended for a, b <= 1.
  double beta(double a, double b) {
    for (;;) {
      const double x = std::pow(uniform(), 1.0 / a);
      const double y = std::pow(uniform(), 1.0 / b);
      const double s = x + y;
      if (s > 0.0 && s <= 1.0) return x / s;
    }
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<size_t> permutation(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
      const size_t j = index(i);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  // k distinct values from 0..n-1, in draw order.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw ArgumentError("sample_without_replacement: k > n");
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) {
      const size_t j = index(pool.size());
      out.push_back(pool[j]);
      pool[j] = pool.back();
      pool.pop_back();
    }
    return out;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sa
