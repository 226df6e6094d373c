// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace hierflow {

// Deterministic RNG with explicitly implemented distributions. std::*_distribution
// output is implementation-defined; byte-identical reruns require owning the math.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one spare value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * M_PI * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    return n == 0 ? 0 : engine_() % n;
  }

  // Child generator with a decorrelated seed; used for per-sample streams.
  Rng fork(std::uint64_t salt) {
    std::uint64_t s = engine_() ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
    return Rng(s);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hierflow
