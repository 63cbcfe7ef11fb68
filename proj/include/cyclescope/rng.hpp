#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cyclescope {

// Deterministic random source. All distribution transforms are implemented
// here rather than via std::*_distribution so that a (config, seed) pair
// reproduces byte-identical artifacts regardless of the standard library.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1), 53-bit resolution
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const double span = static_cast<double>(hi - lo) + 1.0;
    auto v = lo + static_cast<std::int64_t>(uniform01() * span);
    return v > hi ? hi : v;
  }

  // inclusive bounds, log-uniform mass (heavier on small values)
  std::int64_t log_uniform_int(std::int64_t lo, std::int64_t hi) {
    const double llo = std::log(static_cast<double>(lo));
    const double lhi = std::log(static_cast<double>(hi) + 1.0);
    auto v = static_cast<std::int64_t>(std::exp(uniform(llo, lhi)));
    if (v < lo) v = lo;
    if (v > hi) v = hi;
    return v;
  }

  // standard normal via Box-Muller; one spare cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // multiplicative noise term exp(sigma * Z)
  double log_normal(double sigma) { return std::exp(sigma * normal()); }

  // independent substream for (seed, stream) pairs, e.g. one per trial
  static std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cyclescope
