#pragma once

/**
 * Deterministic randomness.
 *
 * Every random draw in the lab flows through one of these helpers so that a
 * run is a pure function of (config, seed). std:: distributions are
 * implementation-defined, so we never use them: uniform doubles come straight
 * from the engine bits and categorical draws walk an explicit CDF in index
 * order.
 */

#include <cstdint>
#include <random>
#include <vector>

namespace lldlab {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Combine a seed with stream tags (purpose, step, task, ...) into a fresh
/// engine seed. Order-sensitive by design.
inline uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t h = splitmix64(seed);
  for (uint64_t t : tags) {
    h = splitmix64(h ^ (t + 0x9e3779b97f4a7c15ULL));
  }
  return h;
}

// Stream tags for seed derivation; values are part of the reproducibility
// contract and must not be reordered.
enum class Stream : uint64_t {
  corpus = 1,
  tasks = 2,
  rollout = 3,
  probe = 4,
  init = 5,
  eval = 6,
};

class Rng {
public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be positive.
  int next_below(int n) {
    return static_cast<int>(next_double() * static_cast<double>(n));
  }

  /// Standard normal via Box-Muller (no cached spare, keeps the stream simple).
  double next_gauss() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Draw an index from unnormalized non-negative weights by CDF walk in
  /// index order. Returns the last index with positive weight if rounding
  /// pushes the draw past the total.
  int next_categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = next_double() * total;
    double acc = 0.0;
    int last_positive = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0.0) last_positive = static_cast<int>(i);
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return last_positive;
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace lldlab
