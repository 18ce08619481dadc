#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace ipr {

// Counter-based pseudo-random generator.  Every stream is identified by a
// 64-bit key derived from a user seed plus a path of indices (e.g. graph
// index, sample index, row index), so any draw in the system can be
// reproduced from those coordinates alone without replaying earlier draws.
// Mixing uses the splitmix64 finalizer, which is bijective on 64-bit words.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key), counter_(0) {}

  // Derive a stream key from a seed and a path of indices.  Each path
  // element is folded in with a round of splitmix64 so that distinct paths
  // yield statistically independent streams.
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = mix(seed + 0x9e3779b97f4a7c15ULL);
    for (std::uint64_t p : path) {
      k = mix(k ^ (p + 0x9e3779b97f4a7c15ULL));
    }
    return Rng(k);
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  // Uniform double in [0, 1): top 53 bits of the next word.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller; consumes two uniforms per call pair and
  // caches the second value, so draw counts stay deterministic.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_double();  // avoid log(0)
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).  n must be positive.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t key() const { return key_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ipr
