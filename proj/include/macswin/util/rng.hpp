#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace macswin {

// SplitMix64-based generator. Used instead of <random> engines so that
// streams are bit-reproducible across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call, the pair partner is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

inline uint64_t hash_u64(uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
  return hash_u64(seed ^ (v + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2)));
}

inline uint64_t hash_combine(uint64_t seed, std::string_view s) {
  uint64_t h = seed;
  for (char c : s) h = hash_combine(h, uint64_t(uint8_t(c)));
  return h;
}

// Derives an independent stream, e.g. hash(global_seed, video_id, frame).
template <class... Parts>
uint64_t derive_seed(uint64_t seed, const Parts&... parts) {
  ((seed = hash_combine(seed, parts)), ...);
  return seed;
}

}  // namespace macswin
