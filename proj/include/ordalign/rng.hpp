#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace ordalign {

// Seeded random stream with portable value mapping. The engine is
// std::mt19937_64 (bit-reproducible by the standard); the uniform/normal
// mappings are done here instead of <random> distributions, whose output
// is implementation-defined. Every consumer derives its stream from
// (root seed, purpose tag, indices) so streams never interleave and
// skipping one consumer does not shift another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return u01() < p; }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = u01();
    double u2 = u01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline std::uint64_t mix_u64(std::uint64_t x) {
  // splitmix64 finalizer.
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix_u64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derive a substream seed from (seed, tag, indices...).
template <typename... Ix>
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, Ix... indices) {
  std::uint64_t h = hash_combine(seed, tag_hash(tag));
  ((h = hash_combine(h, static_cast<std::uint64_t>(indices))), ...);
  return h;
}

template <typename... Ix>
Rng derive_rng(std::uint64_t seed, std::string_view tag, Ix... indices) {
  return Rng(derive_seed(seed, tag, indices...));
}

}  // namespace ordalign
