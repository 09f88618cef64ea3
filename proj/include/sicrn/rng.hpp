#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sicrn {

// Deterministic random source. std::mt19937_64 is fully specified by the
// standard, but the standard distributions are not, so uniform/normal are
// implemented here to make seeded runs reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, cosine branch only; one double consumed per pair of draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Modulo bias is irrelevant at the pool sizes used here.
    return eng_() % n;
  }

  // Derives an independent substream seed from a master seed and tags.
  // splitmix64 finalizer; used so (seed, epoch, index) fully determines
  // every sample without any shared mutable stream.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag_a,
                              std::uint64_t tag_b = 0, std::uint64_t tag_c = 0) {
    auto mix = [](std::uint64_t z) {
      z += 0x9e3779b97f4a7c15ULL;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      return z ^ (z >> 31);
    };
    std::uint64_t h = mix(seed);
    h = mix(h ^ tag_a);
    h = mix(h ^ tag_b);
    h = mix(h ^ tag_c);
    return h;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace sicrn
