#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "ntq/error.hpp"

namespace ntq {

// Counter-based PRNG (splitmix64). Pure 64-bit integer arithmetic, so the
// stream for a given seed is identical across runs and platforms. Named
// substreams let every pipeline stage draw from an independent stream derived
// from the single run seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in [0, n), rejection sampled to avoid modulo bias.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    const uint64_t lim = (0ull - n) % n;  // 2^64 mod n
    for (;;) {
      const uint64_t x = next_u64();
      if (x >= lim) return x % n;
    }
  }

  // Standard normal via the Marsaglia polar method (no trig, deterministic
  // rejection loop). The spare value is discarded to keep the state simple.
  double gaussian() {
    for (;;) {
      const double u = 2.0 * next_double() - 1.0;
      const double v = 2.0 * next_double() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) {
        return u * std::sqrt(-2.0 * std::log(s) / s);
      }
    }
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Derive an independent stream; derivation depends only on the parent seed,
  // never on how much of the parent stream was consumed.
  Rng substream(std::string_view name) const {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the tag bytes
    for (const char c : name) {
      h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ull;
    }
    return Rng(mix(seed_ ^ h));
  }

  Rng substream(uint64_t index) const { return Rng(mix(seed_ + 0x9e3779b97f4a7c15ull * (index + 1))); }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdull;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
    return z ^ (z >> 33);
  }

  uint64_t seed_;
  uint64_t state_;
};

}  // namespace ntq
