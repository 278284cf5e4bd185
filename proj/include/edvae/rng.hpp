#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace edvae {

// Counter-based pseudo-random generator (splitmix64 output function over a
// keyed counter). Two properties the training stack relies on:
//   * the same seed yields the same stream within one build of the artifact;
//   * independent sub-streams can be derived per (site, index) key, so adding
//     or removing a consumer never shifts the draws seen by another one.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x8f1b'd5c7'a3e0'42d1ULL)), counter_(0) {}

  // Derive an independent sub-stream keyed by (site, index).
  Rng stream(uint64_t site, uint64_t index = 0) const {
    Rng child(0);
    child.key_ = mix(mix(key_ ^ mix(site + 0x1000'0000'0000'0001ULL)) + index * kGamma);
    child.counter_ = 0;
    return child;
  }

  // Label form for call sites: stream("gumbel", iteration).
  Rng stream(std::string_view label, uint64_t index = 0) const {
    return stream(fnv1a(label), index);
  }

  uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  // Uniform on [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1), both endpoints excluded; safe under log(-log(u)).
  double next_open_double() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes exactly two draws per call.
  double next_gaussian() {
    double u1 = next_open_double();
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) {
    // Rejection-free modulo is biased for huge n; dataset sizes are far below
    // the bias threshold, but do it properly anyway.
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf2'9ce4'8422'2325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x0000'0100'0000'01b3ULL;
    }
    return h;
  }

 private:
  static constexpr uint64_t kGamma = 0x9e37'79b9'7f4a'7c15ULL;

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58'476d'1ce4'e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d0'49bb'1331'11ebULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t key_;
  uint64_t counter_;
};

}  // namespace edvae
