#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace seqtwin {

// Deterministic splittable random stream built on the SplitMix64 mixer.
// Streams are identified by a 64-bit key; `derive` folds extra key parts
// (epoch, batch index, view index, ...) into a child key, so independent
// streams can be reproduced from (seed, coordinates) alone without any
// shared mutable state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed + kGamma)) {}

  Rng derive(std::initializer_list<std::uint64_t> parts) const {
    std::uint64_t key = state_;
    for (std::uint64_t p : parts) key = mix(key ^ mix(p + kGamma));
    return Rng(FromKey{}, key);
  }

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n); bias is O(n / 2^64), far below anything observable here.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double next_gaussian(double mean, double stddev) {
    // Box-Muller; u1 is kept away from 0 so log() stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Fisher-Yates over the whole vector.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  struct FromKey {};
  Rng(FromKey, std::uint64_t key) : state_(key) {}

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace seqtwin
