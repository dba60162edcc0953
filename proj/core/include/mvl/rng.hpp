#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mvl {

/// SplitMix64 generator (64-bit state, Steele/Lea/Flood 2014).
///
/// Streams are split by name: `Rng::derive(seed, "encoder.optical.l1.weight")`
/// yields an independent generator whose sequence depends only on the seed and
/// the label. Every parameter initializer and every dropout site owns its own
/// stream, so adding a module to a model never perturbs the draws of the
/// modules that were already there.
///
/// Normal deviates use Box-Muller so results are identical across standard
/// library implementations.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed = 0) : state_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // FNV-1a, 64-bit.
  static constexpr std::uint64_t hash(std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  static constexpr Rng derive(std::uint64_t seed, std::string_view label) {
    return Rng(mix(seed ^ mix(hash(label))));
  }
  static constexpr Rng derive(std::uint64_t seed, std::uint64_t index) {
    return Rng(mix(seed + 0x9e3779b97f4a7c15ULL * (index + 1)));
  }

  constexpr std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection, n > 0.
  constexpr std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  constexpr std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// In-place Fisher-Yates shuffle.
template <typename Container>
void shuffle(Container& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace mvl
