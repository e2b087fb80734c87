#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace tprop {

namespace detail {

// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator: draw k of stream s is mix(key(seed, s), k), so
/// the sequence depends on nothing but the seed, the stream path and the
/// number of draws taken. Streams are split by name or id and are
/// statistically independent of their parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept
      : seed_(seed), key_(detail::mix64(seed ^ 0x5851f42d4c957f2dULL)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Child stream; does not advance this generator.
  Rng split(std::uint64_t stream_id) const noexcept {
    Rng child(seed_);
    child.key_ = detail::mix64(key_ ^ detail::mix64(stream_id + 0x632be59bd9b4e019ULL));
    return child;
  }
  Rng split(std::string_view name) const noexcept { return split(detail::hash_name(name)); }

  std::uint64_t next_u64() noexcept {
    return detail::mix64(key_ ^ detail::mix64(counter_++));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) noexcept {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace tprop
