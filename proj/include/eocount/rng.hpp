#pragma once

#include <cstdint>
#include <random>

namespace eoc {

/// SplitMix64 finalizer. Used to decorrelate derived seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                    std::uint64_t b = 0) noexcept {
  return mix64(mix64(base ^ mix64(a)) ^ mix64(b + 0x632be59bd9b4e019ULL));
}

/// Thin wrapper over mt19937_64 with distribution code written out so the
/// sequence is identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    // Rejection sampling to remove modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  bool coin() { return (engine_() >> 63) != 0; }

  template <typename T>
  void shuffle(T& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace eoc
