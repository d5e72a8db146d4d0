#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace svq {

// Counter-based generator: every draw is a pure function of (key, counter),
// so independent streams can be forked from one seed and a run can be
// replayed from any step without storing generator state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(seed + 0x9e3779b97f4a7c15ull) ^ mix(stream + 0x6a09e667f3bcc909ull))) {}

  // Derive an independent stream from a label (e.g. "slots", "gumbel").
  Rng fork(std::string_view label) const {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return Rng(FromKey{}, mix(key_ ^ mix(h)));
  }

  // Derive an independent stream from an index (e.g. a training step).
  Rng fork(std::uint64_t index) const { return Rng(FromKey{}, mix(key_ ^ mix(index + 0x452821e638d01377ull))); }

  std::uint64_t next_u64() {
    ctr_ += 0x9e3779b97f4a7c15ull;
    return mix(key_ ^ ctr_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // (0, 1) — safe under log()
  double uniform_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without a cached spare: draws are independent of call history.
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

  // [0, n)
  std::int64_t uniform_int(std::int64_t n) {
    // Lemire's multiply-shift with rejection.
    const std::uint64_t range = static_cast<std::uint64_t>(n);
    std::uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * range;
    std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo < range) {
      const std::uint64_t threshold = (0 - range) % range;
      while (lo < threshold) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * range;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::int64_t>(m >> 64);
  }

  template <class It>
  void shuffle(It first, It last) {
    const std::int64_t n = static_cast<std::int64_t>(last - first);
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

  template <class T>
  void fill_normal(T* p, std::size_t n, T mean, T stddev) {
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<T>(mean + stddev * normal());
  }

  template <class T>
  void fill_uniform(T* p, std::size_t n, T lo, T hi) {
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<T>(uniform(lo, hi));
  }

 private:
  struct FromKey {};
  Rng(FromKey, std::uint64_t key) : key_(key) {}

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
};

}  // namespace svq
