#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

// Deterministic random source. std::mt19937_64 has a fixed bit stream by
// standard, but the std:: distributions do not, so every distribution here is
// hand-rolled to keep outputs byte-identical across compilers and platforms.

namespace metarec {

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [lo, hi] via rejection sampling (no modulo bias).
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: empty range");
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(engine_());  // full 64-bit range
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  // Standard normal via Box-Muller; both draws consumed, second discarded.
  double normal() {
    double u1 = uniform01();
    const double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643 * u2);
  }

  // Index draw from unnormalized non-negative weights.
  size_t discrete(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw std::invalid_argument("Rng::discrete: negative weight");
      total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("Rng::discrete: all weights zero");
    double r = uniform01() * total;
    for (size_t i = 0; i + 1 < weights.size(); ++i) {
      r -= weights[i];
      if (r < 0.0) return i;
    }
    return weights.size() - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), order randomized.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    if (k > n || k < 0) throw std::invalid_argument("Rng::sample_without_replacement: k out of range");
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = uniform_int(i, n - 1);
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
      out.push_back(pool[static_cast<size_t>(i)]);
    }
    return out;
  }

  // Independent child stream, decorrelated from the parent by a fixed odd tag.
  Rng fork(uint64_t tag) {
    const uint64_t s = engine_() ^ (tag * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull);
    return Rng(s);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace metarec
