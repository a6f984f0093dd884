#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace mixnorm {

// Deterministic xoshiro256++ generator seeded through splitmix64.
// All randomness in the library flows through this class so that runs are
// reproducible across platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
  }

  // Derives an independent stream from (seed, path...). Used to give each
  // normalization layer its own stream keyed by (global seed, layer id, step).
  static Rng stream(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t h = seed;
    for (uint64_t p : path) {
      uint64_t t = p + 0x9e3779b97f4a7c15ull;
      h ^= splitmix64(t);
      h = splitmix64(h);
    }
    return Rng(h);
  }

  uint64_t next() {
    uint64_t* s = state_.data();
    uint64_t result = rotl(s[0] + s[3], 23) + s[0];
    uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform on {0, ..., n-1}, unbiased.
  int uniform_int(int n) {
    using u128 = unsigned __int128;
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t x = next();
    u128 m = static_cast<u128>(x) * un;
    auto lo = static_cast<uint64_t>(m);
    if (lo < un) {
      uint64_t threshold = (0 - un) % un;
      while (lo < threshold) {
        x = next();
        m = static_cast<u128>(x) * un;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<int>(m >> 64);
  }

  // Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }

  // k distinct indices drawn from {0, ..., n-1} by partial Fisher-Yates.
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + uniform_int(n - i);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace mixnorm
