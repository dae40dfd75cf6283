#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace albedo {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Independent stream seed for (base, tag, index). Every stochastic component
// of a run derives its seed this way from the run seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : tag) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return splitmix64(splitmix64(base ^ h) + index);
}

inline Rng make_rng(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(base, tag, index));
}

template <class T>
void fill_normal(std::span<T> out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : out) v = static_cast<T>(normal(rng));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline bool coin(Rng& rng, double p = 0.5) { return std::bernoulli_distribution(p)(rng); }

}  // namespace albedo
