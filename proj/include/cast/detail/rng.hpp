#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace cast::detail {

// Every random stream in the library is a 64-bit Mersenne Twister keyed by a
// (seed, stream, index) triple, so a tree or repetition draws the same numbers
// regardless of which thread builds it or in which order.
using Engine = std::mt19937_64;

enum class Stream : std::uint64_t {
  Split = 1,
  Folds = 2,
  Tree = 3,
  NuisanceFolds = 4,
  Shap = 5,
  Refutation = 6,
  Synth = 7,
  SynthTruth = 8,
  Background = 9,
  TreeGroup = 10,
  Nuisance = 11,
};

inline Engine make_engine(std::uint64_t seed, Stream stream,
                          std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Engine(seq);
}

// Child seed for a nested component (one forest among many, one repetition).
inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index) {
  return make_engine(seed, stream, index)();
}

// Uniform draw in [0, 1) from the top 53 bits. Used instead of
// std::uniform_real_distribution so streams are identical across standard
// library implementations.
inline double uniform01(Engine& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Engine& rng, std::size_t n) {
  // Lemire-free simple rejection; n is small relative to 2^64.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

inline double standard_normal(Engine& rng) {
  // Box-Muller; discards the second variate to keep streams simple.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline bool bernoulli(Engine& rng, double p) { return uniform01(rng) < p; }

template <typename T>
void shuffle(std::vector<T>& v, Engine& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

inline std::vector<std::size_t> permutation(std::size_t n, Engine& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  shuffle(p, rng);
  return p;
}

// First k entries of a random permutation of [0, n), i.e. sampling without
// replacement, returned in sorted order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                           std::size_t k,
                                                           Engine& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(p[i], p[i + uniform_index(rng, n - i)]);
  }
  p.resize(k);
  std::sort(p.begin(), p.end());
  return p;
}

// Marsaglia-Tsang gamma sampler (shape >= 1 path plus boost for shape < 1).
inline double gamma(Engine& rng, double shape, double scale) {
  if (shape < 1.0) {
    const double u = std::max(uniform01(rng), 1e-300);
    return gamma(rng, shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = standard_normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform01(rng);
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (std::log(std::max(u, 1e-300)) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
      return d * v * scale;
  }
}

}  // namespace cast::detail
