#pragma once

#include <cstdint>
#include <random>

#include "imo/tensor.hpp"

namespace imo {

using Rng = std::mt19937_64;

/// Independent stream seed derived from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Tensor normal_tensor(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.data) v = dist(rng);
  return t;
}

}  // namespace imo
