#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace topoguide {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream for (seed, index), e.g. one per sample or per field.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t salt = 0) {
  return Rng(splitmix64(splitmix64(seed ^ splitmix64(salt)) + index));
}

inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

}  // namespace topoguide
