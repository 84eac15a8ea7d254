#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace rsm {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

// Latent dimension of every toy problem in this library.
inline constexpr int kDim = 2;

// Pairwise (cascade) summation: order-fixed, so reductions are reproducible
// regardless of how the terms were produced.
double pairwise_sum(std::span<const double> values);
Vec2 pairwise_sum(std::span<const Vec2> values);

inline Vec2 pairwise_mean(std::span<const Vec2> values) {
  return values.empty() ? Vec2::Zero().eval()
                        : (pairwise_sum(values) / static_cast<double>(values.size())).eval();
}

// SplitMix64 finaliser, used to derive independent RNG streams from a seed and a path.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t stream_key(std::uint64_t parent, std::uint64_t child) {
  return mix64(parent ^ mix64(child + 0x632be59bd9b4e019ULL));
}

}  // namespace rsm
