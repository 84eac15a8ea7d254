#pragma once

#include "rsm/types.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace rsm {

// Thin wrapper over mt19937_64 with the handful of draws the library needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  Vec2 normal2() {
    const double x = normal();
    const double y = normal();
    return {x, y};
  }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Two standard normals that depend only on the key (Box-Muller over two SplitMix64 draws).
inline Vec2 keyed_normal2(std::uint64_t key) {
  constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
  const double u1 = static_cast<double>((mix64(key) >> 11) + 1) * kScale;  // (0, 1]
  const double u2 = static_cast<double>(mix64(key ^ 0xd1b54a32d192ed03ULL) >> 11) * kScale;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(th), r * std::sin(th)};
}

}  // namespace rsm
