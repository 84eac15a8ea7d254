#pragma once

// 2-Wasserstein distances used by the sampler and training checks.

#include "rsm/mixture_oracle.hpp"
#include "rsm/rng.hpp"
#include "rsm/types.hpp"

#include <vector>

namespace rsm {

// Closed form between N(m1, C1) and N(m2, C2).
double gaussian_w2(const Vec2& m1, const Mat2& c1, const Vec2& m2, const Mat2& c2);

// Bures distance between the moment-matched Gaussian of the samples and N(mean, cov).
double empirical_gaussian_w2(const std::vector<Vec2>& samples, const Vec2& mean, const Mat2& cov);

// Exact W2 between two equal-size empirical measures (Hungarian algorithm, O(n^3)).
double assignment_w2(const std::vector<Vec2>& a, const std::vector<Vec2>& b);

// Couples a and b block by block (contiguous blocks of `block` points) with exact assignments.
// The result is a valid coupling, hence an upper bound on the empirical W2.
double blocked_w2(const std::vector<Vec2>& a, const std::vector<Vec2>& b, std::size_t block);

// blocked_w2 against an equal number of exact draws from the mixture.
double mixture_w2(const std::vector<Vec2>& samples, const GaussianMixture& gmm, std::uint64_t seed,
                  std::size_t block = 1000);

}  // namespace rsm
