#pragma once

// Isotropic 2D Gaussian mixtures with closed-form linear-reward tilts, noised marginals,
// exact scores and the exact guidance field Psi* = s*_t - s^ref_t.

#include "rsm/flow_schedules.hpp"
#include "rsm/rng.hpp"
#include "rsm/types.hpp"

#include <vector>

namespace rsm {

struct GaussianMixture {
  std::vector<double> weights;
  std::vector<Vec2> means;
  double component_var = 1.0;

  std::size_t size() const { return weights.size(); }
  // Throws DomainError unless weights form a simplex (1e-12), var > 0 and sizes agree.
  void validate() const;
};

struct LinearReward {
  Vec2 slope = Vec2::Zero();
  double intercept = 0.0;

  double operator()(const Vec2& x) const { return slope.dot(x) + intercept; }
};

struct TiltedPair {
  GaussianMixture reference;
  GaussianMixture target;
  LinearReward reward;
  double alpha = 1.0;

  static TiltedPair make(GaussianMixture reference, LinearReward reward, double alpha);
};

GaussianMixture tilt(const GaussianMixture& ref, const LinearReward& reward, double alpha);

// Law of a x_0 + b x_1 with x_0 ~ gmm, x_1 ~ N(0, I).
GaussianMixture marginal_ab(const GaussianMixture& gmm, double a, double b);
GaussianMixture marginal_at(const GaussianMixture& gmm, const FlowSpec& flow, double t);

double logpdf(const GaussianMixture& gmm, const Vec2& x);
Vec2 score(const GaussianMixture& gmm, const Vec2& x);
// Hessian of log p (the Jacobian of the score).
Mat2 score_jacobian(const GaussianMixture& gmm, const Vec2& x);
// Component responsibilities at x (log-sum-exp stabilised).
std::vector<double> responsibilities(const GaussianMixture& gmm, const Vec2& x);

// (x + b^2 s) / a. Throws SingularityError when a <= 0.
Vec2 tweedie(const Vec2& x_t, const Vec2& s, double a, double b);

Vec2 psi_star(const TiltedPair& pair, const FlowSpec& flow, double t, const Vec2& x);
Vec2 psi_star_ab(const TiltedPair& pair, double a, double b, const Vec2& x);

// E_p[r]; closed form for a linear reward.
double expected_reward(const GaussianMixture& gmm, const LinearReward& reward);

Vec2 sample(const GaussianMixture& gmm, Rng& rng);

// Three unit-variance nodes on a circle of radius 2 sqrt(3), equal weights.
GaussianMixture toy_reference();
// r(x) = x[0]/2 + 3.
LinearReward toy_reward();

}  // namespace rsm
