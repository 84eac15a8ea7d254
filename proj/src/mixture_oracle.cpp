#include "rsm/mixture_oracle.hpp"

#include "rsm/errors.hpp"

#include <cmath>
#include <algorithm>
#include <limits>
#include <numbers>

namespace rsm {

void GaussianMixture::validate() const {
  if (weights.empty()) throw DomainError("mixture needs at least one component");
  if (weights.size() != means.size()) throw DomainError("mixture weights/means size mismatch");
  if (!(component_var > 0.0)) throw DomainError("mixture component variance must be positive");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw DomainError("mixture weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("mixture weights must sum to 1");
}

TiltedPair TiltedPair::make(GaussianMixture reference, LinearReward reward, double alpha) {
  reference.validate();
  TiltedPair p;
  p.target = tilt(reference, reward, alpha);
  p.reference = std::move(reference);
  p.reward = reward;
  p.alpha = alpha;
  return p;
}

GaussianMixture tilt(const GaussianMixture& ref, const LinearReward& reward, double alpha) {
  if (!(alpha > 0.0)) throw DomainError("tilt: alpha must be positive");
  ref.validate();
  const Vec2& c = reward.slope;
  const double v = ref.component_var;
  GaussianMixture out = ref;
  std::vector<double> logw(ref.size());
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < ref.size(); ++k) {
    out.means[k] = ref.means[k] + (v / alpha) * c;
    logw[k] = std::log(ref.weights[k]) + c.dot(ref.means[k]) / alpha + v * c.squaredNorm() / (2.0 * alpha * alpha);
    hi = std::max(hi, logw[k]);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < ref.size(); ++k) {
    out.weights[k] = std::exp(logw[k] - hi);
    total += out.weights[k];
  }
  for (double& w : out.weights) w /= total;
  return out;
}

GaussianMixture marginal_ab(const GaussianMixture& gmm, double a, double b) {
  GaussianMixture out = gmm;
  for (auto& m : out.means) m *= a;
  out.component_var = a * a * gmm.component_var + b * b;
  return out;
}

GaussianMixture marginal_at(const GaussianMixture& gmm, const FlowSpec& flow, double t) {
  const auto c = ab_coeffs(flow, t);
  return marginal_ab(gmm, c.a, c.b);
}

namespace {

// log(w_k N(x; mu_k, v I)) for each k, and their log-sum-exp.
double component_logs(const GaussianMixture& gmm, const Vec2& x, std::vector<double>& out) {
  const double v = gmm.component_var;
  const double norm = -std::log(2.0 * std::numbers::pi * v);
  out.resize(gmm.size());
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < gmm.size(); ++k) {
    out[k] = gmm.weights[k] > 0.0
                 ? std::log(gmm.weights[k]) + norm - (x - gmm.means[k]).squaredNorm() / (2.0 * v)
                 : -std::numeric_limits<double>::infinity();
    hi = std::max(hi, out[k]);
  }
  double acc = 0.0;
  for (double l : out) acc += std::exp(l - hi);
  return hi + std::log(acc);
}

}  // namespace

double logpdf(const GaussianMixture& gmm, const Vec2& x) {
  std::vector<double> logs;
  return component_logs(gmm, x, logs);
}

std::vector<double> responsibilities(const GaussianMixture& gmm, const Vec2& x) {
  std::vector<double> logs;
  const double lse = component_logs(gmm, x, logs);
  for (double& l : logs) l = std::exp(l - lse);
  return logs;
}

Vec2 score(const GaussianMixture& gmm, const Vec2& x) {
  const auto r = responsibilities(gmm, x);
  Vec2 mean = Vec2::Zero();
  for (std::size_t k = 0; k < gmm.size(); ++k) mean += r[k] * gmm.means[k];
  return (mean - x) / gmm.component_var;
}

Mat2 score_jacobian(const GaussianMixture& gmm, const Vec2& x) {
  // -I/v + Cov_r[mu] / v^2
  const auto r = responsibilities(gmm, x);
  const double v = gmm.component_var;
  Vec2 mean = Vec2::Zero();
  for (std::size_t k = 0; k < gmm.size(); ++k) mean += r[k] * gmm.means[k];
  Mat2 cov = Mat2::Zero();
  for (std::size_t k = 0; k < gmm.size(); ++k) {
    const Vec2 d = gmm.means[k] - mean;
    cov += r[k] * d * d.transpose();
  }
  return cov / (v * v) - Mat2::Identity() / v;
}

Vec2 tweedie(const Vec2& x_t, const Vec2& s, double a, double b) {
  if (!(a > 0.0)) throw SingularityError("tweedie: a_t must be positive");
  return (x_t + b * b * s) / a;
}

Vec2 psi_star_ab(const TiltedPair& pair, double a, double b, const Vec2& x) {
  return score(marginal_ab(pair.target, a, b), x) - score(marginal_ab(pair.reference, a, b), x);
}

Vec2 psi_star(const TiltedPair& pair, const FlowSpec& flow, double t, const Vec2& x) {
  const auto c = ab_coeffs(flow, t);
  return psi_star_ab(pair, c.a, c.b, x);
}

double expected_reward(const GaussianMixture& gmm, const LinearReward& reward) {
  double acc = reward.intercept;
  for (std::size_t k = 0; k < gmm.size(); ++k) acc += gmm.weights[k] * reward.slope.dot(gmm.means[k]);
  return acc;
}

Vec2 sample(const GaussianMixture& gmm, Rng& rng) {
  const double u = rng.uniform();
  std::size_t k = 0;
  double acc = gmm.weights[0];
  while (u >= acc && k + 1 < gmm.size()) acc += gmm.weights[++k];
  return gmm.means[k] + std::sqrt(gmm.component_var) * rng.normal2();
}

GaussianMixture toy_reference() {
  const double r3 = std::sqrt(3.0);
  GaussianMixture g;
  g.weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  g.means = {Vec2(3.0, -r3), Vec2(-3.0, -r3), Vec2(0.0, 2.0 * r3)};
  g.component_var = 1.0;
  return g;
}

LinearReward toy_reward() { return LinearReward{Vec2(0.5, 0.0), 3.0}; }

}  // namespace rsm
