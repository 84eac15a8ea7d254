#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rsm/errors.hpp"
#include "rsm/mixture_oracle.hpp"
#include "rsm/rng.hpp"

#include <cmath>
#include <numbers>

using namespace rsm;
using doctest::Approx;

namespace {

GaussianMixture single(const Vec2& mu, double var = 1.0) { return {{1.0}, {mu}, var}; }

// Grid quadrature of w_k N(x; mu_k, v I) exp(r(x)/alpha), normalised over components.
std::vector<double> grid_tilt_weights(const GaussianMixture& g, const LinearReward& r, double alpha, int nodes,
                                      double lo, double hi) {
  const double h = (hi - lo) / (nodes - 1);
  std::vector<double> mass(g.size(), 0.0);
  for (std::size_t c = 0; c < g.size(); ++c) {
    double acc = 0.0;
    for (int u = 0; u < nodes; ++u) {
      for (int v = 0; v < nodes; ++v) {
        const Vec2 x(lo + u * h, lo + v * h);
        acc += std::exp(-0.5 * (x - g.means[c]).squaredNorm() / g.component_var + r(x) / alpha);
      }
    }
    mass[c] = g.weights[c] * acc * h * h / (2 * std::numbers::pi * g.component_var);
  }
  double tot = 0.0;
  for (double m : mass) tot += m;
  for (double& m : mass) m /= tot;
  return mass;
}

Vec2 fd_grad(const std::function<double(const Vec2&)>& f, const Vec2& x, double h = 1e-5) {
  Vec2 g;
  for (int d = 0; d < 2; ++d) {
    Vec2 p = x, m = x;
    p[d] += h;
    m[d] -= h;
    g[d] = (f(p) - f(m)) / (2 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("validate: simplex, sizes, variance") {
  CHECK_NOTHROW(toy_reference().validate());
  CHECK_THROWS_AS((GaussianMixture{{0.5, 0.6}, {Vec2::Zero(), Vec2::Ones()}, 1.0}).validate(), DomainError);
  CHECK_THROWS_AS((GaussianMixture{{1.0}, {Vec2::Zero(), Vec2::Ones()}, 1.0}).validate(), DomainError);
  CHECK_THROWS_AS((GaussianMixture{{1.0}, {Vec2::Zero()}, 0.0}).validate(), DomainError);
  CHECK_THROWS_AS((GaussianMixture{{}, {}, 1.0}).validate(), DomainError);
}

TEST_CASE("tilt: single Gaussian, zero slope, and frozen toy weights") {
  const auto t = tilt(single(Vec2::Zero()), {Vec2(1, 0), 0.0}, 1.0);
  CHECK(t.means[0].isApprox(Vec2(1, 0), 1e-15));
  CHECK(t.weights[0] == 1.0);

  const auto same = tilt(toy_reference(), {Vec2::Zero(), 5.0}, 0.3);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(same.weights[k] == Approx(1.0 / 3).epsilon(1e-15));
    CHECK(same.means[k].isApprox(toy_reference().means[k], 1e-15));
  }

  const auto toy = tilt(toy_reference(), toy_reward(), 1.0);
  const double gold[3] = {0.78559703458927586, 0.039112573270687452, 0.17529039214003669};
  const auto grid = grid_tilt_weights(toy_reference(), toy_reward(), 1.0, 400, -12.0, 12.0);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(toy.weights[k] == Approx(gold[k]).epsilon(1e-14));
    CHECK(std::abs(grid[k] - gold[k]) < 1e-6);
    CHECK(toy.means[k].isApprox(toy_reference().means[k] + Vec2(0.5, 0.0), 1e-15));
  }
}

TEST_CASE("property: tilt matches grid integration on random small mixtures") {
  Rng rng(5);
  for (int n = 0; n < 20; ++n) {
    GaussianMixture g;
    const int k = 1 + static_cast<int>(rng.index(3));
    double tot = 0.0;
    for (int c = 0; c < k; ++c) {
      g.weights.push_back(0.2 + rng.uniform());
      tot += g.weights.back();
      g.means.push_back(Vec2(-3 + 6 * rng.uniform(), -3 + 6 * rng.uniform()));
    }
    for (double& w : g.weights) w /= tot;
    g.component_var = 0.5 + rng.uniform();
    const LinearReward r{Vec2(-1 + 2 * rng.uniform(), -1 + 2 * rng.uniform()), rng.normal()};
    const double alpha = 0.5 + rng.uniform();
    const auto t = tilt(g, r, alpha);
    const auto grid = grid_tilt_weights(g, r, alpha, 400, -12.0, 12.0);
    for (int c = 0; c < k; ++c) CHECK(std::abs(grid[c] - t.weights[c]) <= 1e-6 * t.weights[c]);
  }
}

TEST_CASE("marginal_ab: VP and RF examples; identity at t = 0") {
  const auto vp = marginal_ab(single(Vec2(4, 0)), 0.5, std::sqrt(0.75));
  CHECK(vp.means[0].isApprox(Vec2(2, 0)));
  CHECK(vp.component_var == Approx(1.0).epsilon(1e-15));
  const auto rf = marginal_at(single(Vec2(4, 0)), FlowSpec::rectified(), 0.5);
  CHECK(rf.means[0].isApprox(Vec2(2, 0)));
  CHECK(rf.component_var == Approx(0.5).epsilon(1e-15));
  const auto id = marginal_at(toy_reference(), FlowSpec::vp(), 0.0);
  for (std::size_t k = 0; k < 3; ++k) CHECK(id.means[k] == toy_reference().means[k]);
  CHECK(id.component_var == 1.0);
}

TEST_CASE("score: trivial cases, toy origin, and FD property") {
  CHECK(score(single(Vec2::Zero()), Vec2(1, 2)).isApprox(Vec2(-1, -2)));
  const GaussianMixture sym{{0.5, 0.5}, {Vec2(-2, 0), Vec2(2, 0)}, 1.0};
  for (double y : {-1.5, 0.3, 2.0}) {
    const Vec2 s = score(sym, Vec2(0, y));
    CHECK(std::abs(s[0]) < 1e-15);
    CHECK(s[1] == Approx(-y).epsilon(1e-14));
  }
  // Toy origin: the means sum to zero and the mixture is symmetric about the y axis.
  const GaussianMixture toy = toy_reference();
  const Vec2 s0 = score(toy, Vec2::Zero());
  const Vec2 fd0 = fd_grad([&](const Vec2& x) { return logpdf(toy, x); }, Vec2::Zero());
  CHECK(s0.norm() < 1e-12);
  CHECK((s0 - fd0).norm() < 1e-6);

  Rng rng(3);
  for (int n = 0; n < 100; ++n) {
    const double t = rng.uniform() * 0.95;
    const auto m = marginal_at(tilt(toy, toy_reward(), 1.0), FlowSpec::vp(), t);
    const Vec2 x = 4.0 * rng.normal2();
    const Vec2 fd = fd_grad([&](const Vec2& y) { return logpdf(m, y); }, x);
    CHECK((score(m, x) - fd).norm() <= 1e-6 * std::max(1.0, fd.norm()));
    // Jacobian against FD of the analytic score.
    const Mat2 J = score_jacobian(m, x);
    for (int d = 0; d < 2; ++d) {
      Vec2 p = x, q = x;
      p[d] += 1e-5;
      q[d] -= 1e-5;
      CHECK((J.col(d) - (score(m, p) - score(m, q)) / 2e-5).norm() < 1e-6 * std::max(1.0, J.norm()));
    }
  }
}

TEST_CASE("score: log-sum-exp keeps far points finite") {
  const GaussianMixture toy = toy_reference();
  const Vec2 far(80, -60);
  CHECK(std::isfinite(logpdf(toy, far)));
  CHECK(score(toy, far).allFinite());
  const auto r = responsibilities(toy, far);
  CHECK(r[0] == Approx(1.0));
}

TEST_CASE("logpdf: origin, symmetric midpoint, frozen toy value with grid normalisation") {
  CHECK(logpdf(single(Vec2::Zero()), Vec2::Zero()) == Approx(-std::log(2 * std::numbers::pi)).epsilon(1e-15));
  const GaussianMixture sym{{0.5, 0.5}, {Vec2(-1, 0), Vec2(1, 0)}, 1.0};
  CHECK(logpdf(sym, Vec2::Zero()) == Approx(-std::log(2 * std::numbers::pi) - 0.5).epsilon(1e-15));
  const GaussianMixture toy = toy_reference();
  CHECK(logpdf(toy, Vec2(3, -std::sqrt(3.0))) == Approx(-2.9364893246174961).epsilon(1e-14));
  double mass = 0.0;
  const double h = 24.0 / 399;
  for (int u = 0; u < 400; ++u) {
    for (int v = 0; v < 400; ++v) mass += std::exp(logpdf(toy, Vec2(-12 + u * h, -12 + v * h)));
  }
  CHECK(mass * h * h == Approx(1.0).epsilon(1e-9));
}

TEST_CASE("tweedie: boundaries, Gaussian conjugacy, toy golden with MC oracle") {
  CHECK(tweedie(Vec2(2, 4), Vec2(7, 7), 2.0, 0.0).isApprox(Vec2(1, 2)));
  CHECK_THROWS_AS(tweedie(Vec2(1, 1), Vec2(0, 0), 0.0, 1.0), SingularityError);

  const Vec2 mu(1.5, -0.5);
  for (double t : {0.1, 0.5, 0.9}) {
    const auto c = ab_coeffs(FlowSpec::vp(), t);
    const Vec2 x(0.3, 1.1);
    const Vec2 post = mu + c.a / (c.a * c.a + c.b * c.b) * (x - c.a * mu);
    const Vec2 got = tweedie(x, score(marginal_ab(single(mu), c.a, c.b), x), c.a, c.b);
    CHECK((got - post).norm() < 1e-12);
  }

  const double a = std::sqrt(0.5), b = std::sqrt(0.5);
  const Vec2 x(1, 1);
  const GaussianMixture toy = toy_reference();
  const Vec2 gold(0.96469408750045894, 1.9799942378299822);
  const Vec2 got = tweedie(x, score(marginal_ab(toy, a, b), x), a, b);
  CHECK((got - gold).norm() < 1e-13);
  // Importance-weighted Monte-Carlo posterior mean, 1e6 prior draws.
  Rng rng(17);
  double wsum = 0.0, w2sum = 0.0;
  Vec2 acc = Vec2::Zero();
  std::vector<std::pair<double, Vec2>> draws;
  draws.reserve(1000000);
  for (int n = 0; n < 1000000; ++n) {
    const Vec2 x0 = sample(toy, rng);
    const double w = std::exp(-0.5 * (x - a * x0).squaredNorm() / (b * b));
    wsum += w;
    w2sum += w * w;
    acc += w * x0;
    draws.emplace_back(w, x0);
  }
  const Vec2 mc = acc / wsum;
  Vec2 var = Vec2::Zero();
  for (const auto& [w, x0] : draws) var += (w / wsum) * (w / wsum) * (x0 - mc).cwiseAbs2();
  const Vec2 se = var.cwiseSqrt();
  CHECK(std::abs(mc[0] - gold[0]) < 3 * se[0] + 1e-12);
  CHECK(std::abs(mc[1] - gold[1]) < 3 * se[1] + 1e-12);
}

TEST_CASE("psi_star: single-Gaussian pair, prior limit, toy golden via FD") {
  const FlowSpec vp = FlowSpec::vp();
  const TiltedPair sg = TiltedPair::make(single(Vec2::Zero()), {Vec2(1, 0), 0.0}, 1.0);
  for (double t : {0.0, 0.3, 0.7}) {
    const Vec2 p = psi_star(sg, vp, t, Vec2(0.4, -2.0));
    CHECK(p.isApprox(Vec2(std::sqrt(vp.alpha_bar(t)), 0.0), 1e-12));
  }
  CHECK(psi_star(sg, vp, 1.0, Vec2(1, 1)).norm() < 0.01);

  const TiltedPair toy = TiltedPair::make(toy_reference(), toy_reward(), 1.0);
  const double a = std::sqrt(0.5), b = std::sqrt(0.5);
  const Vec2 gold(1.3255339217537108, -0.20110057561369659);
  const Vec2 got = psi_star_ab(toy, a, b, Vec2::Zero());
  CHECK((got - gold).norm() < 1e-13);
  const auto mt = marginal_ab(toy.target, a, b), mr = marginal_ab(toy.reference, a, b);
  const Vec2 fd = fd_grad([&](const Vec2& x) { return logpdf(mt, x) - logpdf(mr, x); }, Vec2::Zero());
  CHECK((fd - gold).norm() < 1e-8);
}

TEST_CASE("psi_star: alpha scaling on the single-Gaussian pair") {
  for (double alpha : {0.5, 1.0, 4.0}) {
    const TiltedPair sg = TiltedPair::make(single(Vec2::Zero()), {Vec2(1, 0), 0.0}, alpha);
    CHECK(psi_star_ab(sg, 0.6, 0.8, Vec2(1, 1)).isApprox(Vec2(0.6 / alpha, 0.0), 1e-12));
  }
}

TEST_CASE("property: optimal-kernel mean shift and discretisation gap of psi_star") {
  // Stein on the Gaussian reference kernel: E*[x'] - mu_ref = (sigma^2/alpha) E*[grad V'] exactly,
  // and (sigma^2/Omega) E*[Psi*_{i-1}] approaches Psi*_i as the grid is refined.
  const TiltedPair toy = TiltedPair::make(toy_reference(), toy_reward(), 1.0);
  const FlowSpec vp = FlowSpec::vp();
  const Vec2 x(0.5, -0.3);
  const double t = 0.3;
  std::vector<double> gaps;
  for (int n_steps : {50, 500, 5000}) {
    const double dt = 1.0 / n_steps;
    const double ab = vp.alpha_bar(t), abp = vp.alpha_bar(t - dt);
    const double sig = std::sqrt((1 - abp) / (1 - ab) * (1 - ab / abp));
    const KernelCoeffs k = ddim_kernel(ab, abp, sig);
    const double a = std::sqrt(ab), b = std::sqrt(1 - ab), ap = std::sqrt(abp), bp = std::sqrt(1 - abp);
    const auto ref_t = marginal_ab(toy.reference, a, b);
    const Vec2 mu = k.kappa * x + k.omega * score(ref_t, x);
    const auto mr = marginal_ab(toy.reference, ap, bp), mt = marginal_ab(toy.target, ap, bp);
    Rng rng(23 + n_steps);
    const int M = 200000;
    std::vector<double> w(M);
    std::vector<Vec2> xs(M), gv(M);
    double wsum = 0.0;
    for (int m = 0; m < M; ++m) {
      xs[m] = mu + k.sigma * rng.normal2();
      w[m] = std::exp(logpdf(mt, xs[m]) - logpdf(mr, xs[m]));
      gv[m] = psi_star_ab(toy, ap, bp, xs[m]);  // grad V' / alpha
      wsum += w[m];
    }
    Vec2 mean_x = Vec2::Zero(), mean_g = Vec2::Zero();
    for (int m = 0; m < M; ++m) {
      mean_x += w[m] / wsum * xs[m];
      mean_g += w[m] / wsum * gv[m];
    }
    // Self-normalised IS standard error of the difference statistic.
    Vec2 var = Vec2::Zero();
    for (int m = 0; m < M; ++m) {
      const Vec2 d = (xs[m] - mu) - k.sigma * k.sigma * gv[m] - (mean_x - mu - k.sigma * k.sigma * mean_g);
      var += (w[m] / wsum) * (w[m] / wsum) * d.cwiseAbs2();
    }
    const Vec2 diff = (mean_x - mu) - k.sigma * k.sigma * mean_g;
    CHECK(std::abs(diff[0]) < 3 * std::sqrt(var[0]) + 1e-15);
    CHECK(std::abs(diff[1]) < 3 * std::sqrt(var[1]) + 1e-15);

    const Vec2 psi_i = psi_star_ab(toy, a, b, x);
    const double gap = (k.sigma * k.sigma / k.omega * mean_g - psi_i).norm();
    gaps.push_back(gap);
  }
  // First order in the step size: each tenfold refinement cuts the gap about tenfold.
  for (std::size_t g = 1; g < gaps.size(); ++g) CHECK(gaps[g - 1] / gaps[g] == Approx(10.0).epsilon(0.2));
}

TEST_CASE("expected_reward and sampling") {
  const TiltedPair toy = TiltedPair::make(toy_reference(), toy_reward(), 1.0);
  CHECK(expected_reward(toy.reference, toy.reward) == Approx(3.0).epsilon(1e-15));
  CHECK(expected_reward(toy.target, toy.reward) == Approx(4.3697266919778826).epsilon(1e-14));
  Rng rng(9);
  double acc = 0.0;
  const int n = 200000;
  for (int k = 0; k < n; ++k) acc += toy.reward(sample(toy.target, rng));
  // Reward sd under the target is below 2; 4 SE band.
  CHECK(std::abs(acc / n - 4.3697266919778826) < 4 * 2.0 / std::sqrt(n));
}
