#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rsm/errors.hpp"
#include "rsm/flow_schedules.hpp"
#include "rsm/rng.hpp"

#include <cmath>

using namespace rsm;
using doctest::Approx;

namespace {

// Independent oracle: closed-form integral of the linear beta schedule.
double vp_alpha_bar_exact(double t, double bmin = 0.1, double bmax = 20.0) {
  return std::exp(-(bmin * t + 0.5 * (bmax - bmin) * t * t));
}

}  // namespace

TEST_CASE("ab_coeffs: rectified flow definition") {
  const auto c = ab_coeffs(FlowSpec::rectified(), 0.5);
  CHECK(c.a == 0.5);
  CHECK(c.b == 0.5);
  CHECK(c.a_dot == -1.0);
  CHECK(c.b_dot == 1.0);
}

TEST_CASE("ab_coeffs: VP boundary and golden midpoint") {
  const FlowSpec vp = FlowSpec::vp();
  const auto c0 = ab_coeffs(vp, 0.0);
  CHECK(c0.a == 1.0);
  CHECK(c0.b == 0.0);
  // Golden (a, b) at t = 0.5 from exp(-int beta), frozen from a 30-digit evaluation.
  const double a_gold = 0.28118288079675237;
  const double b_gold = 0.95965420206803625;
  CHECK(std::sqrt(vp_alpha_bar_exact(0.5)) == Approx(a_gold).epsilon(1e-15));
  const auto c = ab_coeffs(vp, 0.5);
  CHECK(c.a == Approx(a_gold).epsilon(1e-12));
  CHECK(c.b == Approx(b_gold).epsilon(1e-12));
}

TEST_CASE("ab_coeffs: VP variance preservation and monotone alpha_bar") {
  const FlowSpec vp = FlowSpec::vp();
  double prev = 2.0;
  for (int k = 0; k <= 1000; ++k) {
    const double t = k / 1000.0;
    const auto c = ab_coeffs(vp, t);
    CHECK(std::abs(c.a * c.a + c.b * c.b - 1.0) < 1e-12);
    const double ab = vp.alpha_bar(t);
    CHECK(ab < prev);
    prev = ab;
    CHECK(ab == Approx(vp_alpha_bar_exact(t)).epsilon(1e-9));
  }
}

TEST_CASE("ab_coeffs: a_t > 0 for t < 1 and domain errors") {
  for (const FlowSpec& f : {FlowSpec::vp(), FlowSpec::ve(), FlowSpec::rectified()}) {
    CHECK(ab_coeffs(f, 0.999).a > 0.0);
    CHECK_THROWS_AS(ab_coeffs(f, -0.1), DomainError);
    CHECK_THROWS_AS(ab_coeffs(f, 1.1), DomainError);
  }
}

TEST_CASE("ab_coeffs: VE uses b^2 = smin^2 ((smax/smin)^{2t} - 1)") {
  const auto c = ab_coeffs(FlowSpec::ve(0.01, 50.0), 0.5);
  CHECK(c.a == 1.0);
  CHECK(c.b == Approx(0.01 * std::sqrt(std::pow(5000.0, 1.0) - 1.0)).epsilon(1e-12));
}

TEST_CASE("ab_coeffs: derivatives match finite differences") {
  for (const FlowSpec& f : {FlowSpec::vp(), FlowSpec::ve(), FlowSpec::rectified()}) {
    for (double t : {0.2, 0.5, 0.8}) {
      const double h = 1e-6;
      const auto c = ab_coeffs(f, t), p = ab_coeffs(f, t + h), m = ab_coeffs(f, t - h);
      CHECK(c.a_dot == Approx((p.a - m.a) / (2 * h)).epsilon(1e-4));
      CHECK(c.b_dot == Approx((p.b - m.b) / (2 * h)).epsilon(1e-4));
    }
  }
}

TEST_CASE("TimeGrid invariants") {
  for (double shift : {1.0, 3.0}) {
    const TimeGrid g = TimeGrid::uniform(50, shift);
    CHECK(g.n_steps() == 50);
    CHECK(g.t(0) == 0.0);
    CHECK(g.t(50) == 1.0);
    double sum = 0.0;
    for (int i = 1; i <= 50; ++i) {
      CHECK(g.dt(i) > 0.0);
      sum += g.dt(i);
    }
    CHECK(sum == Approx(1.0).epsilon(1e-14));
  }
  CHECK_THROWS_AS(TimeGrid::from_times({0.0, 0.5, 0.5, 1.0}), DomainError);
  CHECK_THROWS_AS(TimeGrid::from_times({0.1, 1.0}), DomainError);
  CHECK_THROWS_AS(TimeGrid::uniform(0), DomainError);
}

TEST_CASE("NoiseSpec: sigma = sigma_tilde sqrt(dt), zero iff ODE") {
  const FlowSpec rf = FlowSpec::rectified();
  const TimeGrid g = TimeGrid::uniform(10);
  for (NoiseRule rule : {NoiseRule::ODE, NoiseRule::ConstDiffusion, NoiseRule::FlowGRPO}) {
    const NoiseSpec n{rule, 0.7};
    for (int i = 1; i < 10; ++i) {
      const double s = n.sigma(rf, g, i);
      CHECK(s >= 0.0);
      CHECK(s == Approx(n.sigma_tilde(rf, g, i) * std::sqrt(g.dt(i))).epsilon(1e-15));
      CHECK((s == 0.0) == (rule == NoiseRule::ODE));
    }
  }
  // DDPM-equivalent: sigma^2 = (1 - ab')/(1 - ab) (1 - ab/ab').
  const FlowSpec vp = FlowSpec::vp();
  const TimeGrid g50 = TimeGrid::uniform(50);
  const NoiseSpec ddpm{NoiseRule::DDPMEquivalent, 0.0};
  for (int i = 1; i <= 50; ++i) {
    const double ab = vp.alpha_bar(g50.t(i)), abp = vp.alpha_bar(g50.t(i - 1));
    CHECK(ddpm.sigma(vp, g50, i) == Approx(std::sqrt((1 - abp) / (1 - ab) * (1 - ab / abp))).epsilon(1e-13));
  }
}

TEST_CASE("ddim_kernel: trivial and golden values") {
  const auto id = ddim_kernel(0.6, 0.6, 0.0);
  CHECK(id.kappa == Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(id.omega) < 1e-15);

  const auto k0 = ddim_kernel(0.5, 0.8, 0.0);
  CHECK(k0.kappa == Approx(1.2649110640673517).epsilon(1e-14));
  CHECK(k0.omega == Approx(0.31622776601683793).epsilon(1e-14));
  CHECK(k0.delta == Approx(1.0 / std::sqrt(0.5)).epsilon(1e-15));
  CHECK_FALSE(k0.w.has_value());

  const auto k1 = ddim_kernel(0.5, 0.8, 0.1);
  CHECK(k1.omega == Approx(0.32423483188522704).epsilon(1e-14));
  CHECK(k1.sigma == 0.1);
  // Oracle: Omega read off the directly-coded DDIM step as the coefficient of s.
  auto step = [](double s) {
    const double eps_hat = -std::sqrt(0.5) * s;
    const double x0 = (0.0 - std::sqrt(0.5) * eps_hat) / std::sqrt(0.5);
    return std::sqrt(0.8) * x0 + std::sqrt(1.0 - 0.8 - 0.01) * eps_hat;
  };
  CHECK(step(1.0) - step(0.0) == Approx(k1.omega).epsilon(1e-13));
}

TEST_CASE("ddim_kernel: error contract") {
  CHECK_THROWS_AS(ddim_kernel(0.5, 0.8, 0.5), InvalidNoiseError);
  CHECK_THROWS_AS(ddim_kernel(0.8, 0.5, 0.0), DomainError);
  CHECK_THROWS_AS(ddim_kernel(0.0, 0.5, 0.0), DomainError);
}

TEST_CASE("euler_rf_kernel: trivial substitution, frozen w, singular ends") {
  const auto k = euler_rf_kernel(0.5, 0.1, 0.0);
  CHECK(k.kappa == Approx(1.2).epsilon(1e-15));
  CHECK(k.omega == Approx(0.1).epsilon(1e-15));
  CHECK(k.delta == Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(sampler_weight(k), UndefinedWeightError);

  // w = Omega delta / sigma with Omega = t dt/(1-t) + sigma^2/2 = 0.01 + 0.005, sigma = 0.1.
  const auto kw = euler_rf_kernel(0.5, 0.01, 1.0);
  CHECK(kw.omega == Approx(0.015).epsilon(1e-14));
  CHECK(sampler_weight(kw) == Approx(0.15).epsilon(1e-13));

  CHECK_THROWS_AS(euler_rf_kernel(1.0, 0.1, 1.0), SingularityError);
  CHECK_THROWS_AS(euler_rf_kernel(1.0 - 1e-300, 0.1, 1.0), SingularityError);
  CHECK_THROWS_AS(euler_rf_kernel(0.0, 0.1, 1.0), SingularityError);
}

TEST_CASE("dpmpp_kernel: trivial boundaries and golden values") {
  const auto z = dpmpp_kernel(0.6, 0.6);
  CHECK(z.sigma == Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(z.omega) < 1e-15);

  const auto k = dpmpp_kernel(0.5, 0.8);
  CHECK(k.kappa == Approx(1.2649110640673517).epsilon(1e-14));
  CHECK(k.omega == Approx(0.47434164902525690).epsilon(1e-14));
  CHECK(k.sigma == Approx(0.38729833462074169).epsilon(1e-14));

  double prev = 1.0;
  for (double abp : {0.9, 0.99, 0.9999, 0.999999}) {
    const double s = dpmpp_kernel(0.5, abp).sigma;
    CHECK(s < prev);
    prev = s;
  }
  CHECK(dpmpp_kernel(0.5, 1.0).sigma == 0.0);
}

TEST_CASE("sampler_weight definition") {
  KernelCoeffs k;
  k.omega = 0.2;
  k.delta = 2.0;
  k.sigma = 0.1;
  CHECK(sampler_weight(k) == Approx(4.0).epsilon(1e-15));
  k.sigma = 0.0;
  CHECK_THROWS_AS(sampler_weight(k), UndefinedWeightError);
}

TEST_CASE("property: w sigma = Omega delta and delta consistency on random kernels") {
  Rng rng(11);
  for (int n = 0; n < 1000; ++n) {
    const double ab = 0.01 + 0.98 * rng.uniform();
    const double abp = ab + (0.05 + 0.9 * rng.uniform()) * (1.0 - ab);
    const double sig = rng.uniform() * std::sqrt(1.0 - abp);
    const double t = 0.05 + 0.9 * rng.uniform();
    const KernelCoeffs ks[] = {ddim_kernel(ab, abp, sig), dpmpp_kernel(ab, abp),
                               euler_rf_kernel(t, 0.5 * t * rng.uniform() + 1e-3, rng.uniform())};
    for (const auto& k : ks) {
      if (k.sigma > 0.0) CHECK(std::abs(*k.w * k.sigma - k.omega * k.delta) <= 1e-12 * std::abs(k.omega * k.delta));
    }
    // eps = -b s for VP; v = -(x + t s)/(1 - t) for RF.
    const Vec2 sa = rng.normal2(), sb = rng.normal2(), x = rng.normal2();
    const double b = std::sqrt(1.0 - ab);
    const Vec2 d_eps = (-b * sa) - (-b * sb);
    CHECK(((-ks[0].delta * d_eps) - (sa - sb)).norm() <= 1e-12 * (sa - sb).norm());
    const Vec2 d_v = (-(x + t * sa) / (1 - t)) - (-(x + t * sb) / (1 - t));
    CHECK(((-ks[2].delta * d_v) - (sa - sb)).norm() <= 1e-12 * (sa - sb).norm() * (1 + 1 / (1 - t)));
  }
}

TEST_CASE("ReverseSchedule: RF step at t = 1 has no kernel; VP steps all do") {
  const ReverseSchedule rf(FlowSpec::rectified(), TimeGrid::uniform(10), {NoiseRule::FlowGRPO, 1.0},
                           SamplerKind::EulerFlow);
  CHECK_FALSE(rf.has_kernel(10));
  CHECK(rf.has_kernel(9));
  CHECK_THROWS(rf.sde(10));
  const ReverseSchedule vp(FlowSpec::vp(), TimeGrid::uniform(50), {}, SamplerKind::DDIM);
  for (int i = 1; i <= 50; ++i) {
    CHECK(vp.has_kernel(i));
    CHECK(vp.ode(i).sigma == 0.0);
    // The first step lands on alpha_bar = 1, where ancestral noise vanishes.
    CHECK((vp.sde(i).sigma > 0.0) == (i > 1));
  }
}
