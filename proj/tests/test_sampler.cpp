#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rsm/errors.hpp"
#include "rsm/sampler.hpp"
#include "rsm/wasserstein.hpp"

#include <cmath>

using namespace rsm;
using doctest::Approx;

namespace {

ReverseSchedule vp_schedule(int n) {
  return {FlowSpec::vp(), TimeGrid::uniform(n), NoiseSpec{NoiseRule::DDPMEquivalent, 0.0}, SamplerKind::DDIM};
}

const Vec2 kMu(2.0, -1.0);
GaussianMixture unit_gaussian(const Vec2& mu) { return {{1.0}, {mu}, 1.0}; }

bool same_bits(const Vec2& a, const Vec2& b) { return a[0] == b[0] && a[1] == b[1]; }

}  // namespace

TEST_CASE("reverse_step examples and contract") {
  const KernelCoeffs id{1.0, 0.0, 0.0, 1.0};
  CHECK(same_bits(reverse_step(Vec2(0.3, -7), id, Vec2(5, 5), std::nullopt), Vec2(0.3, -7)));
  const KernelCoeffs ddim{1.2649110640673517, 0.31622776601683793, 0.0, 1.0};
  CHECK(reverse_step(Vec2(1, 0), ddim, Vec2::Zero(), std::nullopt).isApprox(Vec2(1.2649110640673517, 0)));
  const KernelCoeffs noisy{1.2, 0.5, 0.1, 1.0};
  const Vec2 mean = reverse_step(Vec2(1, 2), {1.2, 0.5, 0.0, 1.0}, Vec2(1, 1), std::nullopt);
  CHECK((reverse_step(Vec2(1, 2), noisy, Vec2(1, 1), Vec2(1, -1)) - mean).isApprox(Vec2(0.1, -0.1)));
  CHECK_THROWS_AS(reverse_step(Vec2(1, 2), id, Vec2::Zero(), Vec2(1, 0)), ContractError);
  CHECK_THROWS_AS(reverse_step(Vec2(1, 2), noisy, Vec2::Zero(), std::nullopt), ContractError);
}

TEST_CASE("plan validation") {
  const auto sched = vp_schedule(20);
  RolloutPlan ode = RolloutPlan::full(20, false);
  ode.branch[10] = 3;
  CHECK_THROWS_AS(ode.validate(sched, 15), ContractError);
  RolloutPlan p = RolloutPlan::full(20);
  p.lookahead = 16;
  CHECK_THROWS_AS(p.validate(sched, 15), ContractError);
  p.lookahead = 5;
  CHECK_NOTHROW(p.validate(sched, 15));
  CHECK_THROWS_AS(RolloutPlan::full(19).validate(sched, 15), ContractError);
}

TEST_CASE("rollout: ODE path is single, eps-free and seed-independent") {
  const auto sched = vp_schedule(30);
  const MixtureField field(toy_reference(), sched);
  const auto plan = RolloutPlan::full(30, false);
  const auto t1 = rollout(Vec2(0.4, 1.0), 30, sched, plan, field, 5);
  const auto t2 = rollout(Vec2(0.4, 1.0), 30, sched, plan, field, 5);
  const auto t3 = rollout(Vec2(0.4, 1.0), 30, sched, plan, field, 99);
  CHECK(t1.nodes.size() == 31);
  CHECK(t1.leaves.size() == 1);
  for (std::size_t n = 1; n < t1.nodes.size(); ++n) CHECK_FALSE(t1.nodes[n].eps.has_value());
  CHECK(t1.to_json() == t2.to_json());
  CHECK(same_bits(t1.nodes.back().x, t3.nodes.back().x));
}

TEST_CASE("rollout: seed determinism and bit-exact child recomputation with K=4") {
  const auto sched = vp_schedule(30);
  const MixtureField field(toy_reference(), sched);
  RolloutPlan plan = RolloutPlan::full(30);
  plan.branch[20] = 4;
  RolloutOptions opt;
  opt.reward = [](const Vec2& x) { return toy_reward()(x); };
  const auto a = rollout(Vec2(-0.5, 0.2), 20, sched, plan, field, 11, opt);
  const auto b = rollout(Vec2(-0.5, 0.2), 20, sched, plan, field, 11, opt);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.leaves.size() == 4);
  CHECK(a.nodes.size() == 1 + 4 * 20);
  for (std::size_t n = 1; n < a.nodes.size(); ++n) {
    const auto& node = a.nodes[n];
    // Step 1 has sigma = 0 on the DDPM-equivalent grid.
    CHECK(node.eps.has_value() == (a.nodes[static_cast<std::size_t>(node.parent)].step > 1));
    CHECK(same_bits(recompute_child(a, static_cast<int>(n), sched, plan, field), node.x));
  }
  for (const auto& leaf : a.leaves) {
    CHECK(a.nodes[static_cast<std::size_t>(leaf.node)].step == 0);
    CHECK(leaf.reward == Approx(toy_reward()(leaf.x0_hat)));
  }
  const auto c = rollout(Vec2(-0.5, 0.2), 20, sched, plan, field, 12, opt);
  CHECK(c.to_json() != a.to_json());
}

TEST_CASE("rollout: branches are reproducible independently of their siblings") {
  // The same child key yields the same noise whatever the branch width.
  const auto sched = vp_schedule(10);
  const MixtureField field(toy_reference(), sched);
  RolloutPlan p2 = RolloutPlan::full(10), p5 = RolloutPlan::full(10);
  p2.branch[8] = 2;
  p5.branch[8] = 5;
  const auto t2 = rollout(Vec2(1, 1), 8, sched, p2, field, 3);
  const auto t5 = rollout(Vec2(1, 1), 8, sched, p5, field, 3);
  for (int c = 0; c < 2; ++c) {
    CHECK(same_bits(*t2.nodes[static_cast<std::size_t>(1 + c)].eps, *t5.nodes[static_cast<std::size_t>(1 + c)].eps));
  }
}

TEST_CASE("rollout: lookahead depth and pattern plans") {
  const auto sched = vp_schedule(40);
  const MixtureField field(toy_reference(), sched);
  RolloutPlan plan = RolloutPlan::full(40);
  plan.lookahead = 25;
  plan.branch[35] = 2;
  plan.branch[30] = 3;
  const auto t = rollout(Vec2::Zero(), 35, sched, plan, field, 1);
  CHECK(t.leaves.size() == 6);
  for (const auto& leaf : t.leaves) CHECK(t.nodes[static_cast<std::size_t>(leaf.node)].step == 25);
  CHECK(t.lookahead == 25);
}

TEST_CASE("property: SDE and ODE rollouts preserve the analytic marginal") {
  // At 50 steps the terminal W2 is ~0.1 from discretisation alone; it shrinks with N.
  for (int NN : {200, 1000}) {
  const auto sched = vp_schedule(NN);
  const GaussianMixture ref = unit_gaussian(kMu);
  const MixtureField field(ref, sched);
  const int n = 10000;
  for (bool stochastic : {true, false}) {
    std::vector<char> mask(NN + 1, stochastic ? 1 : 0);
    for (int stop : {NN * 7 / 10, NN / 5, 0}) {
      std::vector<Vec2> xs;
      xs.reserve(n);
      for (int k = 0; k < n; ++k) {
        const Vec2 x_n = sched.a(NN) * kMu + sched.b(NN) * keyed_normal2(stream_key(77, k));
        xs.push_back(sample_path(x_n, NN, stop, sched, mask, field, stream_key(78, k)));
      }
      const auto m = marginal_ab(ref, sched.a(stop), sched.b(stop));
      const double w2 = empirical_gaussian_w2(xs, m.means[0], m.component_var * Mat2::Identity());
      CHECK_MESSAGE(w2 <= 0.05, "N=", NN, " stochastic=", stochastic, " stop=", stop, " w2=", w2);
    }
  }
  }
}

TEST_CASE("property: localising noise to one step keeps the ODE marginal when that step is masked") {
  // A plan with every step masked is the ODE: same terminal states whatever the seed.
  const auto sched = vp_schedule(20);
  const MixtureField field(toy_reference(), sched);
  std::vector<char> none(21, 0), one(21, 0);
  one[12] = 1;
  const Vec2 x(0.7, -0.2);
  CHECK(same_bits(sample_path(x, 20, 0, sched, none, field, 1), sample_path(x, 20, 0, sched, none, field, 2)));
  CHECK_FALSE(same_bits(sample_path(x, 20, 0, sched, one, field, 1), sample_path(x, 20, 0, sched, one, field, 2)));
}

TEST_CASE("revisit_branch: forced zero noise continues by ODE from the kernel mean") {
  const auto sched = vp_schedule(30);
  const MixtureField field(toy_reference(), sched);
  const auto path = ode_path(Vec2(0.3, 0.9), 30, sched, field);
  REQUIRE(path.size() == 31);
  const std::vector<Vec2> zero{Vec2::Zero()};
  const auto t = revisit_branch(path, 18, 1, 0, sched, field, 4, {}, &zero);
  CHECK(t.leaves.size() == 1);
  // With eps = 0 the branch step lands on the stochastic kernel's mean, then follows the ODE.
  const KernelCoeffs& k = sched.sde(18);
  const Vec2 mean = k.kappa * path[18] + k.omega * field.score(path[18], 18);
  const auto cont = ode_path(mean, 17, sched, field);
  const Vec2 leaf = t.nodes[static_cast<std::size_t>(t.leaves[0].node)].x;
  CHECK(same_bits(leaf, cont[0]));
  CHECK(same_bits(t.nodes[1].x, mean));

  const auto t6 = revisit_branch(path, 18, 6, 5, sched, field, 4);
  CHECK(t6.leaves.size() == 6);
  CHECK(t6.root().child_count == 6);
  int with_eps = 0;
  for (const auto& node : t6.nodes) with_eps += node.eps.has_value() ? 1 : 0;
  CHECK(with_eps == 6);
  for (const auto& leaf6 : t6.leaves) CHECK(t6.nodes[static_cast<std::size_t>(leaf6.node)].step == 5);
  CHECK_THROWS_AS(revisit_branch(path, 31, 2, 0, sched, field, 4), DomainError);
  CHECK_THROWS_AS(revisit_branch(path, 0, 2, 0, sched, field, 4), DomainError);
}

TEST_CASE("revisit_branch: single-Gaussian leaf reward mean matches the affine push-forward") {
  const auto sched = vp_schedule(30);
  const GaussianMixture ref = unit_gaussian(kMu);
  const MixtureField field(ref, sched);
  const LinearReward r{Vec2(1.0, 0.5), 0.0};
  const int i = 20, j = 6;
  const Vec2 x_i(0.5, 0.5);
  std::vector<Vec2> path(31, Vec2::Zero());
  path[i] = x_i;
  // Closed form: unit-variance Gaussian score -(x - a mu); every map is affine, so the reward
  // mean is the reward of the noise-free continuation.
  auto s = [&](const Vec2& x, int k) -> Vec2 { return -(x - sched.a(k) * kMu); };
  Vec2 m = sched.sde(i).kappa * x_i + sched.sde(i).omega * s(x_i, i);
  for (int k = i - 1; k > j; --k) m = sched.ode(k).kappa * m + sched.ode(k).omega * s(m, k);
  const double aj = sched.a(j);
  const double expected = r(kMu + aj * (m - aj * kMu));

  RolloutOptions opt;
  opt.reward = [&](const Vec2& x) { return r(x); };
  const int K = 20000;
  const auto t = revisit_branch(path, i, K, j, sched, field, 8, opt);
  double mean = 0.0, sq = 0.0;
  for (const auto& leaf : t.leaves) {
    mean += leaf.reward;
    sq += leaf.reward * leaf.reward;
  }
  mean /= K;
  const double se = std::sqrt((sq / K - mean * mean) / K);
  CHECK(std::abs(mean - expected) < 3 * se);
}

TEST_CASE("tree JSON dump lists nodes with states and noises") {
  const auto sched = vp_schedule(5);
  const MixtureField field(toy_reference(), sched);
  const auto t = rollout(Vec2(1, 2), 5, sched, RolloutPlan::full(5), field, 2);
  const std::string js = t.to_json();
  CHECK(js.find("\"nodes\"") != std::string::npos);
  CHECK(js.find("\"eps\"") != std::string::npos);
}

TEST_CASE("wasserstein helpers") {
  const Mat2 I = Mat2::Identity();
  CHECK(gaussian_w2(Vec2::Zero(), I, Vec2::Zero(), I) == Approx(0.0));
  CHECK(gaussian_w2(Vec2::Zero(), I, Vec2(3, 4), I) == Approx(5.0));
  // Scalar variances 1 and 4 in both axes: sqrt(2 (2 - 1)^2).
  CHECK(gaussian_w2(Vec2::Zero(), I, Vec2::Zero(), 4 * I) == Approx(std::sqrt(2.0)));
  const std::vector<Vec2> a{Vec2(0, 0), Vec2(1, 0)}, b{Vec2(1, 1), Vec2(0, 1)};
  CHECK(assignment_w2(a, b) == Approx(1.0));
  CHECK(blocked_w2(a, b, 1) >= assignment_w2(a, b) - 1e-15);
}
