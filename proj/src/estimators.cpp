#include "rsm/estimators.hpp"

#include "rsm/errors.hpp"

#include <cmath>

namespace rsm {

GuidanceEstimate GuidanceEstimate::from_terms(std::vector<Vec2> terms) {
  GuidanceEstimate g;
  g.n_samples = static_cast<int>(terms.size());
  g.value = pairwise_mean(terms);
  g.terms = std::move(terms);
  return g;
}

std::string to_string(StatsMode mode) {
  switch (mode) {
    case StatsMode::Raw: return "raw";
    case StatsMode::Centered: return "centered";
    case StatsMode::GroupNormalized: return "group_normalized";
  }
  return "?";
}

StatsMode stats_mode_from_string(const std::string& name) {
  if (name == "raw") return StatsMode::Raw;
  if (name == "centered") return StatsMode::Centered;
  if (name == "group_normalized") return StatsMode::GroupNormalized;
  throw ConfigError("unknown stats mode '" + name + "'");
}

RewardStats reward_stats(const std::vector<double>& rewards, StatsMode mode) {
  RewardStats st;
  st.raw = rewards;
  st.mode = mode;
  const auto n = rewards.size();
  if (n > 0) st.mean = pairwise_sum(rewards) / static_cast<double>(n);
  if (n > 1) {
    std::vector<double> sq(n);
    for (std::size_t k = 0; k < n; ++k) sq[k] = (rewards[k] - st.mean) * (rewards[k] - st.mean);
    st.std = std::sqrt(pairwise_sum(sq) / static_cast<double>(n - 1));
  }
  st.advantage.resize(n);
  switch (mode) {
    case StatsMode::Raw:
      st.advantage = rewards;
      break;
    case StatsMode::Centered:
      for (std::size_t k = 0; k < n; ++k) st.advantage[k] = rewards[k] - st.mean;
      break;
    case StatsMode::GroupNormalized: {
      if (!(st.std > 0.0)) {
        st.degenerate = true;
        for (std::size_t k = 0; k < n; ++k) st.advantage[k] = rewards[k] - st.mean;
        break;
      }
      const double denom = std::max(st.std, kGroupStdFloor);
      for (std::size_t k = 0; k < n; ++k) st.advantage[k] = (rewards[k] - st.mean) / denom;
      break;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------------------

GuidanceEstimate psi_cs_first_order(const Vec2& x_t, int i, const ScoreField& field,
                                    const ReverseSchedule& schedule, const LinearReward& reward,
                                    double alpha) {
  if (!(alpha > 0.0)) throw DomainError("alpha must be positive");
  const double a = schedule.a(i);
  const double b = schedule.b(i);
  if (!(a > 0.0)) throw SingularityError("current-state estimator needs a_t > 0");
  Mat2 J;
  if (auto js = field.score_jacobian(x_t, i)) {
    J = (Mat2::Identity() + b * b * *js) / a;
  } else {
    constexpr double h = 1e-4;
    for (int d = 0; d < kDim; ++d) {
      Vec2 xp = x_t, xm = x_t;
      xp[d] += h;
      xm[d] -= h;
      J.col(d) = (tweedie(xp, field.score(xp, i), a, b) - tweedie(xm, field.score(xm, i), a, b)) / (2.0 * h);
    }
  }
  return GuidanceEstimate::from_terms({(J.transpose() * reward.slope / alpha).eval()});
}

namespace {

struct BranchScale {
  double sigma;
  double omega;
};

BranchScale root_scale(const BranchTree& tree, const ReverseSchedule& schedule) {
  const TreeNode& root = tree.root();
  if (root.child_count < 1) throw ContractError("tree has no branches at its root");
  const TreeNode& first = tree.nodes[static_cast<std::size_t>(root.child_begin)];
  if (!first.eps) throw ContractError("branch step carries no injected noise");
  const KernelCoeffs& k = schedule.sde(root.step);
  if (k.omega == 0.0) throw SingularityError("lookahead estimator needs Omega != 0");
  return {k.sigma, k.omega};
}

}  // namespace

GuidanceEstimate psi_la_first_order(const BranchTree& tree, const ReverseSchedule& schedule,
                                    const RolloutPlan& plan, const ScoreField& field,
                                    const RolloutOptions& options, double alpha) {
  if (!(alpha > 0.0)) throw DomainError("alpha must be positive");
  if (!options.reward) throw ContractError("first-order lookahead needs a reward function");
  if (tree.lookahead > tree.start_step - 1) {
    throw ContractError("lookahead j > i-1: use the current-state estimator");
  }
  const auto [sigma, omega] = root_scale(tree, schedule);
  const double scale = sigma * sigma / (alpha * omega);
  constexpr double h = 1e-4;
  const TreeNode& root = tree.root();
  std::vector<Vec2> terms;
  terms.reserve(static_cast<std::size_t>(root.child_count));
  for (int c = 0; c < root.child_count; ++c) {
    const int n = root.child_begin + c;
    const Vec2 x = tree.nodes[static_cast<std::size_t>(n)].x;
    Vec2 grad;
    for (int d = 0; d < kDim; ++d) {
      Vec2 xp = x, xm = x;
      xp[d] += h;
      xm[d] -= h;
      grad[d] = (resimulate_subtree(tree, n, xp, schedule, plan, field, options) -
                 resimulate_subtree(tree, n, xm, schedule, plan, field, options)) /
                (2.0 * h);
    }
    terms.push_back(scale * grad);
  }
  return GuidanceEstimate::from_terms(std::move(terms));
}

GuidanceEstimate psi_la_zeroth_order(const BranchTree& tree, const ReverseSchedule& schedule,
                                     double alpha, StatsMode mode) {
  if (!(alpha > 0.0)) throw DomainError("alpha must be positive");
  const auto [sigma, omega] = root_scale(tree, schedule);
  const double scale = sigma / (alpha * omega);
  const TreeNode& root = tree.root();
  std::vector<double> rewards(static_cast<std::size_t>(root.child_count));
  for (int c = 0; c < root.child_count; ++c) {
    rewards[static_cast<std::size_t>(c)] = tree.subtree_reward(root.child_begin + c);
  }
  const RewardStats st = reward_stats(rewards, mode);
  std::vector<Vec2> terms(rewards.size());
  for (int c = 0; c < root.child_count; ++c) {
    const TreeNode& child = tree.nodes[static_cast<std::size_t>(root.child_begin + c)];
    if (!child.eps) throw ContractError("branch is missing its noise record");
    terms[static_cast<std::size_t>(c)] = scale * st.advantage[static_cast<std::size_t>(c)] * *child.eps;
  }
  return GuidanceEstimate::from_terms(std::move(terms));
}

DnoResult dno_noise_update(const Vec2& z, const std::function<Vec2(const Vec2&)>& decoder,
                           const RewardFn& reward, double sigma_perturb, int K, double lr, Rng& rng) {
  if (!(sigma_perturb > 0.0)) throw DomainError("dno: perturbation scale must be positive");
  if (K < 1) throw DomainError("dno: need K >= 1");
  const double base = reward(decoder(z));
  std::vector<Vec2> terms(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const Vec2 e = rng.normal2();
    terms[static_cast<std::size_t>(k)] = (reward(decoder(z + sigma_perturb * e)) - base) / sigma_perturb * e;
  }
  DnoResult out;
  out.direction = pairwise_mean(terms);
  out.z = z + lr * out.direction;
  return out;
}

}  // namespace rsm
