#pragma once

// Value-guidance estimators Psi_hat for the score correction at step i, reward statistics,
// and the zeroth-order noise-space ascent step used for inference-time alignment.

#include "rsm/flow_schedules.hpp"
#include "rsm/mixture_oracle.hpp"
#include "rsm/rng.hpp"
#include "rsm/sampler.hpp"

#include <functional>
#include <vector>

namespace rsm {

struct GuidanceEstimate {
  Vec2 value = Vec2::Zero();
  int n_samples = 0;
  std::vector<Vec2> terms;

  static GuidanceEstimate from_terms(std::vector<Vec2> terms);
};

enum class StatsMode { Raw, Centered, GroupNormalized };

std::string to_string(StatsMode mode);
StatsMode stats_mode_from_string(const std::string& name);

struct RewardStats {
  std::vector<double> raw;
  std::vector<double> advantage;  // the reward weights actually used
  double mean = 0.0;
  double std = 0.0;  // n-1 convention
  StatsMode mode = StatsMode::Raw;
  bool degenerate = false;  // GroupNormalized fell back to Centered (zero spread)
};

inline constexpr double kGroupStdFloor = 1e-8;

RewardStats reward_stats(const std::vector<double>& rewards, StatsMode mode);

// (1/alpha) J^T c with J the Jacobian of x -> tweedie(x, s(x)) at step i.
// Uses the field's analytic score Jacobian when present, else central differences (h = 1e-4).
GuidanceEstimate psi_cs_first_order(const Vec2& x_t, int i, const ScoreField& field,
                                    const ReverseSchedule& schedule, const LinearReward& reward,
                                    double alpha);

// sigma^2/(alpha Omega) mean_k grad_{x_{i-1}} r(x0_hat_{j}^{(k)}), gradients by central
// differences (h = 1e-4) through frozen-noise re-simulation of each branch.
GuidanceEstimate psi_la_first_order(const BranchTree& tree, const ReverseSchedule& schedule,
                                    const RolloutPlan& plan, const ScoreField& field,
                                    const RolloutOptions& options, double alpha);

// sigma/(alpha Omega) mean_k A_k eps_k over the branches at the tree root.
GuidanceEstimate psi_la_zeroth_order(const BranchTree& tree, const ReverseSchedule& schedule,
                                     double alpha, StatsMode mode);

struct DnoResult {
  Vec2 z;
  Vec2 direction;
};

// direction = mean_k (r(D(z + s eps_k)) - r(D(z))) eps_k / s;  z' = z + lr direction.
DnoResult dno_noise_update(const Vec2& z, const std::function<Vec2(const Vec2&)>& decoder,
                           const RewardFn& reward, double sigma_perturb, int K, double lr, Rng& rng);

}  // namespace rsm
