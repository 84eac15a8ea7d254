#pragma once

// Denoising score-matching pretraining of the epsilon-prediction net and on-policy fine-tuning
// with any method configuration of the unified loss.

#include "rsm/estimators.hpp"
#include "rsm/mixture_oracle.hpp"
#include "rsm/rsm_objective.hpp"
#include "rsm/score_net.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rsm {

struct PretrainConfig {
  int batch = 4096;
  int iters = 2000;
  double lr = 1e-3;
  int time_levels = 500;  // t drawn uniformly from {k / time_levels : k = 1..time_levels}
  std::uint64_t seed = 0;
};

struct PretrainResult {
  std::vector<double> loss_curve;
};

// Mean |eps_theta(a x0 + b eps, t) - eps|^2 over the batch; accumulates its gradient into grad.
double dsm_loss(const ScoreNet& net, const Batch2& x0, const Batch2& eps, const Eigen::VectorXd& t,
                const FlowSpec& flow, Eigen::VectorXd* grad);

// Throws TrainingError when the loss turns non-finite.
PretrainResult pretrain(ScoreNet& net, const GaussianMixture& ref, const FlowSpec& flow,
                        const PretrainConfig& cfg);

struct RewardEstimate {
  double mean = 0.0;
  double se = 0.0;
  int n = 0;
};

// Terminal samples x_0 of n SDE (or ODE) trajectories started from N(0, I) at t_N.
std::vector<Vec2> sample_terminal(const ScoreField& field, const ReverseSchedule& schedule, int n,
                                  std::uint64_t seed, bool stochastic = true);

// E[r(x_0)] +- standard error over n trajectories. Throws DomainError when n < 1.
RewardEstimate eval_reward(const ScoreField& field, const ReverseSchedule& schedule, const RewardFn& reward,
                           int n, std::uint64_t seed);

// W2 upper bound between the terminal laws of two samplers: both are driven by the same
// noise, and the paired samples are matched exactly within blocks of `block` points.
double sampler_w2(const ScoreField& a, const ScoreField& b, const ReverseSchedule& schedule, int n,
                  std::uint64_t seed, std::size_t block = 1000);

struct FinetuneConfig {
  int iters = 300;             // parameter updates
  int trajectories = 256;      // rollouts collected per batch
  int steps_per_traj = 16;     // (state, step) pairs drawn per rollout; 0 = all usable steps
  int group_size = 1;          // K > 1: groups of K branches sharing a trunk above a random step
  int updates_per_batch = 1;   // > 1 reuses a batch with the s_old anchor (loose on-policy)
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  StatsMode stats = StatsMode::Centered;
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // last good parameters are written here on divergence
};

struct EpochMetrics {
  int epoch = 0;
  double reward_mean = 0.0;
  double reward_se = 0.0;
  double kl_proxy = 0.0;
  double drift = 0.0;
  double clip_fraction = 0.0;
};

struct FinetuneResult {
  std::vector<EpochMetrics> log;
};

// Fine-tunes `net` (initialised as a copy of `ref`) on a VP schedule with the given method.
FinetuneResult rsm_finetune(const ScoreNet& ref, ScoreNet& net, const TiltedPair& pair,
                            const MethodConfig& method, const ReverseSchedule& schedule,
                            const FinetuneConfig& cfg);

std::string metrics_csv(const std::vector<EpochMetrics>& log);

// Mean of reward_mean over the last `window` epochs.
double smoothed_reward(const std::vector<EpochMetrics>& log, int window);

}  // namespace rsm
