#pragma once

// Reverse-time rollouts over the affine kernel. A rollout from x_{t_i} down to x_{t_j} is
// recorded as a flat BranchTree: every node keeps its state and, for stochastic edges, the
// injected noise, so any child can be recomputed from (parent, eps) and any subtree can be
// re-simulated with frozen noise from a perturbed state.

#include "rsm/flow_schedules.hpp"
#include "rsm/mixture_oracle.hpp"
#include "rsm/types.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rsm {

// s(x, t_i). Implementations must be safe for concurrent readers.
class ScoreField {
 public:
  virtual ~ScoreField() = default;
  virtual Vec2 score(const Vec2& x, int step) const = 0;
  // d s / d x when available in closed form.
  virtual std::optional<Mat2> score_jacobian(const Vec2& /*x*/, int /*step*/) const {
    return std::nullopt;
  }
  // Column-wise score; the default loops over score().
  virtual Eigen::Matrix<double, 2, Eigen::Dynamic> score_batch(
      const Eigen::Matrix<double, 2, Eigen::Dynamic>& x, int step) const;
};

// Exact score of a mixture's noised marginals on the nodes of a schedule.
class MixtureField final : public ScoreField {
 public:
  MixtureField(const GaussianMixture& gmm, const ReverseSchedule& schedule);
  Vec2 score(const Vec2& x, int step) const override;
  std::optional<Mat2> score_jacobian(const Vec2& x, int step) const override;
  const GaussianMixture& marginal(int step) const { return marginals_.at(static_cast<std::size_t>(step)); }

 private:
  std::vector<GaussianMixture> marginals_;
};

// Forwards to another field and counts evaluations (NFE); an analytic Jacobian counts as one.
class CountingField final : public ScoreField {
 public:
  explicit CountingField(const ScoreField& inner) : inner_(inner) {}
  Vec2 score(const Vec2& x, int step) const override {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.score(x, step);
  }
  std::optional<Mat2> score_jacobian(const Vec2& x, int step) const override {
    auto j = inner_.score_jacobian(x, step);
    if (j) calls_.fetch_add(1, std::memory_order_relaxed);
    return j;
  }
  std::uint64_t calls() const { return calls_.load(std::memory_order_relaxed); }
  void reset() { calls_.store(0, std::memory_order_relaxed); }

 private:
  const ScoreField& inner_;
  mutable std::atomic<std::uint64_t> calls_{0};
};

using RewardFn = std::function<double(const Vec2&)>;

// Per-step stochasticity and branching, plus the lookahead depth j at which rewards are read.
// Vectors are indexed by step i = 0..N (entry 0 unused).
struct RolloutPlan {
  std::vector<char> stochastic;
  std::vector<int> branch;
  int lookahead = 0;

  static RolloutPlan full(int n_steps, bool stochastic = true);
  int n_steps() const { return static_cast<int>(branch.size()) - 1; }
  bool is_stochastic(int i) const { return stochastic.at(static_cast<std::size_t>(i)) != 0; }
  int width(int i) const { return branch.at(static_cast<std::size_t>(i)); }
  // Throws ContractError when K_i > 1 falls on a deterministic step, j > start, or sizes mismatch.
  void validate(const ReverseSchedule& schedule, int start_index) const;
};

struct TreeNode {
  Vec2 x = Vec2::Zero();
  int step = 0;
  int parent = -1;
  std::optional<Vec2> eps;  // noise on the edge from parent, stochastic edges only
  int child_begin = -1;
  int child_count = 0;
  std::uint64_t key = 0;  // RNG stream key of this node
};

struct LeafPayload {
  int node = -1;
  Vec2 x0_hat = Vec2::Zero();
  double reward = 0.0;
};

struct BranchTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root, children contiguous
  std::vector<LeafPayload> leaves;
  int start_step = 0;
  int lookahead = 0;
  std::uint64_t seed = 0;

  const TreeNode& root() const { return nodes.front(); }
  // Mean reward over the leaves below node n.
  double subtree_reward(int n) const;
  std::string to_json() const;
};

// kappa x + Omega s + sigma eps. eps must be present iff sigma > 0.
Vec2 reverse_step(const Vec2& x, const KernelCoeffs& coeffs, const Vec2& s, const std::optional<Vec2>& eps);

// Tweedie estimate at step j with field f; the identity when b_j = 0 (no score call).
Vec2 tweedie_at(const ReverseSchedule& schedule, const ScoreField& field, const Vec2& x, int step);

struct RolloutOptions {
  const ScoreField* tweedie_field = nullptr;  // defaults to the rollout field
  RewardFn reward;                            // leaves get reward 0 when empty
};

BranchTree rollout(const Vec2& x_start, int start_index, const ReverseSchedule& schedule,
                   const RolloutPlan& plan, const ScoreField& field, std::uint64_t rng_seed,
                   const RolloutOptions& options = {});

// Stochastic children at step i of a deterministic path, each continued by ODE to t_j.
// ode_path[k] is the state at step k (size N+1). forced_eps, when given, replaces the draws.
BranchTree revisit_branch(const std::vector<Vec2>& ode_path, int i, int K, int lookahead,
                          const ReverseSchedule& schedule, const ScoreField& field,
                          std::uint64_t rng_seed, const RolloutOptions& options = {},
                          const std::vector<Vec2>* forced_eps = nullptr);

// Deterministic path x_{t_start} -> x_{t_0}; entry k holds the state at step k.
std::vector<Vec2> ode_path(const Vec2& x_start, int start_index, const ReverseSchedule& schedule,
                           const ScoreField& field);

// Recompute node n from its parent's state and the stored noise.
Vec2 recompute_child(const BranchTree& tree, int n, const ReverseSchedule& schedule,
                     const RolloutPlan& plan, const ScoreField& field);

// Re-simulate the subtree under node n from state x_override with all stored noises frozen,
// returning the mean leaf reward (rewards recomputed through Tweedie at the leaf step).
double resimulate_subtree(const BranchTree& tree, int n, const Vec2& x_override,
                          const ReverseSchedule& schedule, const RolloutPlan& plan,
                          const ScoreField& field, const RolloutOptions& options);

// Terminal sample x_{t_stop} of a single trajectory (no tree bookkeeping).
Vec2 sample_path(const Vec2& x_start, int start_index, int stop_index, const ReverseSchedule& schedule,
                 const std::vector<char>& stochastic, const ScoreField& field, std::uint64_t rng_seed);

}  // namespace rsm
