#include "rsm/sampler.hpp"

#include "rsm/errors.hpp"
#include "rsm/rng.hpp"

#include <json.hpp>

namespace rsm {

Eigen::Matrix<double, 2, Eigen::Dynamic> ScoreField::score_batch(
    const Eigen::Matrix<double, 2, Eigen::Dynamic>& x, int step) const {
  Eigen::Matrix<double, 2, Eigen::Dynamic> out(2, x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) out.col(b) = score(x.col(b), step);
  return out;
}

MixtureField::MixtureField(const GaussianMixture& gmm, const ReverseSchedule& schedule) {
  gmm.validate();
  marginals_.reserve(static_cast<std::size_t>(schedule.n_steps()) + 1);
  for (int i = 0; i <= schedule.n_steps(); ++i) {
    marginals_.push_back(marginal_ab(gmm, schedule.a(i), schedule.b(i)));
  }
}

Vec2 MixtureField::score(const Vec2& x, int step) const { return rsm::score(marginal(step), x); }

std::optional<Mat2> MixtureField::score_jacobian(const Vec2& x, int step) const {
  return rsm::score_jacobian(marginal(step), x);
}

// ---------------------------------------------------------------------------------------

RolloutPlan RolloutPlan::full(int n_steps, bool stochastic) {
  RolloutPlan p;
  p.stochastic.assign(static_cast<std::size_t>(n_steps) + 1, stochastic ? 1 : 0);
  p.stochastic[0] = 0;
  p.branch.assign(static_cast<std::size_t>(n_steps) + 1, 1);
  p.lookahead = 0;
  return p;
}

namespace {

bool effective_stochastic(const ReverseSchedule& sched, const RolloutPlan& plan, int i) {
  return plan.is_stochastic(i) && sched.sde(i).sigma > 0.0;
}

}  // namespace

void RolloutPlan::validate(const ReverseSchedule& schedule, int start_index) const {
  const auto n = static_cast<std::size_t>(schedule.n_steps()) + 1;
  if (stochastic.size() != n || branch.size() != n) {
    throw ContractError("rollout plan length does not match the schedule");
  }
  if (start_index < 1 || start_index > schedule.n_steps()) throw ContractError("start index out of range");
  if (lookahead < 0 || lookahead >= start_index) {
    throw ContractError("lookahead depth must satisfy 0 <= j < start index");
  }
  for (int i = lookahead + 1; i <= start_index; ++i) {
    if (width(i) < 1) throw ContractError("branch width must be >= 1");
    if (width(i) > 1 && !effective_stochastic(schedule, *this, i)) {
      throw ContractError("branching requested on deterministic step " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------------------

double BranchTree::subtree_reward(int n) const {
  const TreeNode& node = nodes.at(static_cast<std::size_t>(n));
  if (node.child_count == 0) {
    const int first_leaf = leaves.front().node;
    return leaves.at(static_cast<std::size_t>(n - first_leaf)).reward;
  }
  double acc = 0.0;
  for (int c = 0; c < node.child_count; ++c) acc += subtree_reward(node.child_begin + c);
  return acc / node.child_count;
}

std::string BranchTree::to_json() const {
  nlohmann::json j;
  j["start_step"] = start_step;
  j["lookahead"] = lookahead;
  j["seed"] = seed;
  auto& arr = j["nodes"] = nlohmann::json::array();
  for (const auto& n : nodes) {
    nlohmann::json e{{"x", {n.x[0], n.x[1]}}, {"step", n.step}, {"parent", n.parent}};
    if (n.eps) e["eps"] = {(*n.eps)[0], (*n.eps)[1]};
    arr.push_back(std::move(e));
  }
  auto& lv = j["leaves"] = nlohmann::json::array();
  for (const auto& l : leaves) {
    lv.push_back({{"node", l.node}, {"x0_hat", {l.x0_hat[0], l.x0_hat[1]}}, {"reward", l.reward}});
  }
  return j.dump(1);
}

Vec2 reverse_step(const Vec2& x, const KernelCoeffs& c, const Vec2& s, const std::optional<Vec2>& eps) {
  if (c.sigma > 0.0) {
    if (!eps) throw ContractError("stochastic step needs injected noise");
    return c.kappa * x + c.omega * s + c.sigma * *eps;
  }
  if (eps) throw ContractError("noise supplied to a deterministic step");
  return c.kappa * x + c.omega * s;
}

Vec2 tweedie_at(const ReverseSchedule& schedule, const ScoreField& field, const Vec2& x, int step) {
  const double a = schedule.a(step);
  const double b = schedule.b(step);
  if (b == 0.0) return tweedie(x, Vec2::Zero(), a, 0.0);
  return tweedie(x, field.score(x, step), a, b);
}

namespace {

void finish_leaves(BranchTree& tree, const std::vector<int>& frontier, const ReverseSchedule& schedule,
                   const ScoreField& field, const RolloutOptions& options) {
  const ScoreField& tf = options.tweedie_field ? *options.tweedie_field : field;
  tree.leaves.reserve(frontier.size());
  for (int n : frontier) {
    LeafPayload leaf;
    leaf.node = n;
    const Vec2& x = tree.nodes[static_cast<std::size_t>(n)].x;
    if (options.reward) {
      leaf.x0_hat = tweedie_at(schedule, tf, x, tree.lookahead);
      leaf.reward = options.reward(leaf.x0_hat);
    } else {
      leaf.x0_hat = x;
    }
    tree.leaves.push_back(leaf);
  }
}

}  // namespace

BranchTree rollout(const Vec2& x_start, int start_index, const ReverseSchedule& schedule,
                   const RolloutPlan& plan, const ScoreField& field, std::uint64_t rng_seed,
                   const RolloutOptions& options) {
  plan.validate(schedule, start_index);
  BranchTree tree;
  tree.start_step = start_index;
  tree.lookahead = plan.lookahead;
  tree.seed = rng_seed;
  TreeNode root;
  root.x = x_start;
  root.step = start_index;
  root.key = rng_seed;
  tree.nodes.push_back(root);

  std::vector<int> frontier{0};
  std::vector<int> next;
  for (int i = start_index; i > plan.lookahead; --i) {
    const bool stoch = effective_stochastic(schedule, plan, i);
    const KernelCoeffs& k = schedule.kernel(i, stoch);
    const int K = plan.width(i);
    next.clear();
    for (int n : frontier) {
      const Vec2 x = tree.nodes[static_cast<std::size_t>(n)].x;
      const std::uint64_t key = tree.nodes[static_cast<std::size_t>(n)].key;
      const Vec2 s = field.score(x, i);
      tree.nodes[static_cast<std::size_t>(n)].child_begin = static_cast<int>(tree.nodes.size());
      tree.nodes[static_cast<std::size_t>(n)].child_count = K;
      for (int c = 0; c < K; ++c) {
        TreeNode child;
        child.key = stream_key(key, static_cast<std::uint64_t>(c));
        if (stoch) child.eps = keyed_normal2(child.key);
        child.x = reverse_step(x, k, s, child.eps);
        child.step = i - 1;
        child.parent = n;
        next.push_back(static_cast<int>(tree.nodes.size()));
        tree.nodes.push_back(child);
      }
    }
    frontier.swap(next);
  }
  finish_leaves(tree, frontier, schedule, field, options);
  return tree;
}

std::vector<Vec2> ode_path(const Vec2& x_start, int start_index, const ReverseSchedule& schedule,
                           const ScoreField& field) {
  std::vector<Vec2> path(static_cast<std::size_t>(schedule.n_steps()) + 1, Vec2::Zero());
  Vec2 x = x_start;
  path[static_cast<std::size_t>(start_index)] = x;
  for (int i = start_index; i >= 1; --i) {
    x = reverse_step(x, schedule.ode(i), field.score(x, i), std::nullopt);
    path[static_cast<std::size_t>(i - 1)] = x;
  }
  return path;
}

BranchTree revisit_branch(const std::vector<Vec2>& path, int i, int K, int lookahead,
                          const ReverseSchedule& schedule, const ScoreField& field,
                          std::uint64_t rng_seed, const RolloutOptions& options,
                          const std::vector<Vec2>* forced_eps) {
  if (i < 1 || i > schedule.n_steps() || static_cast<std::size_t>(i) >= path.size()) {
    throw DomainError("revisit_branch: step index out of range");
  }
  RolloutPlan plan = RolloutPlan::full(schedule.n_steps(), false);
  plan.stochastic[static_cast<std::size_t>(i)] = 1;
  plan.branch[static_cast<std::size_t>(i)] = K;
  plan.lookahead = lookahead;
  BranchTree tree = rollout(path[static_cast<std::size_t>(i)], i, schedule, plan, field, rng_seed, {});
  if (forced_eps) {
    if (forced_eps->size() != static_cast<std::size_t>(K)) throw ContractError("forced noise count != K");
    // Overwrite the draws and replay the subtrees.
    const KernelCoeffs& k = schedule.sde(i);
    const Vec2 s = field.score(tree.root().x, i);
    for (int c = 0; c < K; ++c) {
      TreeNode& child = tree.nodes[static_cast<std::size_t>(tree.root().child_begin + c)];
      child.eps = (*forced_eps)[static_cast<std::size_t>(c)];
      child.x = reverse_step(tree.root().x, k, s, child.eps);
    }
    for (std::size_t n = static_cast<std::size_t>(K) + 1; n < tree.nodes.size(); ++n) {
      TreeNode& node = tree.nodes[n];
      const TreeNode& par = tree.nodes[static_cast<std::size_t>(node.parent)];
      node.x = reverse_step(par.x, schedule.ode(par.step), field.score(par.x, par.step), std::nullopt);
    }
  }
  std::vector<int> frontier;
  for (std::size_t n = 0; n < tree.nodes.size(); ++n) {
    if (tree.nodes[n].child_count == 0) frontier.push_back(static_cast<int>(n));
  }
  tree.leaves.clear();
  finish_leaves(tree, frontier, schedule, field, options);
  return tree;
}

Vec2 recompute_child(const BranchTree& tree, int n, const ReverseSchedule& schedule,
                     const RolloutPlan& plan, const ScoreField& field) {
  const TreeNode& node = tree.nodes.at(static_cast<std::size_t>(n));
  if (node.parent < 0) throw ContractError("the root has no parent");
  const TreeNode& par = tree.nodes[static_cast<std::size_t>(node.parent)];
  const bool stoch = effective_stochastic(schedule, plan, par.step);
  return reverse_step(par.x, schedule.kernel(par.step, stoch), field.score(par.x, par.step), node.eps);
}

double resimulate_subtree(const BranchTree& tree, int n, const Vec2& x_override,
                          const ReverseSchedule& schedule, const RolloutPlan& plan,
                          const ScoreField& field, const RolloutOptions& options) {
  const TreeNode& node = tree.nodes.at(static_cast<std::size_t>(n));
  if (node.child_count == 0) {
    const ScoreField& tf = options.tweedie_field ? *options.tweedie_field : field;
    return options.reward(tweedie_at(schedule, tf, x_override, node.step));
  }
  const bool stoch = effective_stochastic(schedule, plan, node.step);
  const KernelCoeffs& k = schedule.kernel(node.step, stoch);
  const Vec2 s = field.score(x_override, node.step);
  double acc = 0.0;
  for (int c = 0; c < node.child_count; ++c) {
    const int cn = node.child_begin + c;
    const Vec2 xc = reverse_step(x_override, k, s, tree.nodes[static_cast<std::size_t>(cn)].eps);
    acc += resimulate_subtree(tree, cn, xc, schedule, plan, field, options);
  }
  return acc / node.child_count;
}

Vec2 sample_path(const Vec2& x_start, int start_index, int stop_index, const ReverseSchedule& schedule,
                 const std::vector<char>& stochastic, const ScoreField& field, std::uint64_t rng_seed) {
  Vec2 x = x_start;
  std::uint64_t key = rng_seed;
  for (int i = start_index; i > stop_index; --i) {
    const bool stoch = stochastic.at(static_cast<std::size_t>(i)) != 0 && schedule.sde(i).sigma > 0.0;
    key = stream_key(key, 0);
    const Vec2 s = field.score(x, i);
    x = reverse_step(x, schedule.kernel(i, stoch), s, stoch ? std::optional<Vec2>(keyed_normal2(key)) : std::nullopt);
  }
  return x;
}

}  // namespace rsm
