#include "rsm/training.hpp"

#include "rsm/errors.hpp"
#include "rsm/rng.hpp"
#include "rsm/wasserstein.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rsm {

namespace {

constexpr std::uint64_t kStartSalt = 0x5bd1e995a3c1f00dULL;
constexpr std::uint64_t kMemberSalt = 1000003;

bool finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

double dsm_loss(const ScoreNet& net, const Batch2& x0, const Batch2& eps, const Eigen::VectorXd& t,
                const FlowSpec& flow, Eigen::VectorXd* grad) {
  const auto B = x0.cols();
  Batch2 xt(2, B);
  for (Eigen::Index k = 0; k < B; ++k) {
    const auto c = ab_coeffs(flow, t[k]);
    xt.col(k) = c.a * x0.col(k) + c.b * eps.col(k);
  }
  ScoreNet::Cache cache;
  const Batch2 pred = net.forward(xt, t, grad ? &cache : nullptr);
  const Batch2 diff = pred - eps;
  const double loss = diff.squaredNorm() / static_cast<double>(B);
  if (grad) net.backward(cache, (2.0 / static_cast<double>(B)) * diff, *grad);
  return loss;
}

PretrainResult pretrain(ScoreNet& net, const GaussianMixture& ref, const FlowSpec& flow,
                        const PretrainConfig& cfg) {
  if (cfg.batch < 1 || cfg.iters < 0 || cfg.time_levels < 1) throw ConfigError("invalid pretraining config");
  ref.validate();
  PretrainResult res;
  if (cfg.iters == 0) return res;
  Adam opt;
  opt.lr = cfg.lr;
  Rng rng(cfg.seed);
  Batch2 x0(2, cfg.batch), eps(2, cfg.batch);
  Eigen::VectorXd t(cfg.batch);
  Eigen::VectorXd grad(ScoreNet::kParams);
  res.loss_curve.reserve(static_cast<std::size_t>(cfg.iters));
  for (int it = 0; it < cfg.iters; ++it) {
    for (int k = 0; k < cfg.batch; ++k) {
      x0.col(k) = sample(ref, rng);
      eps.col(k) = rng.normal2();
      t[k] = static_cast<double>(1 + rng.index(static_cast<std::size_t>(cfg.time_levels))) / cfg.time_levels;
    }
    grad.setZero();
    const double loss = dsm_loss(net, x0, eps, t, flow, &grad);
    if (!std::isfinite(loss) || !finite(grad)) {
      throw TrainingError("pretraining diverged at iteration " + std::to_string(it) +
                          " (loss=" + std::to_string(loss) + ")");
    }
    opt.step(net.params(), grad);
    res.loss_curve.push_back(loss);
  }
  return res;
}

// ---------------------------------------------------------------------------------------

std::vector<Vec2> sample_terminal(const ScoreField& field, const ReverseSchedule& schedule, int n,
                                  std::uint64_t seed, bool stochastic) {
  if (n < 0) throw DomainError("sample count must be >= 0");
  const int N = schedule.n_steps();
  Batch2 X(2, n);
  std::vector<std::uint64_t> keys(static_cast<std::size_t>(n));
  for (int b = 0; b < n; ++b) {
    keys[static_cast<std::size_t>(b)] = stream_key(seed, static_cast<std::uint64_t>(b));
    X.col(b) = keyed_normal2(keys[static_cast<std::size_t>(b)] ^ kStartSalt);
  }
  for (int i = N; i >= 1; --i) {
    const bool stoch = stochastic && schedule.sde(i).sigma > 0.0;
    const KernelCoeffs& k = schedule.kernel(i, stoch);
    const Batch2 S = field.score_batch(X, i);
    X = k.kappa * X + k.omega * S;
    if (stoch) {
      for (int b = 0; b < n; ++b) {
        auto& key = keys[static_cast<std::size_t>(b)];
        key = stream_key(key, 0);
        X.col(b) += k.sigma * keyed_normal2(key);
      }
    }
  }
  std::vector<Vec2> out(static_cast<std::size_t>(n));
  for (int b = 0; b < n; ++b) out[static_cast<std::size_t>(b)] = X.col(b);
  return out;
}

RewardEstimate eval_reward(const ScoreField& field, const ReverseSchedule& schedule, const RewardFn& reward,
                           int n, std::uint64_t seed) {
  if (n < 1) throw DomainError("eval_reward needs n >= 1");
  const auto xs = sample_terminal(field, schedule, n, seed, true);
  std::vector<double> r(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) r[k] = reward(xs[k]);
  RewardEstimate est;
  est.n = n;
  est.mean = pairwise_sum(r) / n;
  if (n > 1) {
    std::vector<double> sq(r.size());
    for (std::size_t k = 0; k < r.size(); ++k) sq[k] = (r[k] - est.mean) * (r[k] - est.mean);
    est.se = std::sqrt(pairwise_sum(sq) / (n - 1) / n);
  }
  return est;
}

double sampler_w2(const ScoreField& a, const ScoreField& b, const ReverseSchedule& schedule, int n,
                  std::uint64_t seed, std::size_t block) {
  if (n < 1) throw DomainError("sampler_w2 needs n >= 1");
  return blocked_w2(sample_terminal(a, schedule, n, seed, true), sample_terminal(b, schedule, n, seed, true), block);
}

// ---------------------------------------------------------------------------------------

namespace {

struct Pair {
  int traj;
  int step;
};

// Tweedie Jacobian of the net at (x, step) by central differences.
Mat2 net_tweedie_jacobian(const ScoreNet& net, const ReverseSchedule& schedule, const Vec2& x, int step) {
  const double a = schedule.a(step);
  const double b = schedule.b(step);
  if (b == 0.0) return Mat2::Identity() / a;
  constexpr double h = 1e-4;
  Batch2 xs(2, 4);
  for (int d = 0; d < 2; ++d) {
    xs.col(2 * d) = x;
    xs.col(2 * d + 1) = x;
    xs(d, 2 * d) += h;
    xs(d, 2 * d + 1) -= h;
  }
  const Eigen::VectorXd t = Eigen::VectorXd::Constant(4, schedule.t(step));
  const Batch2 eps = net.forward(xs, t);
  Mat2 J;
  for (int d = 0; d < 2; ++d) {
    // x0_hat = (x - b eps) / a
    const Vec2 up = (xs.col(2 * d) - b * eps.col(2 * d)) / a;
    const Vec2 dn = (xs.col(2 * d + 1) - b * eps.col(2 * d + 1)) / a;
    J.col(d) = (up - dn) / (2.0 * h);
  }
  return J;
}

void write_checkpoint(const ScoreNet& net, const std::string& path) {
  if (path.empty()) return;
  std::ofstream f(path);
  f << net.to_json();
}

}  // namespace

FinetuneResult rsm_finetune(const ScoreNet& ref, ScoreNet& net, const TiltedPair& pair,
                            const MethodConfig& method, const ReverseSchedule& schedule,
                            const FinetuneConfig& cfg) {
  if (cfg.iters < 0 || cfg.trajectories < 1 || cfg.group_size < 1 || cfg.updates_per_batch < 1 ||
      cfg.steps_per_traj < 0) {
    throw ConfigError("invalid fine-tuning config");
  }
  if (cfg.trajectories % cfg.group_size != 0) throw ConfigError("trajectories must be a multiple of group_size");
  if (schedule.flow().kind() != FlowKind::VP) throw ConfigError("fine-tuning runs on VP schedules");
  if (method.n_steps() != schedule.n_steps()) throw ConfigError("method tables do not match the schedule");

  const int N = schedule.n_steps();
  const int B = cfg.trajectories;
  const int K = cfg.group_size;
  const int G = B / K;
  const LinearReward& reward = pair.reward;

  Adam opt;
  opt.lr = cfg.lr;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.adam_eps;

  std::vector<int> branchable;
  for (int i = 1; i <= N; ++i) {
    if (schedule.sde(i).sigma > 0.0 && method.is_valid(i)) branchable.push_back(i);
  }
  if (branchable.empty()) throw ConfigError("method has no usable steps on this schedule");

  FinetuneResult result;
  Rng rng(cfg.seed);
  ScoreNet old = net;
  Eigen::VectorXd last_good = net.params();

  for (int epoch = 0; epoch < cfg.iters; ++epoch) {
    old = net;
    const std::uint64_t useed = stream_key(cfg.seed, static_cast<std::uint64_t>(epoch) + 1);
    NetField old_field(old, schedule);

    // --- collect a batch under the data-collecting policy
    std::vector<int> branch_step(static_cast<std::size_t>(G), N);
    if (K > 1) {
      for (auto& ib : branch_step) ib = branchable[rng.index(branchable.size())];
    }
    std::vector<Batch2> X(static_cast<std::size_t>(N) + 1), E(static_cast<std::size_t>(N) + 1),
        S_old(static_cast<std::size_t>(N) + 1);
    Batch2 x(2, B);
    for (int b = 0; b < B; ++b) {
      x.col(b) = keyed_normal2(stream_key(useed, static_cast<std::uint64_t>(b / K)) ^ kStartSalt);
    }
    X[static_cast<std::size_t>(N)] = x;
    for (int i = N; i >= 1; --i) {
      const KernelCoeffs& k = schedule.sde(i);
      const Batch2 s = old_field.score_batch(x, i);
      Batch2 e = Batch2::Zero(2, B);
      if (k.sigma > 0.0) {
        for (int b = 0; b < B; ++b) {
          const int g = b / K;
          const std::uint64_t gk = stream_key(useed, static_cast<std::uint64_t>(g));
          const std::uint64_t base = i > branch_step[static_cast<std::size_t>(g)]
                                         ? gk
                                         : stream_key(gk, kMemberSalt + static_cast<std::uint64_t>(b % K));
          e.col(b) = keyed_normal2(stream_key(base, static_cast<std::uint64_t>(i)));
        }
      }
      x = k.kappa * x + k.omega * s + k.sigma * e;
      S_old[static_cast<std::size_t>(i)] = s;
      E[static_cast<std::size_t>(i)] = e;
      X[static_cast<std::size_t>(i - 1)] = x;
    }

    std::vector<double> rewards(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) rewards[static_cast<std::size_t>(b)] = reward(X[0].col(b));
    std::vector<double> adv(static_cast<std::size_t>(B));
    if (K > 1) {
      for (int g = 0; g < G; ++g) {
        std::vector<double> grp(rewards.begin() + g * K, rewards.begin() + (g + 1) * K);
        const auto st = reward_stats(grp, cfg.stats);
        std::copy(st.advantage.begin(), st.advantage.end(), adv.begin() + g * K);
      }
    } else {
      adv = reward_stats(rewards, cfg.stats).advantage;
    }

    // --- training pairs
    std::vector<Pair> pairs;
    std::vector<double> pair_weight;  // candidates / chosen, for per-trajectory sums
    for (int b = 0; b < B; ++b) {
      const int ib = branch_step[static_cast<std::size_t>(b / K)];
      std::vector<int> cand;
      for (int i = 1; i <= ib; ++i) {
        if (method.is_valid(i)) cand.push_back(i);
      }
      std::size_t take = cand.size();
      if (cfg.steps_per_traj > 0) take = std::min(take, static_cast<std::size_t>(cfg.steps_per_traj));
      for (std::size_t q = 0; q < take; ++q) {
        const std::size_t r = q + rng.index(cand.size() - q);
        std::swap(cand[q], cand[r]);
        pairs.push_back({b, cand[q]});
        pair_weight.push_back(static_cast<double>(cand.size()) / static_cast<double>(take));
      }
    }
    const auto P = static_cast<Eigen::Index>(pairs.size());
    if (P == 0) throw ConfigError("no training pairs in batch");

    Batch2 px(2, P), psi_bar(2, P), s_old(2, P), peps(2, P);
    Eigen::VectorXd pt(P);
    for (Eigen::Index p = 0; p < P; ++p) {
      const auto [b, i] = pairs[static_cast<std::size_t>(p)];
      const KernelCoeffs& k = schedule.sde(i);
      px.col(p) = X[static_cast<std::size_t>(i)].col(b);
      pt[p] = schedule.t(i);
      s_old.col(p) = S_old[static_cast<std::size_t>(i)].col(b);
      peps.col(p) = E[static_cast<std::size_t>(i)].col(b);
      Vec2 pb = Vec2::Zero();
      switch (method.estimator) {
        case EstimatorKind::ZerothOrder:
          pb = k.sigma / k.omega * adv[static_cast<std::size_t>(b)] * peps.col(p);
          break;
        case EstimatorKind::FirstOrder: {
          const int j = method.lookahead_index(i);
          const Vec2 xj = X[static_cast<std::size_t>(j)].col(b);
          const Mat2 J = net_tweedie_jacobian(old, schedule, xj, j);
          const double scale = j == i ? 1.0 : k.sigma * k.sigma / k.omega;
          pb = scale * (J.transpose() * reward.slope);
          break;
        }
      }
      psi_bar.col(p) = pb;
    }
    const Batch2 eps_ref = ref.forward(px, pt);

    double kl_sum = 0.0, drift_sum = 0.0;
    int suppressed = 0;
    for (int u = 0; u < cfg.updates_per_batch; ++u) {
      ScoreNet::Cache cache;
      const Batch2 eps_theta = net.forward(px, pt, &cache);
      Batch2 d_eps(2, P);
      std::vector<double> lr_vals(static_cast<std::size_t>(P), 0.0);
      double lr_mean = 0.0;
      if (method.clip.kind == ClipKind::GuardCentered) {
        for (Eigen::Index p = 0; p < P; ++p) {
          const int i = pairs[static_cast<std::size_t>(p)].step;
          const KernelCoeffs& k = schedule.sde(i);
          const Vec2 s_th = -eps_theta.col(p) / schedule.b(i);
          lr_vals[static_cast<std::size_t>(p)] =
              k.sigma > 0.0 ? log_ratio(k.omega * s_th, k.omega * s_old.col(p).eval(), k.sigma, peps.col(p)) : 0.0;
        }
        lr_mean = pairwise_sum(lr_vals) / static_cast<double>(P);
      }
      kl_sum = drift_sum = 0.0;
      suppressed = 0;
      for (Eigen::Index p = 0; p < P; ++p) {
        const auto [b, i] = pairs[static_cast<std::size_t>(p)];
        const KernelCoeffs& k = schedule.sde(i);
        const double bi = schedule.b(i);
        const Vec2 s_th = -eps_theta.col(p) / bi;
        const Vec2 s_rf = -eps_ref.col(p) / bi;
        const Vec2 s_od = s_old.col(p);
        ClipDecision dec = ClipDecision::Active;
        if (method.clip.kind != ClipKind::None && k.sigma > 0.0) {
          ClipContext ctx{peps.col(p), lr_mean};
          dec = apply_clip(method.clip, k.omega * s_th, k.omega * s_od, k.sigma, schedule.grid().dt(i),
                           adv[static_cast<std::size_t>(b)], ctx);
        }
        if (dec == ClipDecision::Suppressed) ++suppressed;
        const Vec2 g = method_gradient(method, i, s_th, s_rf, s_od, psi_bar.col(p),
                                       adv[static_cast<std::size_t>(b)], dec);
        // dL/d eps_theta = 2 G * d s/d eps = -2 G / b
        d_eps.col(p) = (-2.0 / bi / static_cast<double>(P)) * g;
        if (k.sigma > 0.0) {
          const double dm2 = (k.omega * (s_od - s_rf)).squaredNorm();
          kl_sum += pair_weight[static_cast<std::size_t>(p)] * dm2 / (2.0 * k.sigma * k.sigma);
          drift_sum += pair_weight[static_cast<std::size_t>(p)] * dm2;
        }
      }
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(ScoreNet::kParams);
      net.backward(cache, d_eps, grad);
      if (!finite(grad)) {
        net.params() = last_good;
        write_checkpoint(net, cfg.checkpoint_path);
        throw TrainingError("fine-tuning produced a non-finite gradient at epoch " + std::to_string(epoch));
      }
      last_good = net.params();
      opt.step(net.params(), grad);
      if (!finite(net.params())) {
        net.params() = last_good;
        write_checkpoint(net, cfg.checkpoint_path);
        throw TrainingError("fine-tuning diverged at epoch " + std::to_string(epoch));
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.reward_mean = pairwise_sum(rewards) / B;
    std::vector<double> sq(rewards.size());
    for (std::size_t k = 0; k < rewards.size(); ++k) sq[k] = (rewards[k] - m.reward_mean) * (rewards[k] - m.reward_mean);
    m.reward_se = B > 1 ? std::sqrt(pairwise_sum(sq) / (B - 1) / B) : 0.0;
    m.kl_proxy = kl_sum / B;
    m.drift = drift_sum / B;
    m.clip_fraction = static_cast<double>(suppressed) / static_cast<double>(P);
    result.log.push_back(m);
  }
  return result;
}

std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  os << "epoch,reward_mean,reward_se,kl_proxy,drift,clip_fraction\n";
  char buf[512];
  for (const auto& m : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.reward_mean, m.reward_se,
                  m.kl_proxy, m.drift, m.clip_fraction);
    os << buf;
  }
  return os.str();
}

double smoothed_reward(const std::vector<EpochMetrics>& log, int window) {
  if (log.empty()) return 0.0;
  const auto w = std::min<std::size_t>(log.size(), static_cast<std::size_t>(std::max(window, 1)));
  double acc = 0.0;
  for (std::size_t k = log.size() - w; k < log.size(); ++k) acc += log[k].reward_mean;
  return acc / static_cast<double>(w);
}

}  // namespace rsm
