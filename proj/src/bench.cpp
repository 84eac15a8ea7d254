#include "rsm/bench.hpp"

#include "rsm/errors.hpp"
#include "rsm/score_net.hpp"
#include "rsm/svg.hpp"
#include "rsm/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

namespace rsm {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------------------
// RMSE bench

struct Cell {
  int i = 0;
  std::size_t estimator = 0;
  int size = 0;
};

RolloutPlan make_plan(const EstimatorSpec& e, const ReverseSchedule& schedule, int i, int K) {
  const int n = schedule.n_steps();
  const int j = e.lookahead_index(i);
  RolloutPlan plan = RolloutPlan::full(n, true);
  plan.lookahead = j;
  plan.branch[static_cast<std::size_t>(i)] = K;
  const int m = static_cast<int>(e.pattern.size());
  if (m > 0) {
    if (i - j < m + 1) throw ConfigError(e.name + ": pattern does not fit between i and j");
    for (int l = 1; l <= m; ++l) {
      const int level = i - static_cast<int>(std::lround(static_cast<double>(l) * (i - j) / (m + 1)));
      plan.branch[static_cast<std::size_t>(level)] = e.pattern[static_cast<std::size_t>(l - 1)];
    }
  }
  if (e.localized) {
    for (int s = 1; s <= n; ++s) {
      plan.stochastic[static_cast<std::size_t>(s)] = (s == i || plan.width(s) > 1) ? 1 : 0;
    }
  }
  plan.validate(schedule, i);
  return plan;
}

struct EstimateOut {
  Vec2 value;
  int n_samples;
};

EstimateOut estimate(const EstimatorSpec& e, const Vec2& x, int i, int K, const ReverseSchedule& schedule,
                     const ScoreField& field, const LinearReward& reward, double alpha, std::uint64_t seed) {
  if (e.family == EstimatorFamily::FirstOrderCurrent) {
    return {psi_cs_first_order(x, i, field, schedule, reward, alpha).value, 1};
  }
  const RolloutPlan plan = make_plan(e, schedule, i, K);
  RolloutOptions opts;
  opts.reward = [reward](const Vec2& y) { return reward(y); };
  const BranchTree tree = rollout(x, i, schedule, plan, field, seed, opts);
  const int leaves = static_cast<int>(tree.leaves.size());
  if (e.family == EstimatorFamily::ZerothOrder) {
    return {psi_la_zeroth_order(tree, schedule, alpha, e.stats).value, leaves};
  }
  return {psi_la_first_order(tree, schedule, plan, field, opts, alpha).value, leaves};
}

int min_branches(const EstimatorSpec& e) {
  return (e.family == EstimatorFamily::ZerothOrder && e.stats != StatsMode::Raw) ? 2 : 1;
}

std::uint64_t point_seed(std::uint64_t seed, int i, int point) {
  return stream_key(stream_key(seed, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(point));
}

}  // namespace

RmseResult run_rmse_bench(const ExperimentConfig& cfg, int threads) {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  const RmseSpec& spec = cfg.rmse;
  if (spec.estimators.empty()) throw ConfigError("rmse.estimators is empty");
  const ReverseSchedule schedule = cfg.schedule();
  const TiltedPair pair = cfg.pair();
  const MixtureField target(pair.target, schedule);
  const MixtureField reference(pair.reference, schedule);
  const ScoreField& base_field = spec.rollout_reference ? static_cast<const ScoreField&>(reference)
                                                        : static_cast<const ScoreField&>(target);
  const std::vector<int> steps = spec.resolved_steps(cfg.n_steps);
  const int n_est = spec.n_points * spec.n_repeats;

  // Evaluation points and ground truth per step.
  std::map<int, std::vector<Vec2>> points, truth;
  for (int i : steps) {
    if (points.count(i)) continue;
    const GaussianMixture marg = marginal_at(pair.reference, schedule.flow(), schedule.t(i));
    auto& pts = points[i];
    auto& tru = truth[i];
    const int n_pts = spec.fixed_point ? 1 : spec.n_points;
    for (int p = 0; p < n_pts; ++p) {
      Rng rng(point_seed(cfg.seed ^ 0x5eedULL, i, p));
      pts.push_back(sample(marg, rng));
      const Vec2 ps = psi_star(pair, schedule.flow(), schedule.t(i), pts.back());
      if (!ps.allFinite()) throw DomainError("oracle Psi* is not finite at step " + std::to_string(i));
      tru.push_back(ps);
    }
  }

  // Cells; under the NFE unit K is set from the (affine) per-estimate cost, probed once per pair.
  std::vector<Cell> cells;
  std::map<std::pair<int, std::size_t>, std::pair<double, double>> cost;  // (base, per-branch)
  for (int i : steps) {
    for (std::size_t e = 0; e < spec.estimators.size(); ++e) {
      const EstimatorSpec& est = spec.estimators[e];
      if (est.family == EstimatorFamily::FirstOrderCurrent) {
        cells.push_back({i, e, 1});
        continue;
      }
      if (spec.size_unit == SizeUnit::Nfe) {
        const Vec2 x = points.at(i).front();
        std::uint64_t c[2];
        for (int K = 1; K <= 2; ++K) {
          CountingField f(base_field);
          estimate(est, x, i, K, schedule, f, pair.reward, pair.alpha, 0);
          c[K - 1] = f.calls();
        }
        const double per = static_cast<double>(c[1]) - static_cast<double>(c[0]);
        cost[{i, e}] = {static_cast<double>(c[0]) - per, per};
      }
      for (int size : spec.sizes) cells.push_back({i, e, size});
    }
  }

  std::vector<std::optional<ResultRow>> out(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= cells.size()) return;
      try {
        const Cell& cell = cells[c];
        const EstimatorSpec& est = spec.estimators[cell.estimator];
        int K = cell.size;
        if (est.family == EstimatorFamily::FirstOrderCurrent) {
          K = 1;
        } else if (spec.size_unit == SizeUnit::Nfe) {
          const auto [base, per] = cost.at({cell.i, cell.estimator});
          K = per > 0.0 ? static_cast<int>(std::floor((cell.size - base) / per)) : 0;
        }
        if (K < min_branches(est)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        const auto& pts = points.at(cell.i);
        const auto& tru = truth.at(cell.i);
        std::vector<Vec2> err;
        err.reserve(static_cast<std::size_t>(n_est));
        CountingField field(base_field);
        int leaves = 0;
        for (int p = 0; p < spec.n_points; ++p) {
          const std::size_t pi = spec.fixed_point ? 0 : static_cast<std::size_t>(p);
          for (int r = 0; r < spec.n_repeats; ++r) {
            const std::uint64_t s =
                stream_key(point_seed(cfg.seed, cell.i, p), static_cast<std::uint64_t>(r));
            const EstimateOut o = estimate(est, pts[pi], cell.i, K, schedule, field, pair.reward, pair.alpha, s);
            leaves = o.n_samples;
            err.push_back(o.value - tru[pi]);
          }
        }
        const Vec2 mean = pairwise_mean(err);
        std::vector<double> sq(err.size()), dev(err.size());
        for (std::size_t k = 0; k < err.size(); ++k) {
          sq[k] = err[k].squaredNorm();
          dev[k] = (err[k] - mean).squaredNorm();
        }
        const double n = static_cast<double>(err.size());
        ResultRow row;
        row.experiment_id = cfg.experiment_id;
        row.method = est.name;
        row.estimator = to_string(est.family);
        row.i = cell.i;
        row.t = schedule.t(cell.i);
        row.j = est.lookahead_index(cell.i);
        row.K = K;
        row.n_samples = leaves;
        row.seed = cfg.seed;
        row.rmse = std::sqrt(pairwise_sum(sq) / n);
        row.bias_norm = mean.norm();
        row.var_trace = pairwise_sum(dev) / n;
        row.nfe = static_cast<double>(field.calls()) / n;
        row.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0)
                          .count();
        out[c] = row;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(cells.size());
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min<int>(threads, static_cast<int>(std::max<std::size_t>(cells.size(), 1)));
  for (int k = 1; k < n_threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  RmseResult res;
  for (auto& r : out) {
    if (r) res.rows.push_back(std::move(*r));
  }
  return res;
}

std::string rows_csv(const std::vector<ResultRow>& rows) {
  std::string s = "experiment_id,method,estimator,i,t,j,K,n_samples,seed,rmse,bias_norm,var_trace,nfe\n";
  for (const auto& r : rows) {
    s += r.experiment_id + "," + r.method + "," + r.estimator + "," + std::to_string(r.i) + "," + fmt(r.t) + "," +
         std::to_string(r.j) + "," + std::to_string(r.K) + "," + std::to_string(r.n_samples) + "," +
         std::to_string(r.seed) + "," + fmt(r.rmse) + "," + fmt(r.bias_norm) + "," + fmt(r.var_trace) + "," +
         fmt(r.nfe) + "\n";
  }
  return s;
}

std::string timings_csv(const std::vector<ResultRow>& rows) {
  std::string s = "method,i,K,wall_ns\n";
  for (const auto& r : rows) {
    s += r.method + "," + std::to_string(r.i) + "," + std::to_string(r.K) + "," + std::to_string(r.wall_ns) + "\n";
  }
  return s;
}

std::string rmse_svg(const std::vector<ResultRow>& rows) {
  Chart chart;
  chart.title = "Estimator RMSE vs NFE";
  chart.x_label = "NFE per estimate";
  chart.y_label = "RMSE";
  chart.log_y = true;
  std::map<std::pair<std::string, int>, Series> by;
  std::vector<std::pair<std::string, int>> order;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.method, r.i);
    if (!by.count(key)) {
      order.push_back(key);
      by[key].name = r.method + " i=" + std::to_string(r.i);
    }
    by[key].x.push_back(r.nfe);
    by[key].y.push_back(r.rmse);
  }
  for (const auto& k : order) chart.series.push_back(by[k]);
  return emit_svg(chart);
}

// ---------------------------------------------------------------------------------------
// Schedule dump

int crossover_index(const std::vector<ScheduleRow>& rows, const std::string& a, const std::string& b) {
  std::map<int, double> ha, hb;
  for (const auto& r : rows) {
    if (r.method == a) ha[r.step] = r.h;
    if (r.method == b) hb[r.step] = r.h;
  }
  int prev_sign = 0;
  for (const auto& [step, va] : ha) {
    const auto it = hb.find(step);
    if (it == hb.end()) continue;
    const double d = va - it->second;
    const int sign = (d > 0.0) - (d < 0.0);
    if (sign == 0) return step;
    if (prev_sign != 0 && sign != prev_sign) return step;
    prev_sign = sign;
  }
  return -1;
}

ScheduleDump run_schedule_dump(const ExperimentConfig& cfg) {
  const ReverseSchedule schedule = cfg.schedule();
  const ScheduleSpec& spec = cfg.schedules;
  MethodOptions opts;
  opts.alpha = spec.alpha;
  opts.sqdf_gamma_base = spec.sqdf_gamma_base;
  opts.resdb_wR_over_wF = spec.resdb_wR_over_wF;

  ScheduleDump d;
  for (MethodName name : spec.methods) {
    const MethodConfig m = table1_config(name, schedule, opts);
    for (int i = 1; i <= m.n_steps(); ++i) {
      if (!m.is_valid(i)) continue;
      const KernelCoeffs& k = schedule.sde(i);
      ScheduleRow r;
      r.method = to_string(name);
      r.step = i;
      r.t = schedule.t(i);
      r.gamma = m.gamma[static_cast<std::size_t>(i)];
      r.c1 = m.c1(i);
      r.c2 = m.c2(i, spec.c2_reward);
      r.h = m.h[static_cast<std::size_t>(i)];
      r.omega = k.omega;
      r.sigma = k.sigma;
      r.delta = k.delta;
      r.w = k.sigma > 0.0 ? sampler_weight(k) : std::nan("");
      if (name == MethodName::PCPO_ReweightFlow) r.w *= r.gamma;  // reweighted w'
      d.rows.push_back(r);
    }
  }

  d.csv = "method,step,t,gamma,c1,c2,h,w,omega,sigma,delta\n";
  for (const auto& r : d.rows) {
    d.csv += r.method + "," + std::to_string(r.step) + "," + fmt(r.t) + "," + fmt(r.gamma) + "," + fmt(r.c1) + "," +
             fmt(r.c2) + "," + fmt(r.h) + "," + fmt(r.w) + "," + fmt(r.omega) + "," + fmt(r.sigma) + "," +
             fmt(r.delta) + "\n";
  }

  auto rows_of = [&](MethodName n) {
    std::vector<ScheduleRow> out;
    for (const auto& r : d.rows) {
      if (r.method == to_string(n)) out.push_back(r);
    }
    return out;
  };
  const auto vgg = rows_of(MethodName::VGGFlow);
  for (std::size_t k = 1; k < vgg.size(); ++k) {
    if (!(vgg[k].h < vgg[k - 1].h)) d.vgg_decreasing = false;
  }
  const auto temp = rows_of(MethodName::TempFlowGRPO);
  const auto ppo = rows_of(MethodName::PPO_GRPO);
  if (!temp.empty() && !ppo.empty()) {
    std::map<int, double> hp;
    for (const auto& r : ppo) hp[r.step] = r.h;
    std::vector<std::pair<int, double>> common;  // (step, temp h) valid for both, by step
    for (const auto& r : temp) {
      if (hp.count(r.step)) common.emplace_back(r.step, r.h);
    }
    const std::size_t q = (common.size() + 3) / 4;
    for (std::size_t k = common.size() - q; k < common.size(); ++k) {
      if (!(common[k].second > hp.at(common[k].first))) d.tempflow_exceeds_ppo_low_snr = false;
    }
  }
  for (const auto& r : rows_of(MethodName::GRPOGuard)) {
    if (r.step < schedule.n_steps() && !std::isfinite(r.h)) d.guard_finite = false;
  }
  d.tempflow_ppo_crossover =
      crossover_index(d.rows, to_string(MethodName::TempFlowGRPO), to_string(MethodName::PPO_GRPO));
  d.reinforce_reweight_crossover =
      crossover_index(d.rows, to_string(MethodName::REINFORCE_KL), to_string(MethodName::PCPO_ReweightFlow));

  Chart chart;
  chart.title = "Influence h(t) per method";
  chart.x_label = "t";
  chart.y_label = "h";
  chart.log_y = spec.log_scale;
  for (MethodName n : spec.methods) {
    Series s;
    s.name = to_string(n);
    for (const auto& r : rows_of(n)) {
      s.x.push_back(r.t);
      s.y.push_back(r.h);
    }
    chart.series.push_back(std::move(s));
  }
  d.svg = emit_svg(chart);

  nlohmann::json j;
  j["experiment_id"] = cfg.experiment_id;
  j["vgg_flow_h_strictly_decreasing"] = d.vgg_decreasing;
  j["tempflow_exceeds_ppo_low_snr_quartile"] = d.tempflow_exceeds_ppo_low_snr;
  j["grpo_guard_h_finite"] = d.guard_finite;
  j["tempflow_ppo_crossover_step"] = d.tempflow_ppo_crossover;
  j["reinforce_reweight_flow_crossover_step"] = d.reinforce_reweight_crossover;
  d.summary_json = j.dump(2) + "\n";
  return d;
}

// ---------------------------------------------------------------------------------------
// Kernel audit

namespace {

double rel_err(const Vec2& got, const Vec2& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-300); }

Vec2 coeff_step(const KernelCoeffs& k, double omega_scale, const Vec2& x, const Vec2& s, const Vec2& z) {
  return k.kappa * x + omega_scale * k.omega * s + k.sigma * z;
}

Vec2 ddim_direct(double ab, double ab_p, double sigma, const Vec2& x, const Vec2& s, const Vec2& z) {
  const Vec2 eps_hat = -std::sqrt(1.0 - ab) * s;
  const Vec2 x0 = (x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
  return std::sqrt(ab_p) * x0 + std::sqrt(1.0 - ab_p - sigma * sigma) * eps_hat + sigma * z;
}

Vec2 dpmpp_direct(double ab, double ab_p, const Vec2& x, const Vec2& s, const Vec2& z) {
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  const double ap = std::sqrt(ab_p), bp = std::sqrt(1.0 - ab_p);
  const double h = std::log(ap / bp) - std::log(a / b);
  const Vec2 x0 = (x + b * b * s) / a;
  return bp / b * std::exp(-h) * x + ap * (1.0 - std::exp(-2.0 * h)) * x0 + bp * std::sqrt(1.0 - std::exp(-2.0 * h)) * z;
}

Vec2 euler_direct(double t, double dt, double sig_tilde, const Vec2& x, const Vec2& s, const Vec2& z) {
  const Vec2 v = -(x + t * s) / (1.0 - t);
  return x - dt * v + 0.5 * sig_tilde * sig_tilde * dt * s + sig_tilde * std::sqrt(dt) * z;
}

struct Worst {
  double value = 0.0;
  void add(double e) { value = std::isnan(e) ? INFINITY : std::max(value, e); }
};

AuditCheck make_check(const std::string& name, double worst, double tol) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "max rel err %.3e (tol %.0e)", worst, tol);
  return {name, worst <= tol, buf};
}

}  // namespace

bool AuditReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const AuditCheck& c) { return c.passed; });
}

std::string AuditReport::text() const {
  std::string s;
  for (const auto& c : checks) s += (c.passed ? "PASS " : "FAIL ") + c.name + ": " + c.detail + "\n";
  s += passed() ? "audit: all checks passed\n" : "audit: FAILED\n";
  return s;
}

AuditReport run_kernel_audit(const ExperimentConfig& cfg) {
  const AuditSpec& a = cfg.audit;
  const ReverseSchedule schedule = cfg.schedule();

  // Validate an overridden DDIM sigma on the configured grid before anything else runs.
  if (a.sigma_override) {
    if (schedule.flow().kind() != FlowKind::VP) throw ConfigError("audit.sigma needs a VP flow");
    for (int i = 1; i <= schedule.n_steps(); ++i) {
      const double ab = schedule.a(i) * schedule.a(i), ab_p = schedule.a(i - 1) * schedule.a(i - 1);
      (void)ddim_kernel(ab, ab_p, *a.sigma_override);
    }
  }

  AuditReport rep;
  Rng rng(stream_key(cfg.seed, 0xa0d17ULL));
  Worst ddim, dpm, euler, delta_vp, delta_rf, w_id, w_closed;
  for (int n = 0; n < a.instances; ++n) {
    const double ab = 0.001 + 0.998 * rng.uniform();
    const double ab_p = ab + (0.05 + 0.9 * rng.uniform()) * (1.0 - ab);
    const double sigma = rng.uniform() * std::sqrt(1.0 - ab_p);
    const Vec2 x = 3.0 * rng.normal2(), s = 3.0 * rng.normal2(), s2 = 3.0 * rng.normal2(), z = rng.normal2();

    const KernelCoeffs kd = ddim_kernel(ab, ab_p, sigma);
    ddim.add(rel_err(coeff_step(kd, a.omega_scale, x, s, z), ddim_direct(ab, ab_p, sigma, x, s, z)));
    const KernelCoeffs kp = dpmpp_kernel(ab, ab_p);
    dpm.add(rel_err(coeff_step(kp, a.omega_scale, x, s, z), dpmpp_direct(ab, ab_p, x, s, z)));

    const double t = 0.02 + 0.96 * rng.uniform();
    const double dt = (0.01 + 0.98 * rng.uniform()) * t;
    const double sig_t = 2.0 * rng.uniform();
    const KernelCoeffs ke = euler_rf_kernel(t, dt, sig_t);
    euler.add(rel_err(coeff_step(ke, a.omega_scale, x, s, z), euler_direct(t, dt, sig_t, x, s, z)));

    // delta: s_theta - s_ref = -delta (out_theta - out_ref) for the model's native output.
    const double b = std::sqrt(1.0 - ab);
    const Vec2 ds = s - s2;
    delta_vp.add(rel_err((-kd.delta * (-b * s - (-b * s2))).eval(), ds));
    delta_vp.add(rel_err((-kp.delta * (-b * s - (-b * s2))).eval(), ds));
    const Vec2 v1 = -(x + t * s) / (1.0 - t), v2 = -(x + t * s2) / (1.0 - t);
    delta_rf.add(rel_err((-ke.delta * (v1 - v2)).eval(), ds));

    // w = Omega delta / sigma, and the DDPM-noise closed form.
    for (const KernelCoeffs* k : {&kd, &kp, &ke}) {
      if (k->sigma > 0.0) {
        w_id.add(rel_err(*k->w, k->omega * k->delta / k->sigma));
        w_id.add(rel_err(sampler_weight(*k), k->omega * k->delta / k->sigma));
      }
    }
    const double s_ddpm = std::sqrt((1.0 - ab_p) * (ab_p - ab) / ((1.0 - ab) * ab_p));
    const KernelCoeffs kq = ddim_kernel(ab, ab_p, s_ddpm);
    w_closed.add(rel_err(sampler_weight(kq), (ab_p - ab) / std::sqrt(ab * ab_p) / b / s_ddpm));
  }

  // Configured grid with its own sampler (and the overridden DDIM sigma when given).
  Worst grid;
  if (schedule.flow().kind() == FlowKind::VP || schedule.sampler() == SamplerKind::EulerFlow) {
    for (int i = 1; i <= schedule.n_steps(); ++i) {
      if (!schedule.has_kernel(i)) continue;
      const Vec2 x = rng.normal2(), s = rng.normal2(), z = rng.normal2();
      const double ab = schedule.a(i) * schedule.a(i), ab_p = schedule.a(i - 1) * schedule.a(i - 1);
      Vec2 direct;
      KernelCoeffs k = schedule.sde(i);
      switch (schedule.sampler()) {
        case SamplerKind::DDIM: {
          const double sg = a.sigma_override.value_or(k.sigma);
          k = ddim_kernel(ab, ab_p, sg);
          direct = ddim_direct(ab, ab_p, k.sigma, x, s, z);
          break;
        }
        case SamplerKind::DPMSolverPP:
          if (ab_p >= 1.0) continue;
          direct = dpmpp_direct(ab, ab_p, x, s, z);
          break;
        case SamplerKind::EulerFlow: {
          const double st = schedule.noise().sigma_tilde(schedule.flow(), schedule.grid(), i);
          direct = euler_direct(schedule.t(i), schedule.grid().dt(i), st, x, s, z);
          break;
        }
      }
      grid.add(rel_err(coeff_step(k, a.omega_scale, x, s, z), direct));
    }
  }

  rep.checks.push_back(make_check("ddim_equivalence", ddim.value, 1e-10));
  rep.checks.push_back(make_check("dpmpp_equivalence", dpm.value, 1e-10));
  rep.checks.push_back(make_check("euler_rf_equivalence", euler.value, 1e-10));
  rep.checks.push_back(make_check("configured_grid_equivalence", grid.value, 1e-10));
  rep.checks.push_back(make_check("delta_vp_eps", delta_vp.value, 1e-12));
  rep.checks.push_back(make_check("delta_rf_velocity", delta_rf.value, 1e-12));
  rep.checks.push_back(make_check("w_identity", w_id.value, 1e-12));
  rep.checks.push_back(make_check("w_ddpm_closed_form", w_closed.value, 1e-12));

  // Tilt weights against 2D grid quadrature of w_k N(x; mu_k, v I) exp(r(x)/alpha).
  const TiltedPair pair = cfg.pair();
  {
    const GaussianMixture& ref = pair.reference;
    const double sd = std::sqrt(ref.component_var);
    Vec2 lo = ref.means[0], hi = ref.means[0];
    for (const auto& m : ref.means) {
      lo = lo.cwiseMin(m);
      hi = hi.cwiseMax(m);
    }
    const Vec2 shift = ref.component_var * pair.reward.slope / pair.alpha;
    lo = lo.cwiseMin(lo + shift) - Vec2::Constant(12.0 * sd);
    hi = hi.cwiseMax(hi + shift) + Vec2::Constant(12.0 * sd);
    constexpr int kNodes = 1201;
    const Vec2 step = (hi - lo) / (kNodes - 1);
    std::vector<double> mass(ref.size(), 0.0);
    for (std::size_t c = 0; c < ref.size(); ++c) {
      std::vector<double> col(kNodes);
      for (int u = 0; u < kNodes; ++u) {
        std::vector<double> row(kNodes);
        for (int v = 0; v < kNodes; ++v) {
          const Vec2 x(lo[0] + u * step[0], lo[1] + v * step[1]);
          const double q = (x - ref.means[c]).squaredNorm() / ref.component_var;
          row[static_cast<std::size_t>(v)] =
              std::exp(-0.5 * q + pair.reward(x) / pair.alpha) / (2.0 * M_PI * ref.component_var);
        }
        col[static_cast<std::size_t>(u)] = pairwise_sum(row);
      }
      mass[c] = ref.weights[c] * pairwise_sum(col) * step[0] * step[1];
    }
    const double total = pairwise_sum(mass);
    double worst = 0.0;
    for (std::size_t c = 0; c < ref.size(); ++c) {
      worst = std::max(worst, std::abs(mass[c] / total - pair.target.weights[c]));
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "max abs err %.3e (tol 1e-06)", worst);
    rep.checks.push_back({"tilt_weights_vs_quadrature", worst <= 1e-6, buf});
  }

  // Analytic scores of the noised marginals against central differences of log p.
  {
    double worst = 0.0;
    Rng r2(stream_key(cfg.seed, 0x5c0deULL));
    for (int n = 0; n < 200; ++n) {
      const double t = 0.05 + 0.9 * r2.uniform();
      const GaussianMixture& g = (n % 2 == 0) ? pair.reference : pair.target;
      const GaussianMixture m = marginal_at(g, cfg.flow, t);
      const Vec2 x = m.means[r2.index(m.size())] + 2.0 * r2.normal2();
      constexpr double h = 1e-5;
      Vec2 fd;
      for (int d = 0; d < kDim; ++d) {
        Vec2 xp = x, xm = x;
        xp[d] += h;
        xm[d] -= h;
        fd[d] = (logpdf(m, xp) - logpdf(m, xm)) / (2.0 * h);
      }
      worst = std::max(worst, (score(m, x) - fd).norm() / std::max(1.0, fd.norm()));
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "max err %.3e (tol 1e-06)", worst);
    rep.checks.push_back({"score_vs_finite_difference", worst <= 1e-6, buf});
  }
  return rep;
}

// ---------------------------------------------------------------------------------------
// Training

MethodConfig train_method(const ExperimentConfig& cfg, const ReverseSchedule& schedule) {
  const MethodSpec& ms = cfg.train.method;
  MethodOptions opts;
  opts.alpha = ms.alpha;
  opts.clip = ms.clip;
  if (ms.name == MethodName::Custom) return truncated_current_state(schedule, ms.gamma_cutoff, opts);
  return table1_config(ms.name, schedule, opts);
}

TrainOutput run_train(const ExperimentConfig& cfg) {
  if (cfg.flow.kind() != FlowKind::VP) throw ConfigError("train needs a VP flow");
  const ReverseSchedule schedule = cfg.schedule();
  const TiltedPair pair = TiltedPair::make(cfg.reference, cfg.reward, cfg.train.method.alpha);
  TrainOutput out;

  ScoreNet ref;
  if (!cfg.train.reference_checkpoint.empty()) {
    std::ifstream f(cfg.train.reference_checkpoint);
    if (!f) throw ConfigError("cannot open reference checkpoint '" + cfg.train.reference_checkpoint + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    ref = ScoreNet::from_json(ss.str());
  } else {
    ref = ScoreNet::initialized(cfg.seed);
    PretrainConfig pc = cfg.train.pretrain;
    pc.seed = cfg.seed;
    const PretrainResult pr = pretrain(ref, pair.reference, cfg.flow, pc);
    if (!pr.loss_curve.empty()) {
      const std::size_t w = std::min<std::size_t>(50, pr.loss_curve.size());
      double s = 0.0;
      for (std::size_t k = pr.loss_curve.size() - w; k < pr.loss_curve.size(); ++k) s += pr.loss_curve[k];
      out.dsm_loss = s / static_cast<double>(w);
    }
  }
  out.reference_checkpoint = ref.to_json();

  const NetField ref_field(ref, schedule);
  if (cfg.train.w2_samples > 0) {
    const MixtureField exact(pair.reference, schedule);
    out.w2 = sampler_w2(ref_field, exact, schedule, cfg.train.w2_samples, stream_key(cfg.seed, 2));
  }
  const RewardFn reward = [r = pair.reward](const Vec2& x) { return r(x); };
  out.reward_before = eval_reward(ref_field, schedule, reward, cfg.train.eval_samples, stream_key(cfg.seed, 3)).mean;

  ScoreNet net = ref;
  FinetuneConfig fc = cfg.train.finetune;
  fc.seed = cfg.seed;
  const MethodConfig method = train_method(cfg, schedule);
  const FinetuneResult fr = rsm_finetune(ref, net, pair, method, schedule, fc);
  out.metrics_csv = metrics_csv(fr.log);
  out.smoothed_reward = fr.log.empty() ? out.reward_before : smoothed_reward(fr.log, cfg.train.smooth_window);
  const NetField net_field(net, schedule);
  out.reward_after = eval_reward(net_field, schedule, reward, cfg.train.eval_samples, stream_key(cfg.seed, 3)).mean;
  out.checkpoint = net.to_json();

  nlohmann::json j;
  j["experiment_id"] = cfg.experiment_id;
  j["method"] = to_string(method.name);
  j["seed"] = cfg.seed;
  j["pretrained"] = cfg.train.reference_checkpoint.empty();
  j["dsm_loss_final"] = out.dsm_loss;
  j["w2_to_reference"] = out.w2;
  j["reward_before"] = out.reward_before;
  j["reward_after"] = out.reward_after;
  j["smoothed_reward"] = out.smoothed_reward;
  j["optimum_reward"] = expected_reward(pair.target, pair.reward);
  j["updates"] = fc.iters;
  out.summary_json = j.dump(2) + "\n";
  return out;
}

}  // namespace rsm
