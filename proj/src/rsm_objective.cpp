#include "rsm/rsm_objective.hpp"

#include "rsm/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace rsm {

namespace {

struct NamedMethod {
  MethodName name;
  const char* label;
};

constexpr NamedMethod kMethods[] = {
    {MethodName::VGGFlow, "vgg_flow"},
    {MethodName::SQDF, "sqdf"},
    {MethodName::ResidualNablaDB, "residual_nabla_db"},
    {MethodName::REINFORCE_KL, "reinforce_kl"},
    {MethodName::PPO_GRPO, "ppo_grpo"},
    {MethodName::PCPO_Base, "pcpo_base"},
    {MethodName::PCPO_ReweightDiffusion, "pcpo_reweight_diffusion"},
    {MethodName::PCPO_ReweightFlow, "pcpo_reweight_flow"},
    {MethodName::BranchGRPO, "branch_grpo"},
    {MethodName::TempFlowGRPO, "tempflow_grpo"},
    {MethodName::GRPOGuard, "grpo_guard"},
    {MethodName::Custom, "custom"},
};

double alpha_pow(double alpha, int p) {
  switch (p) {
    case 0: return 1.0;
    case 1: return alpha;
    case -1: return 1.0 / alpha;
    default: return std::pow(alpha, p);
  }
}

}  // namespace

std::string to_string(MethodName name) {
  for (const auto& m : kMethods) {
    if (m.name == name) return m.label;
  }
  return "?";
}

MethodName method_name_from_string(const std::string& name) {
  for (const auto& m : kMethods) {
    if (name == m.label) return m.name;
  }
  throw ConfigError("unknown method '" + name + "'");
}

const std::vector<MethodName>& named_methods() {
  static const std::vector<MethodName> all = [] {
    std::vector<MethodName> v;
    for (const auto& m : kMethods) {
      if (m.name != MethodName::Custom) v.push_back(m.name);
    }
    return v;
  }();
  return all;
}

std::string to_string(ClipKind kind) {
  switch (kind) {
    case ClipKind::None: return "none";
    case ClipKind::PPOHinge: return "ppo_hinge";
    case ClipKind::FairClip: return "fair_clip";
    case ClipKind::GuardCentered: return "guard_centered";
  }
  return "?";
}

ClipKind clip_kind_from_string(const std::string& name) {
  if (name == "none") return ClipKind::None;
  if (name == "ppo_hinge") return ClipKind::PPOHinge;
  if (name == "fair_clip") return ClipKind::FairClip;
  if (name == "guard_centered") return ClipKind::GuardCentered;
  throw ConfigError("unknown clip rule '" + name + "'");
}

void ClipRule::validate() const {
  if (kind != ClipKind::None && !(xi > 0.0)) throw ConfigError("clip threshold xi must be positive");
}

// ---------------------------------------------------------------------------------------
// clipping

double log_ratio(const Vec2& mu_theta, const Vec2& mu_old, double sigma, const Vec2& eps) {
  if (!(sigma > 0.0)) throw DomainError("log ratio needs sigma > 0");
  const Vec2 d = mu_theta - mu_old;
  return eps.dot(d) / sigma - d.squaredNorm() / (2.0 * sigma * sigma);
}

ClipDecision apply_clip(const ClipRule& rule, const Vec2& mu_theta, const Vec2& mu_old, double sigma,
                        double /*dt*/, double reward, const ClipContext& ctx) {
  rule.validate();
  switch (rule.kind) {
    case ClipKind::None:
      return ClipDecision::Active;
    case ClipKind::PPOHinge: {
      const double rho = std::exp(log_ratio(mu_theta, mu_old, sigma, ctx.eps));
      const bool inside = rho >= 1.0 - rule.xi && rho <= 1.0 + rule.xi;
      const bool below_ok = rho < 1.0 - rule.xi && reward >= 0.0;
      const bool above_ok = rho > 1.0 + rule.xi && reward <= 0.0;
      return inside || below_ok || above_ok ? ClipDecision::Active : ClipDecision::Suppressed;
    }
    case ClipKind::FairClip: {
      // The 1/(sigma~^2 dt) scale sits outside the clip, so only the raw drift is compared.
      const double drift = 0.5 * (mu_theta - mu_old).squaredNorm();
      return drift > rule.xi ? ClipDecision::Suppressed : ClipDecision::Active;
    }
    case ClipKind::GuardCentered: {
      const double lr = log_ratio(mu_theta, mu_old, sigma, ctx.eps);
      return std::abs(sigma * (lr - ctx.log_ratio_mean)) <= rule.xi ? ClipDecision::Active
                                                                   : ClipDecision::Suppressed;
    }
  }
  return ClipDecision::Active;
}

// ---------------------------------------------------------------------------------------
// MethodConfig

bool MethodConfig::is_valid(int i) const {
  return i >= 1 && i <= n_steps() && valid[static_cast<std::size_t>(i)] != 0;
}

double MethodConfig::c1(int i) const {
  if (!is_valid(i)) throw DomainError("method weights undefined at step " + std::to_string(i));
  return alpha_pow(alpha, c1_alpha_pow) * c1_bar[static_cast<std::size_t>(i)];
}

double MethodConfig::c2(int i, double reward) const {
  if (!is_valid(i)) throw DomainError("method weights undefined at step " + std::to_string(i));
  const auto k = static_cast<std::size_t>(i);
  const double base = c2_const[k] + c2_reward[k] * reward;
  return base == 0.0 ? 0.0 : alpha_pow(alpha, c2_alpha_pow) * base;
}

int MethodConfig::lookahead_index(int i) const {
  switch (lookahead) {
    case LookaheadRule::Full: return 0;
    case LookaheadRule::OneStep: return i - 1;
    case LookaheadRule::CurrentState: return i;
  }
  return 0;
}

MethodConfig table1_config(MethodName name, const ReverseSchedule& schedule, const MethodOptions& options) {
  if (name == MethodName::Custom) throw ConfigError("custom methods are assembled by the caller");
  if (!(options.alpha >= 0.0)) throw DomainError("alpha must be >= 0");
  options.clip.validate();

  MethodConfig m;
  m.name = name;
  m.clip = options.clip;
  m.alpha = options.alpha;
  m.sqdf_gamma_base = options.sqdf_gamma_base;
  m.resdb_wR_over_wF = options.resdb_wR_over_wF;

  const int n = schedule.n_steps();
  const auto sz = static_cast<std::size_t>(n) + 1;
  m.valid.assign(sz, 0);
  m.gamma.assign(sz, 0.0);
  m.c1_bar.assign(sz, 0.0);
  m.c2_const.assign(sz, 0.0);
  m.c2_reward.assign(sz, 0.0);
  m.h.assign(sz, std::numeric_limits<double>::quiet_NaN());

  switch (name) {
    case MethodName::VGGFlow:
      m.estimator = EstimatorKind::FirstOrder;
      m.lookahead = LookaheadRule::CurrentState;
      break;
    case MethodName::SQDF:
    case MethodName::ResidualNablaDB:
      m.estimator = EstimatorKind::FirstOrder;
      m.lookahead = LookaheadRule::OneStep;
      break;
    default:
      m.estimator = EstimatorKind::ZerothOrder;
      m.lookahead = LookaheadRule::Full;
      break;
  }
  m.branching = name == MethodName::BranchGRPO || name == MethodName::TempFlowGRPO;
  m.c1_alpha_pow = (name == MethodName::VGGFlow || name == MethodName::ResidualNablaDB) ? 0 : 1;
  m.c2_alpha_pow = (name == MethodName::ResidualNablaDB) ? 0 : -1;
  if (m.alpha == 0.0 && m.c1_alpha_pow == 0) {
    throw DomainError(to_string(name) + " weights are singular at alpha = 0");
  }

  // Kernel used for the weights at each step (PCPO-reweight diffusion swaps in sigma').
  auto kernel_at = [&](int i) -> std::optional<KernelCoeffs> {
    if (!schedule.has_kernel(i)) return std::nullopt;
    if (name == MethodName::PCPO_ReweightDiffusion && options.sigma_prime) {
      if (schedule.sampler() != SamplerKind::DDIM) {
        throw ConfigError("pcpo_reweight_diffusion with sigma' needs the DDIM sampler");
      }
      if (options.sigma_prime->size() != sz) throw ConfigError("sigma' table length != N+1");
      const double ab_i = schedule.a(i) * schedule.a(i);
      const double ab_p = schedule.a(i - 1) * schedule.a(i - 1);
      return ddim_kernel(ab_i, ab_p, (*options.sigma_prime)[static_cast<std::size_t>(i)]);
    }
    return schedule.sde(i);
  };

  const bool needs_sigma = name != MethodName::VGGFlow;

  // PCPO-reweight (flow): w' = zeta dt with avg(w') = avg(w) over the usable steps.
  double zeta = 0.0;
  if (name == MethodName::PCPO_ReweightFlow) {
    double sum_w = 0.0, sum_dt = 0.0;
    for (int i = 1; i <= n; ++i) {
      const auto k = kernel_at(i);
      if (!k || !(k->sigma > 0.0)) continue;
      sum_w += sampler_weight(*k);
      sum_dt += schedule.grid().dt(i);
    }
    zeta = sum_dt > 0.0 ? sum_w / sum_dt : 0.0;
  }

  for (int i = 1; i <= n; ++i) {
    const auto kopt = kernel_at(i);
    if (!kopt) continue;
    const KernelCoeffs& k = *kopt;
    if (needs_sigma && !(k.sigma > 0.0)) continue;
    const auto idx = static_cast<std::size_t>(i);
    const double t = schedule.t(i);
    const double dt = schedule.grid().dt(i);
    const double s2 = k.sigma * k.sigma;
    const double om2 = k.omega * k.omega;
    const double ab_i = schedule.a(i) * schedule.a(i);
    const double ab_p = schedule.a(i - 1) * schedule.a(i - 1);

    double gamma = 1.0;
    double c1b = om2 / (2.0 * s2);  // C1 = (alpha/2) Omega^2 / sigma^2
    double c2c = 0.0;
    double c2r = 0.0;
    switch (name) {
      case MethodName::VGGFlow:
        gamma = (1.0 - t) * (1.0 - t) * k.delta;
        c1b = 1.0 / (kLatentDim * k.delta * k.delta);
        break;
      case MethodName::SQDF:
        gamma = std::pow(options.sqdf_gamma_base, n * t);
        break;
      case MethodName::ResidualNablaDB:
        gamma = ab_p;
        c1b = om2 / (kLatentDim * s2 * s2);
        c2c = (1.0 - ab_i) * s2 * s2 / om2 * options.resdb_wR_over_wF;
        break;
      case MethodName::REINFORCE_KL:
        break;
      case MethodName::PPO_GRPO:
      case MethodName::PCPO_Base:
      case MethodName::PCPO_ReweightDiffusion:
      case MethodName::BranchGRPO:
        c2r = 1.0;
        break;
      case MethodName::PCPO_ReweightFlow:
        gamma = zeta * dt / sampler_weight(k);
        c2r = gamma;
        break;
      case MethodName::TempFlowGRPO:
        gamma = 9.0 * k.sigma / 4.0;
        c2r = gamma;
        break;
      case MethodName::GRPOGuard:
        gamma = k.sigma * k.omega / dt;
        break;
      case MethodName::Custom:
        break;
    }
    m.valid[idx] = 1;
    m.gamma[idx] = gamma;
    m.c1_bar[idx] = c1b;
    m.c2_const[idx] = c2c;
    m.c2_reward[idx] = c2r;
    if (m.alpha > 0.0 || m.c1_alpha_pow == 1) m.h[idx] = influence_h(m, k, i);
  }
  return m;
}

MethodConfig with_gamma(const MethodConfig& base, const ReverseSchedule& schedule,
                        const std::function<double(int)>& gamma) {
  if (base.n_steps() != schedule.n_steps()) throw ConfigError("method tables do not match the schedule");
  MethodConfig m = base;
  m.name = MethodName::Custom;
  for (int i = 1; i <= m.n_steps(); ++i) {
    if (!m.is_valid(i)) continue;
    const double g = gamma(i);
    if (!(g >= 0.0) || !std::isfinite(g)) throw ConfigError("gamma must be finite and >= 0");
    const auto idx = static_cast<std::size_t>(i);
    m.gamma[idx] = g;
    if (m.alpha > 0.0 || m.c1_alpha_pow == 1) m.h[idx] = influence_h(m, schedule.sde(i), i);
  }
  return m;
}

MethodConfig truncated_current_state(const ReverseSchedule& schedule, double t_max,
                                     const MethodOptions& options) {
  const MethodConfig base = table1_config(MethodName::VGGFlow, schedule, options);
  return with_gamma(base, schedule, [&](int i) { return schedule.t(i) <= t_max ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------------------
// loss and gradients

double master_loss(const Vec2& s_theta, const Vec2& s_ref, const Vec2& s_old, const Vec2& psi,
                   double c1, double c2) {
  return c1 * ((s_theta - (s_ref + psi)).squaredNorm() + c2 * (s_theta - s_old).squaredNorm());
}

Vec2 canonical_gradient(const Vec2& s_theta, const Vec2& s_ref, const Vec2& s_old, const Vec2& psi,
                        double c1, double c2) {
  return c1 * (-psi + (s_theta - s_ref) + c2 * (s_theta - s_old));
}

Vec2 effective_guidance(const MethodConfig& method, const GuidanceEstimate& psi_hat, int i) {
  if (!method.is_valid(i)) throw DomainError("method weights undefined at step " + std::to_string(i));
  return method.gamma[static_cast<std::size_t>(i)] * psi_hat.value;
}

Vec2 c1_times_psi(const MethodConfig& method, int i, const Vec2& psi_bar) {
  if (!method.is_valid(i)) throw DomainError("method weights undefined at step " + std::to_string(i));
  const auto k = static_cast<std::size_t>(i);
  // alpha^p c1_bar * gamma * psi_bar / alpha
  return alpha_pow(method.alpha, method.c1_alpha_pow - 1) * method.c1_bar[k] * method.gamma[k] * psi_bar;
}

double c1_times_c2(const MethodConfig& method, int i, double reward) {
  if (!method.is_valid(i)) throw DomainError("method weights undefined at step " + std::to_string(i));
  const auto k = static_cast<std::size_t>(i);
  const double base = method.c2_const[k] + method.c2_reward[k] * reward;
  if (base == 0.0) return 0.0;
  return alpha_pow(method.alpha, method.c1_alpha_pow + method.c2_alpha_pow) * method.c1_bar[k] * base;
}

Vec2 method_gradient(const MethodConfig& method, int i, const Vec2& s_theta, const Vec2& s_ref,
                     const Vec2& s_old, const Vec2& psi_bar, double reward, ClipDecision decision) {
  Vec2 g = method.c1(i) * (s_theta - s_ref);
  if (decision == ClipDecision::Active) {
    g -= c1_times_psi(method, i, psi_bar);
    g += c1_times_c2(method, i, reward) * (s_theta - s_old);
  }
  return g;
}

double influence_h(const MethodConfig& method, const KernelCoeffs& coeffs, int i) {
  if (!method.is_valid(i)) throw DomainError("method weights undefined at step " + std::to_string(i));
  const auto k = static_cast<std::size_t>(i);
  const double base = coeffs.delta * method.c1_bar[k] * method.gamma[k] *
                      alpha_pow(method.alpha, method.c1_alpha_pow - 1);
  if (method.lookahead == LookaheadRule::CurrentState) return base;
  if (!(coeffs.sigma > 0.0)) throw UndefinedWeightError("lookahead influence needs sigma > 0");
  return base * coeffs.sigma * coeffs.sigma / coeffs.omega;
}

double reinforce_surrogate(const Vec2& s, const Vec2& s_ref, const Vec2& s_old, const Vec2& eps,
                           double reward, double omega, double sigma, double alpha) {
  // x' - mu_theta = sigma eps - Omega (s - s_old); constants of log p dropped.
  const Vec2 resid = sigma * eps - omega * (s - s_old);
  const double nll = resid.squaredNorm() / (2.0 * sigma * sigma);
  return reward * nll + alpha * (omega * (s - s_ref)).squaredNorm() / (2.0 * sigma * sigma);
}

double log_ratio_surrogate(const Vec2& s, const Vec2& s_ref, const Vec2& s_old, const Vec2& eps,
                           double reward, double omega, double sigma, double alpha) {
  const Vec2 d = s - s_old;
  const double neg_log_rho = -(omega / sigma) * d.dot(eps) + omega * omega / (2.0 * sigma * sigma) * d.squaredNorm();
  return reward * neg_log_rho + alpha * omega * omega / (2.0 * sigma * sigma) * (s - s_ref).squaredNorm();
}

std::string method_registry_json(const ReverseSchedule& schedule, const MethodOptions& options) {
  nlohmann::json out = nlohmann::json::array();
  for (MethodName name : named_methods()) {
    const MethodConfig m = table1_config(name, schedule, options);
    nlohmann::json steps = nlohmann::json::array();
    for (int i = 1; i <= m.n_steps(); ++i) {
      if (!m.is_valid(i)) continue;
      const auto k = static_cast<std::size_t>(i);
      steps.push_back({{"i", i},
                       {"gamma", m.gamma[k]},
                       {"c1_bar", m.c1_bar[k]},
                       {"c2_const", m.c2_const[k]},
                       {"c2_reward", m.c2_reward[k]},
                       {"h", m.h[k]}});
    }
    out.push_back({{"method", to_string(name)},
                   {"estimator", m.estimator == EstimatorKind::FirstOrder ? "first_order" : "zeroth_order"},
                   {"lookahead", m.lookahead == LookaheadRule::Full       ? "0"
                                 : m.lookahead == LookaheadRule::OneStep ? "i-1"
                                                                         : "i"},
                   {"branching", m.branching},
                   {"c1_alpha_power", m.c1_alpha_pow},
                   {"c2_alpha_power", m.c2_alpha_pow},
                   {"alpha", m.alpha},
                   {"steps", std::move(steps)}});
  }
  return out.dump(1);
}

}  // namespace rsm
