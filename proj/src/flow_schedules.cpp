#include "rsm/flow_schedules.hpp"

#include "rsm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rsm {

namespace {

void require_unit_interval(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError(std::string(what) + ": t=" + std::to_string(t) + " outside [0,1]");
  }
}

}  // namespace

// ---------------------------------------------------------------------------------------
// names

std::string to_string(FlowKind kind) {
  switch (kind) {
    case FlowKind::VP: return "vp";
    case FlowKind::VE: return "ve";
    case FlowKind::RectifiedFlow: return "rectified_flow";
  }
  return "?";
}

FlowKind flow_kind_from_string(const std::string& name) {
  if (name == "vp") return FlowKind::VP;
  if (name == "ve") return FlowKind::VE;
  if (name == "rectified_flow" || name == "rf") return FlowKind::RectifiedFlow;
  throw ConfigError("unknown flow kind '" + name + "'");
}

std::string to_string(NoiseRule rule) {
  switch (rule) {
    case NoiseRule::ODE: return "ode";
    case NoiseRule::ConstDiffusion: return "const_diffusion";
    case NoiseRule::FlowGRPO: return "flow_grpo";
    case NoiseRule::DDPMEquivalent: return "ddpm_equivalent";
  }
  return "?";
}

NoiseRule noise_rule_from_string(const std::string& name) {
  if (name == "ode") return NoiseRule::ODE;
  if (name == "const_diffusion") return NoiseRule::ConstDiffusion;
  if (name == "flow_grpo") return NoiseRule::FlowGRPO;
  if (name == "ddpm_equivalent") return NoiseRule::DDPMEquivalent;
  throw ConfigError("unknown noise rule '" + name + "'");
}

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::DDIM: return "ddim";
    case SamplerKind::DPMSolverPP: return "dpmpp";
    case SamplerKind::EulerFlow: return "euler";
  }
  return "?";
}

SamplerKind sampler_kind_from_string(const std::string& name) {
  if (name == "ddim") return SamplerKind::DDIM;
  if (name == "dpmpp") return SamplerKind::DPMSolverPP;
  if (name == "euler") return SamplerKind::EulerFlow;
  throw ConfigError("unknown sampler '" + name + "'");
}

// ---------------------------------------------------------------------------------------
// FlowSpec

FlowSpec::FlowSpec(FlowKind kind, double p0, double p1) : kind_(kind), p0_(p0), p1_(p1) {}

FlowSpec FlowSpec::vp(double beta_min, double beta_max) {
  if (!(beta_min > 0.0) || !(beta_max >= beta_min)) {
    throw DomainError("vp: need 0 < beta_min <= beta_max");
  }
  FlowSpec f(FlowKind::VP, beta_min, beta_max);
  std::vector<double> table(kTableNodes, 0.0);
  const double h = 1.0 / (kTableNodes - 1);
  double prev = f.beta(0.0);
  for (int k = 1; k < kTableNodes; ++k) {
    const double cur = f.beta(k * h);
    table[static_cast<std::size_t>(k)] = table[static_cast<std::size_t>(k - 1)] + 0.5 * h * (prev + cur);
    prev = cur;
  }
  f.beta_integral_ = std::make_shared<const std::vector<double>>(std::move(table));
  return f;
}

FlowSpec FlowSpec::ve(double sigma_min, double sigma_max) {
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min)) {
    throw DomainError("ve: need 0 < sigma_min < sigma_max");
  }
  return FlowSpec(FlowKind::VE, sigma_min, sigma_max);
}

FlowSpec FlowSpec::rectified() { return FlowSpec(FlowKind::RectifiedFlow, 0.0, 0.0); }

double FlowSpec::beta(double t) const {
  if (kind_ != FlowKind::VP) throw DomainError("beta(t) is defined for VP flows only");
  return p0_ + t * (p1_ - p0_);
}

double FlowSpec::alpha_bar(double t) const {
  require_unit_interval(t, "alpha_bar");
  switch (kind_) {
    case FlowKind::VP: {
      const auto& tab = *beta_integral_;
      const double u = t * (kTableNodes - 1);
      const auto k = std::min(static_cast<std::size_t>(u), tab.size() - 2);
      const double frac = u - static_cast<double>(k);
      return std::exp(-(tab[k] + frac * (tab[k + 1] - tab[k])));
    }
    case FlowKind::VE: return 1.0;
    case FlowKind::RectifiedFlow: return (1.0 - t) * (1.0 - t);
  }
  return 0.0;
}

AffineCoeffs ab_coeffs(const FlowSpec& flow, double t) {
  require_unit_interval(t, "ab_coeffs");
  AffineCoeffs c;
  switch (flow.kind()) {
    case FlowKind::VP: {
      const double ab = flow.alpha_bar(t);
      const double beta = flow.beta(t);
      c.a = std::sqrt(ab);
      c.b = std::sqrt(1.0 - ab);
      c.a_dot = -0.5 * beta * c.a;
      c.b_dot = c.b > 0.0 ? 0.5 * beta * ab / c.b : std::numeric_limits<double>::infinity();
      break;
    }
    case FlowKind::VE: {
      const double lr = std::log(flow.sigma_max() / flow.sigma_min());
      const double smin2 = flow.sigma_min() * flow.sigma_min();
      const double g = std::exp(2.0 * t * lr);
      c.a = 1.0;
      c.b = std::sqrt(smin2 * (g - 1.0));
      c.a_dot = 0.0;
      c.b_dot = c.b > 0.0 ? smin2 * lr * g / c.b : std::numeric_limits<double>::infinity();
      break;
    }
    case FlowKind::RectifiedFlow:
      c.a = 1.0 - t;
      c.b = t;
      c.a_dot = -1.0;
      c.b_dot = 1.0;
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------------------
// TimeGrid

TimeGrid::TimeGrid(std::vector<double> times) : times_(std::move(times)) {}

TimeGrid TimeGrid::uniform(int n_steps, double shift) {
  if (n_steps < 1) throw DomainError("time grid needs at least one step");
  if (!(shift > 0.0)) throw DomainError("time grid shift must be positive");
  std::vector<double> t(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) {
    const double u = static_cast<double>(i) / n_steps;
    t[static_cast<std::size_t>(i)] = shift * u / (1.0 + (shift - 1.0) * u);
  }
  t.front() = 0.0;
  t.back() = 1.0;
  return from_times(std::move(t));
}

TimeGrid TimeGrid::from_times(std::vector<double> times) {
  if (times.size() < 2) throw DomainError("time grid needs at least two nodes");
  if (times.front() != 0.0 || times.back() != 1.0) {
    throw DomainError("time grid must start at 0 and end at 1");
  }
  for (std::size_t k = 1; k < times.size(); ++k) {
    if (!(times[k] > times[k - 1])) throw DomainError("time grid must be strictly increasing");
  }
  return TimeGrid(std::move(times));
}

double TimeGrid::dt(int i) const {
  if (i < 1 || i > n_steps()) throw DomainError("dt index out of range");
  return t(i) - t(i - 1);
}

// ---------------------------------------------------------------------------------------
// NoiseSpec

double NoiseSpec::sigma_tilde(const FlowSpec& flow, const TimeGrid& grid, int i) const {
  const double dt = grid.dt(i);
  switch (rule) {
    case NoiseRule::ODE: return 0.0;
    case NoiseRule::ConstDiffusion: return amplitude;
    case NoiseRule::FlowGRPO: {
      const double t = grid.t(i);
      if (t >= 1.0) throw SingularityError("flow_grpo noise diverges at t=1");
      return amplitude * std::sqrt(t / (1.0 - t));
    }
    case NoiseRule::DDPMEquivalent: return sigma(flow, grid, i) / std::sqrt(dt);
  }
  return 0.0;
}

double NoiseSpec::sigma(const FlowSpec& flow, const TimeGrid& grid, int i) const {
  if (rule == NoiseRule::DDPMEquivalent) {
    const double ab_i = flow.alpha_bar(grid.t(i));
    const double ab_im1 = flow.alpha_bar(grid.t(i - 1));
    const double var = (1.0 - ab_im1) / (1.0 - ab_i) * (1.0 - ab_i / ab_im1);
    return std::sqrt(std::max(var, 0.0));
  }
  return sigma_tilde(flow, grid, i) * std::sqrt(grid.dt(i));
}

// ---------------------------------------------------------------------------------------
// kernels

KernelCoeffs ddim_kernel(double alpha_bar_i, double alpha_bar_im1, double sigma_i) {
  if (!(alpha_bar_i > 0.0) || !(alpha_bar_i <= alpha_bar_im1) || !(alpha_bar_im1 <= 1.0)) {
    throw DomainError("ddim_kernel: need 0 < alpha_bar_i <= alpha_bar_im1 <= 1");
  }
  if (!(sigma_i >= 0.0)) throw InvalidNoiseError("ddim_kernel: sigma must be >= 0");
  const double room = 1.0 - alpha_bar_im1 - sigma_i * sigma_i;
  if (room < 0.0) {
    if (room > -1e-14) {
      sigma_i = std::sqrt(1.0 - alpha_bar_im1);
    } else {
      throw InvalidNoiseError("ddim_kernel: sigma^2 exceeds 1 - alpha_bar_{i-1}");
    }
  }
  const double ratio = std::sqrt(alpha_bar_im1 / alpha_bar_i);
  const double b_i = std::sqrt(1.0 - alpha_bar_i);
  KernelCoeffs k;
  k.kappa = ratio;
  k.omega = (ratio * b_i - std::sqrt(std::max(room, 0.0))) * b_i;
  k.sigma = sigma_i;
  if (b_i <= 0.0) throw SingularityError("ddim_kernel: delta diverges at alpha_bar_i = 1");
  k.delta = 1.0 / b_i;
  if (k.sigma > 0.0) k.w = k.omega * k.delta / k.sigma;
  return k;
}

KernelCoeffs dpmpp_kernel(double alpha_bar_i, double alpha_bar_im1) {
  if (!(alpha_bar_i > 0.0) || !(alpha_bar_i <= alpha_bar_im1) || !(alpha_bar_im1 <= 1.0)) {
    throw DomainError("dpmpp_kernel: need 0 < alpha_bar_i <= alpha_bar_im1 <= 1");
  }
  if (alpha_bar_i >= 1.0) throw SingularityError("dpmpp_kernel: delta diverges at alpha_bar_i = 1");
  const double a_i = std::sqrt(alpha_bar_i);
  const double b_i = std::sqrt(1.0 - alpha_bar_i);
  const double a_p = std::sqrt(alpha_bar_im1);
  const double b_p = std::sqrt(1.0 - alpha_bar_im1);
  KernelCoeffs k;
  k.delta = 1.0 / b_i;
  if (b_p == 0.0) {
    // Infinite log-SNR gap: the step lands on the Tweedie estimate.
    k.kappa = a_p / a_i;
    k.omega = a_p / a_i * b_i * b_i;
    k.sigma = 0.0;
    return k;
  }
  const double h = std::log(a_p / b_p) - std::log(a_i / b_i);
  const double e1 = std::exp(-h);
  const double one_m_e2 = -std::expm1(-2.0 * h);
  k.kappa = b_p / b_i * e1 + a_p / a_i * one_m_e2;
  k.omega = a_p / a_i * one_m_e2 * b_i * b_i;
  k.sigma = b_p * std::sqrt(one_m_e2);
  if (k.sigma > 0.0) k.w = k.omega * k.delta / k.sigma;
  return k;
}

KernelCoeffs euler_rf_kernel(double t_i, double dt, double sigma_tilde) {
  if (t_i <= 0.0 || t_i >= 1.0) {
    throw SingularityError("euler_rf_kernel: t_i must lie strictly inside (0,1)");
  }
  if (!(dt > 0.0) || dt > t_i * (1.0 + 1e-12)) throw DomainError("euler_rf_kernel: need 0 < dt <= t_i");
  if (!(sigma_tilde >= 0.0)) throw InvalidNoiseError("euler_rf_kernel: sigma_tilde must be >= 0");
  const double sigma = sigma_tilde * std::sqrt(dt);
  KernelCoeffs k;
  k.kappa = 1.0 + dt / (1.0 - t_i);
  k.omega = t_i * dt / (1.0 - t_i) + 0.5 * sigma * sigma;
  k.sigma = sigma;
  k.delta = (1.0 - t_i) / t_i;
  if (k.sigma > 0.0) k.w = k.omega * k.delta / k.sigma;
  return k;
}

double sampler_weight(const KernelCoeffs& coeffs) {
  if (!(coeffs.sigma > 0.0)) throw UndefinedWeightError("sampler weight undefined at sigma = 0");
  return coeffs.omega * coeffs.delta / coeffs.sigma;
}

// ---------------------------------------------------------------------------------------
// ReverseSchedule

ReverseSchedule::ReverseSchedule(FlowSpec flow, TimeGrid grid, NoiseSpec noise, SamplerKind sampler)
    : flow_(std::move(flow)), grid_(std::move(grid)), noise_(noise), sampler_(sampler) {
  const bool needs_vp = sampler_ != SamplerKind::EulerFlow;
  if (needs_vp && flow_.kind() != FlowKind::VP) {
    throw ConfigError(to_string(sampler_) + " sampler requires a VP flow");
  }
  if (!needs_vp && flow_.kind() != FlowKind::RectifiedFlow) {
    throw ConfigError("euler sampler requires a rectified flow");
  }
  if (noise_.rule == NoiseRule::DDPMEquivalent && flow_.kind() != FlowKind::VP) {
    throw ConfigError("ddpm_equivalent noise requires a VP flow");
  }
  if (noise_.rule != NoiseRule::ODE && noise_.rule != NoiseRule::DDPMEquivalent && !(noise_.amplitude >= 0.0)) {
    throw ConfigError("noise amplitude must be >= 0");
  }

  const int n = grid_.n_steps();
  a_.resize(static_cast<std::size_t>(n) + 1);
  b_.resize(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) {
    const auto c = ab_coeffs(flow_, grid_.t(i));
    a_[static_cast<std::size_t>(i)] = c.a;
    b_[static_cast<std::size_t>(i)] = c.b;
  }

  steps_.resize(static_cast<std::size_t>(n) + 1);
  for (int i = 1; i <= n; ++i) {
    StepInfo& s = steps_[static_cast<std::size_t>(i)];
    s.t = grid_.t(i);
    s.dt = grid_.dt(i);
    s.a = a(i);
    s.b = b(i);
    switch (sampler_) {
      case SamplerKind::DDIM: {
        const double ab_i = flow_.alpha_bar(grid_.t(i));
        const double ab_p = flow_.alpha_bar(grid_.t(i - 1));
        s.ode = ddim_kernel(ab_i, ab_p, 0.0);
        s.sde = ddim_kernel(ab_i, ab_p, noise_.sigma(flow_, grid_, i));
        break;
      }
      case SamplerKind::DPMSolverPP: {
        const double ab_i = flow_.alpha_bar(grid_.t(i));
        const double ab_p = flow_.alpha_bar(grid_.t(i - 1));
        // Order-1 ODE variant (DPM-Solver++ 1, i.e. deterministic DDIM).
        s.ode = ddim_kernel(ab_i, ab_p, 0.0);
        s.sde = noise_.rule == NoiseRule::ODE ? *s.ode : dpmpp_kernel(ab_i, ab_p);
        break;
      }
      case SamplerKind::EulerFlow: {
        if (s.t >= 1.0) break;  // singular drift at pure noise
        s.ode = euler_rf_kernel(s.t, s.dt, 0.0);
        s.sde = euler_rf_kernel(s.t, s.dt, noise_.sigma_tilde(flow_, grid_, i));
        break;
      }
    }
  }
}

bool ReverseSchedule::has_kernel(int i) const {
  return i >= 1 && i <= n_steps() && steps_[static_cast<std::size_t>(i)].ode.has_value();
}

const StepInfo& ReverseSchedule::step(int i) const {
  if (i < 1 || i > n_steps()) throw DomainError("reverse step index out of range");
  const StepInfo& s = steps_[static_cast<std::size_t>(i)];
  if (!s.ode) throw SingularityError("reverse kernel is singular at step " + std::to_string(i));
  return s;
}

const KernelCoeffs& ReverseSchedule::sde(int i) const { return *step(i).sde; }
const KernelCoeffs& ReverseSchedule::ode(int i) const { return *step(i).ode; }

}  // namespace rsm
