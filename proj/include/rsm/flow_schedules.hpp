#pragma once

// Affine conditional flows x_t = a_t x_0 + b_t x_1, time grids, step-noise rules, and the
// reverse-kernel coefficients
//
//   p(x_{t_{i-1}} | x_{t_i}) = N(kappa x_{t_i} + omega s(x_{t_i}), sigma^2 I)
//
// for the DDIM, SDE-DPM-Solver++(1) and Euler-discrete flow samplers.

#include "rsm/types.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rsm {

enum class FlowKind { VP, VE, RectifiedFlow };

std::string to_string(FlowKind kind);
FlowKind flow_kind_from_string(const std::string& name);

struct AffineCoeffs {
  double a = 1.0;
  double b = 0.0;
  double a_dot = 0.0;
  double b_dot = 0.0;
};

// Immutable description of an affine flow. The VP schedule alpha_bar_t = exp(-int_0^t beta)
// is tabulated once (trapezoid quadrature of the linear beta schedule on 10,001 nodes) and
// linearly interpolated afterwards.
class FlowSpec {
 public:
  static FlowSpec vp(double beta_min = 0.1, double beta_max = 20.0);
  // a_t = 1, b_t^2 = sigma_min^2 ((sigma_max/sigma_min)^{2t} - 1).
  static FlowSpec ve(double sigma_min = 0.01, double sigma_max = 50.0);
  static FlowSpec rectified();

  FlowKind kind() const { return kind_; }
  double beta_min() const { return p0_; }
  double beta_max() const { return p1_; }
  double sigma_min() const { return p0_; }
  double sigma_max() const { return p1_; }

  // VP only: instantaneous beta(t) and the tabulated alpha_bar_t.
  double beta(double t) const;
  double alpha_bar(double t) const;

  static constexpr int kTableNodes = 10001;

 private:
  FlowSpec(FlowKind kind, double p0, double p1);

  FlowKind kind_;
  double p0_;
  double p1_;
  std::shared_ptr<const std::vector<double>> beta_integral_;
};

// (a_t, b_t, da/dt, db/dt). Throws DomainError for t outside [0,1].
// VP b_dot diverges at t = 0 and is reported as +inf there.
AffineCoeffs ab_coeffs(const FlowSpec& flow, double t);

class TimeGrid {
 public:
  // t_i = i/N, optionally warped by the SD3-style shift t -> s t / (1 + (s-1) t).
  static TimeGrid uniform(int n_steps, double shift = 1.0);
  static TimeGrid from_times(std::vector<double> times);

  int n_steps() const { return static_cast<int>(times_.size()) - 1; }
  double t(int i) const { return times_.at(static_cast<std::size_t>(i)); }
  // Delta t_i = t_i - t_{i-1}, defined for i >= 1.
  double dt(int i) const;
  const std::vector<double>& times() const { return times_; }

 private:
  explicit TimeGrid(std::vector<double> times);
  std::vector<double> times_;
};

enum class NoiseRule { ODE, ConstDiffusion, FlowGRPO, DDPMEquivalent };

std::string to_string(NoiseRule rule);
NoiseRule noise_rule_from_string(const std::string& name);

struct NoiseSpec {
  NoiseRule rule = NoiseRule::DDPMEquivalent;
  double amplitude = 0.0;  // the "a" of ConstDiffusion / FlowGRPO

  // Instantaneous diffusion sigma~_{t_i} and its discrete counterpart sigma~ sqrt(dt).
  double sigma_tilde(const FlowSpec& flow, const TimeGrid& grid, int i) const;
  double sigma(const FlowSpec& flow, const TimeGrid& grid, int i) const;
};

struct KernelCoeffs {
  double kappa = 1.0;
  double omega = 0.0;
  double sigma = 0.0;
  double delta = 1.0;
  std::optional<double> w;  // Omega delta / sigma, only when sigma > 0

  bool stochastic() const { return sigma > 0.0; }
};

KernelCoeffs ddim_kernel(double alpha_bar_i, double alpha_bar_im1, double sigma_i);
KernelCoeffs dpmpp_kernel(double alpha_bar_i, double alpha_bar_im1);
KernelCoeffs euler_rf_kernel(double t_i, double dt, double sigma_tilde);

// Omega delta / sigma. Throws UndefinedWeightError when sigma == 0.
double sampler_weight(const KernelCoeffs& coeffs);

enum class SamplerKind { DDIM, DPMSolverPP, EulerFlow };

std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& name);

// Everything a rollout needs about one reverse step i (x_{t_i} -> x_{t_{i-1}}).
struct StepInfo {
  double t = 0.0;
  double dt = 0.0;
  double a = 1.0;
  double b = 0.0;
  std::optional<KernelCoeffs> sde;  // kernel with the configured step noise
  std::optional<KernelCoeffs> ode;  // deterministic kernel of the same sampler
};

// Flow + grid + noise + sampler, with all per-step coefficients precomputed.
// Steps whose kernel is singular (RF at t = 1) carry no coefficients; asking for them throws.
class ReverseSchedule {
 public:
  ReverseSchedule(FlowSpec flow, TimeGrid grid, NoiseSpec noise, SamplerKind sampler);

  const FlowSpec& flow() const { return flow_; }
  const TimeGrid& grid() const { return grid_; }
  const NoiseSpec& noise() const { return noise_; }
  SamplerKind sampler() const { return sampler_; }
  int n_steps() const { return grid_.n_steps(); }

  double t(int i) const { return grid_.t(i); }
  double a(int i) const { return a_.at(static_cast<std::size_t>(i)); }
  double b(int i) const { return b_.at(static_cast<std::size_t>(i)); }

  bool has_kernel(int i) const;
  const KernelCoeffs& sde(int i) const;
  const KernelCoeffs& ode(int i) const;
  const KernelCoeffs& kernel(int i, bool stochastic) const {
    return stochastic ? sde(i) : ode(i);
  }

 private:
  const StepInfo& step(int i) const;

  FlowSpec flow_;
  TimeGrid grid_;
  NoiseSpec noise_;
  SamplerKind sampler_;
  std::vector<double> a_;
  std::vector<double> b_;
  std::vector<StepInfo> steps_;  // index i, entry 0 unused
};

}  // namespace rsm
