#pragma once

// Unified score-matching loss
//   L = C1 (|s_theta - (s_ref + Psi)|^2 + C2 |s_theta - s_old|^2),
// its canonical gradient G (dL/ds_theta = 2G), clipping rules, and the per-step weight
// tables (gamma, C1, C2, h) that reproduce each named fine-tuning method.
//
// Weights are stored alpha-free: C1 = alpha^p c1_bar and C2 = alpha^q (c2_const + c2_reward r),
// and estimators hand over psi_bar = alpha Psi_hat. For zeroth-order rows p = 1 and q = -1, so
// every product that enters the gradient stays finite as alpha -> 0.

#include "rsm/estimators.hpp"
#include "rsm/flow_schedules.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rsm {

enum class MethodName {
  VGGFlow,
  SQDF,
  ResidualNablaDB,
  REINFORCE_KL,
  PPO_GRPO,
  PCPO_Base,
  PCPO_ReweightDiffusion,
  PCPO_ReweightFlow,
  BranchGRPO,
  TempFlowGRPO,
  GRPOGuard,
  Custom,
};

std::string to_string(MethodName name);
MethodName method_name_from_string(const std::string& name);
const std::vector<MethodName>& named_methods();  // every row except Custom

enum class EstimatorKind { FirstOrder, ZerothOrder };
enum class LookaheadRule { Full, OneStep, CurrentState };  // j = 0, i-1, i

enum class ClipKind { None, PPOHinge, FairClip, GuardCentered };

std::string to_string(ClipKind kind);
ClipKind clip_kind_from_string(const std::string& name);

struct ClipRule {
  ClipKind kind = ClipKind::None;
  double xi = 0.0;

  void validate() const;
};

enum class ClipDecision { Active, Suppressed };

// log p_theta(x') - log p_old(x') for x' = mu_old + sigma eps.
double log_ratio(const Vec2& mu_theta, const Vec2& mu_old, double sigma, const Vec2& eps);

struct ClipContext {
  Vec2 eps = Vec2::Zero();     // noise that produced the sample under the old policy
  double log_ratio_mean = 0.0;  // batch mean of log rho (GuardCentered only)
};

ClipDecision apply_clip(const ClipRule& rule, const Vec2& mu_theta, const Vec2& mu_old, double sigma,
                        double dt, double reward, const ClipContext& ctx = {});

struct MethodConfig {
  MethodName name = MethodName::Custom;
  EstimatorKind estimator = EstimatorKind::ZerothOrder;
  LookaheadRule lookahead = LookaheadRule::Full;
  bool branching = false;
  ClipRule clip;
  double alpha = 1.0;
  double sqdf_gamma_base = 0.9;
  double resdb_wR_over_wF = 1.0;

  // Per-step tables indexed by i = 0..N; steps with valid == 0 carry no weights.
  std::vector<char> valid;
  std::vector<double> gamma;
  std::vector<double> c1_bar;
  int c1_alpha_pow = 0;
  std::vector<double> c2_const;
  std::vector<double> c2_reward;
  int c2_alpha_pow = 0;
  std::vector<double> h;

  int n_steps() const { return static_cast<int>(gamma.size()) - 1; }
  bool is_valid(int i) const;
  double c1(int i) const;
  double c2(int i, double reward) const;
  // j for a branch at step i.
  int lookahead_index(int i) const;
};

struct MethodOptions {
  double alpha = 1.0;
  double sqdf_gamma_base = 0.9;
  double resdb_wR_over_wF = 1.0;
  ClipRule clip;
  // PCPO-reweight (diffusion): the modified per-step noise sigma'_i, indexed 0..N.
  std::optional<std::vector<double>> sigma_prime;
};

// One Table-1 row instantiated on a schedule.
MethodConfig table1_config(MethodName name, const ReverseSchedule& schedule, const MethodOptions& options = {});

// Copy of `base` relabelled Custom with gamma(i) on its valid steps; h is recomputed.
MethodConfig with_gamma(const MethodConfig& base, const ReverseSchedule& schedule,
                        const std::function<double(int)>& gamma);

// Current-state first-order config with unit gamma for t_i <= t_max and zero guidance above.
MethodConfig truncated_current_state(const ReverseSchedule& schedule, double t_max,
                                     const MethodOptions& options = {});

// Latent dimension entering the VGG-Flow and residual-DB weights.
inline constexpr double kLatentDim = 2.0;

double master_loss(const Vec2& s_theta, const Vec2& s_ref, const Vec2& s_old, const Vec2& psi,
                   double c1, double c2);
Vec2 canonical_gradient(const Vec2& s_theta, const Vec2& s_ref, const Vec2& s_old, const Vec2& psi,
                        double c1, double c2);

// gamma_i Psi_hat.
Vec2 effective_guidance(const MethodConfig& method, const GuidanceEstimate& psi_hat, int i);

// G at step i from the alpha-free tables; psi_bar = alpha Psi_hat (un-weighted by gamma).
// A Suppressed decision zeroes Psi and C2.
Vec2 method_gradient(const MethodConfig& method, int i, const Vec2& s_theta, const Vec2& s_ref,
                     const Vec2& s_old, const Vec2& psi_bar, double reward,
                     ClipDecision decision = ClipDecision::Active);

// C1 gamma Psi_hat and C1 C2 evaluated from the alpha-free tables.
Vec2 c1_times_psi(const MethodConfig& method, int i, const Vec2& psi_bar);
double c1_times_c2(const MethodConfig& method, int i, double reward);

// delta C1 gamma / alpha (current state) or delta C1 gamma sigma^2 / (alpha Omega) (lookahead).
double influence_h(const MethodConfig& method, const KernelCoeffs& coeffs, int i);

// REINFORCE surrogate -r log p_theta(x') + alpha |Omega (s - s_ref)|^2 / (2 sigma^2),
// x' = mu_old + sigma eps, as a function of the score s at x_{t_i}.
double reinforce_surrogate(const Vec2& s, const Vec2& s_ref, const Vec2& s_old, const Vec2& eps,
                           double reward, double omega, double sigma, double alpha);

// Clipped-log-ratio surrogate in its non-clipped regime: -r log rho + alpha Omega^2/(2 sigma^2) |s - s_ref|^2.
double log_ratio_surrogate(const Vec2& s, const Vec2& s_ref, const Vec2& s_old, const Vec2& eps,
                           double reward, double omega, double sigma, double alpha);

std::string method_registry_json(const ReverseSchedule& schedule, const MethodOptions& options = {});

}  // namespace rsm
