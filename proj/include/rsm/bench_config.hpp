#pragma once

// JSON experiment configuration for the bench driver. Parsing is strict: unknown keys,
// wrong types and out-of-range values raise ConfigError naming the offending path.

#include "rsm/estimators.hpp"
#include "rsm/flow_schedules.hpp"
#include "rsm/mixture_oracle.hpp"
#include "rsm/rsm_objective.hpp"
#include "rsm/training.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rsm {

enum class ExperimentKind { RmseBench, ScheduleDump, Train, KernelAudit };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

enum class EstimatorFamily { FirstOrderCurrent, FirstOrderLookahead, ZerothOrder };

std::string to_string(EstimatorFamily family);

struct EstimatorSpec {
  std::string name;
  EstimatorFamily family = EstimatorFamily::ZerothOrder;
  // Lookahead depth d with j = i - d; nullopt means full rollout (j = 0).
  std::optional<int> depth;
  StatsMode stats = StatsMode::Raw;
  std::vector<int> pattern;  // extra branch widths, evenly spaced below the first branch
  bool localized = false;    // stochastic only at branch steps

  int lookahead_index(int i) const;
};

enum class SizeUnit { Branches, Nfe };

struct RmseSpec {
  std::vector<int> steps;               // explicit step indices, or
  std::vector<double> step_fractions;   // fractions of N (rounded)
  std::vector<int> sizes{1, 4, 16, 64};
  SizeUnit size_unit = SizeUnit::Branches;
  int n_points = 200;
  int n_repeats = 1;
  bool fixed_point = false;       // every cell uses one evaluation point (seeded per step)
  bool rollout_reference = false;  // rollouts under the reference score instead of the target
  std::vector<EstimatorSpec> estimators;

  std::vector<int> resolved_steps(int n_steps) const;
};

struct ScheduleSpec {
  std::vector<MethodName> methods;
  double alpha = 1.0;
  double sqdf_gamma_base = 0.9;
  double resdb_wR_over_wF = 1.0;
  double c2_reward = 1.0;  // constant reward used when tabulating C2
  bool log_scale = true;
};

struct MethodSpec {
  MethodName name = MethodName::REINFORCE_KL;
  double alpha = 1.0;
  ClipRule clip;
  // Custom only: current-state first-order with unit gamma up to this time.
  double gamma_cutoff = 0.7;
};

struct TrainSpec {
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  MethodSpec method;
  std::string reference_checkpoint;  // skip pretraining when set
  int eval_samples = 10000;
  int w2_samples = 10000;
  int smooth_window = 50;
};

struct AuditSpec {
  int instances = 1000;
  double omega_scale = 1.0;            // fault injection for the equivalence check
  std::optional<double> sigma_override;  // DDIM sigma used in the audit; validated
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::RmseBench;
  std::string experiment_id = "experiment";
  std::uint64_t seed = 0;
  FlowSpec flow = FlowSpec::vp();
  int n_steps = 50;
  double shift = 1.0;
  NoiseSpec noise;
  SamplerKind sampler = SamplerKind::DDIM;
  GaussianMixture reference = toy_reference();
  LinearReward reward = toy_reward();
  double alpha = 1.0;

  RmseSpec rmse;
  ScheduleSpec schedules;
  TrainSpec train;
  AuditSpec audit;

  ReverseSchedule schedule() const;
  TiltedPair pair() const;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

}  // namespace rsm
