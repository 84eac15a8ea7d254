#pragma once

// Experiment drivers behind the CLI: estimator RMSE grids, schedule tables, kernel audits and
// training runs. Every driver is deterministic in (config, seed); wall-clock timings are kept
// out of the main outputs.

#include "rsm/bench_config.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rsm {

struct ResultRow {
  std::string experiment_id;
  std::string method;     // estimator spec name
  std::string estimator;  // fo_cs | fo_la | zo
  int i = 0;
  double t = 0.0;
  int j = 0;
  int K = 1;
  int n_samples = 0;  // leaves per estimate
  std::uint64_t seed = 0;
  double rmse = 0.0;
  double bias_norm = 0.0;
  double var_trace = 0.0;
  double nfe = 0.0;  // mean score evaluations per estimate
  std::int64_t wall_ns = 0;
};

struct RmseResult {
  std::vector<ResultRow> rows;  // ordered by (step, estimator, size)
};

RmseResult run_rmse_bench(const ExperimentConfig& cfg, int threads = 1);

std::string rows_csv(const std::vector<ResultRow>& rows);
std::string timings_csv(const std::vector<ResultRow>& rows);
// RMSE against mean NFE, one series per (estimator, step).
std::string rmse_svg(const std::vector<ResultRow>& rows);

struct ScheduleRow {
  std::string method;
  int step = 0;
  double t = 0.0;
  double gamma = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double h = 0.0;
  double w = 0.0;
  double omega = 0.0;
  double sigma = 0.0;
  double delta = 0.0;
};

struct ScheduleDump {
  std::vector<ScheduleRow> rows;
  std::string csv;
  std::string svg;
  std::string summary_json;  // shape checks and crossover indices
  bool vgg_decreasing = true;
  bool tempflow_exceeds_ppo_low_snr = true;
  bool guard_finite = true;
  int tempflow_ppo_crossover = -1;
  int reinforce_reweight_crossover = -1;
};

ScheduleDump run_schedule_dump(const ExperimentConfig& cfg);

// First step index at which sign(a - b) changes over steps valid in both; -1 when none.
int crossover_index(const std::vector<ScheduleRow>& rows, const std::string& a, const std::string& b);

struct AuditCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct AuditReport {
  std::vector<AuditCheck> checks;
  bool passed() const;
  std::string text() const;
};

// Throws InvalidNoiseError when audit.sigma is infeasible on the configured grid.
AuditReport run_kernel_audit(const ExperimentConfig& cfg);

struct TrainOutput {
  std::string reference_checkpoint;
  std::string checkpoint;
  std::string metrics_csv;
  std::string summary_json;
  double dsm_loss = 0.0;
  double w2 = 0.0;
  double reward_before = 0.0;
  double reward_after = 0.0;
  double smoothed_reward = 0.0;
};

TrainOutput run_train(const ExperimentConfig& cfg);

// Method configuration used by run_train.
MethodConfig train_method(const ExperimentConfig& cfg, const ReverseSchedule& schedule);

}  // namespace rsm
