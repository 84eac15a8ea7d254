// rsmlab: command-line driver for the estimator bench, schedule tables, kernel audit and training.

#include "rsm/bench.hpp"
#include "rsm/errors.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

rsm::ExperimentConfig load(const Common& c, rsm::ExperimentKind expected) {
  rsm::ExperimentConfig cfg = rsm::load_experiment_config(c.config);
  if (cfg.kind != expected) {
    throw rsm::ConfigError("config kind '" + rsm::to_string(cfg.kind) + "' does not match the subcommand");
  }
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.pretrain.seed = *c.seed;
    cfg.train.finetune.seed = *c.seed;
  }
  fs::create_directories(c.out);
  return cfg;
}

int run_bench(const Common& c) {
  const auto cfg = load(c, rsm::ExperimentKind::RmseBench);
  const auto res = rsm::run_rmse_bench(cfg, c.threads);
  const fs::path out(c.out);
  write(out / (cfg.experiment_id + ".csv"), rsm::rows_csv(res.rows));
  write(out / (cfg.experiment_id + "_timings.csv"), rsm::timings_csv(res.rows));
  write(out / (cfg.experiment_id + ".svg"), rsm::rmse_svg(res.rows));
  std::cout << "bench: " << res.rows.size() << " rows -> " << (out / (cfg.experiment_id + ".csv")).string() << "\n";
  return 0;
}

int run_schedules(const Common& c) {
  const auto cfg = load(c, rsm::ExperimentKind::ScheduleDump);
  const auto d = rsm::run_schedule_dump(cfg);
  const fs::path out(c.out);
  write(out / (cfg.experiment_id + ".csv"), d.csv);
  write(out / (cfg.experiment_id + ".svg"), d.svg);
  write(out / (cfg.experiment_id + "_summary.json"), d.summary_json);
  std::cout << d.summary_json;
  return 0;
}

int run_audit(const Common& c) {
  const auto cfg = load(c, rsm::ExperimentKind::KernelAudit);
  const auto rep = rsm::run_kernel_audit(cfg);
  write(fs::path(c.out) / (cfg.experiment_id + "_report.txt"), rep.text());
  std::cout << rep.text();
  return rep.passed() ? 0 : 3;
}

int run_train(const Common& c) {
  const auto cfg = load(c, rsm::ExperimentKind::Train);
  const auto res = rsm::run_train(cfg);
  const fs::path out(c.out);
  write(out / (cfg.experiment_id + "_metrics.csv"), res.metrics_csv);
  write(out / (cfg.experiment_id + "_reference.json"), res.reference_checkpoint);
  write(out / (cfg.experiment_id + "_checkpoint.json"), res.checkpoint);
  write(out / (cfg.experiment_id + "_summary.json"), res.summary_json);
  std::cout << res.summary_json;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rsmlab: reward-guided score matching toy lab"};
  app.require_subcommand(1);
  Common bench, schedules, train, audit;
  auto* b = app.add_subcommand("bench", "estimator RMSE grid");
  auto* s = app.add_subcommand("schedules", "per-method weight tables and h(t) plot");
  auto* t = app.add_subcommand("train", "pretrain and fine-tune the toy score net");
  auto* a = app.add_subcommand("audit", "kernel, delta/w and oracle checks");
  add_common(b, bench);
  add_common(s, schedules);
  add_common(t, train);
  add_common(a, audit);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (b->parsed()) return run_bench(bench);
    if (s->parsed()) return run_schedules(schedules);
    if (t->parsed()) return run_train(train);
    return run_audit(audit);
  } catch (const rsm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const rsm::InvalidNoiseError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const rsm::ContractError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const rsm::DomainError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
