#include "rsm/bench_config.hpp"

#include "rsm/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

namespace rsm {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

int get_positive(const json& j, const char* key, const std::string& where, int fallback) {
  const int v = get<int>(j, key, where, fallback);
  if (v < 1) throw ConfigError(where + "." + key + " must be >= 1");
  return v;
}

Vec2 vec2(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError(where + ": expected [x, y]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

FlowSpec parse_flow(const json& j) {
  check_keys(j, {"kind", "beta_min", "beta_max", "sigma_min", "sigma_max"}, "flow");
  const auto kind = flow_kind_from_string(get<std::string>(j, "kind", "flow", "vp"));
  switch (kind) {
    case FlowKind::VP:
      return FlowSpec::vp(get<double>(j, "beta_min", "flow", 0.1), get<double>(j, "beta_max", "flow", 20.0));
    case FlowKind::VE:
      return FlowSpec::ve(get<double>(j, "sigma_min", "flow", 0.01), get<double>(j, "sigma_max", "flow", 50.0));
    case FlowKind::RectifiedFlow:
      return FlowSpec::rectified();
  }
  return FlowSpec::vp();
}

GaussianMixture parse_mixture(const json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "toy") return toy_reference();
    if (name == "single_gaussian") return GaussianMixture{{1.0}, {Vec2::Zero()}, 1.0};
    throw ConfigError("pair.reference: unknown preset '" + name + "'");
  }
  check_keys(j, {"weights", "means", "component_var"}, "pair.reference");
  GaussianMixture g;
  g.weights = get<std::vector<double>>(j, "weights", "pair.reference", {});
  if (!j.contains("means") || !j.at("means").is_array()) throw ConfigError("pair.reference.means missing");
  for (const auto& m : j.at("means")) g.means.push_back(vec2(m, "pair.reference.means"));
  g.component_var = get<double>(j, "component_var", "pair.reference", 1.0);
  g.validate();
  return g;
}

ClipRule parse_clip(const json& j, const std::string& where) {
  check_keys(j, {"kind", "xi"}, where);
  ClipRule c;
  c.kind = clip_kind_from_string(get<std::string>(j, "kind", where, "none"));
  c.xi = get<double>(j, "xi", where, 0.0);
  c.validate();
  return c;
}

EstimatorSpec parse_estimator(const json& j, std::size_t idx) {
  const std::string where = "rmse.estimators[" + std::to_string(idx) + "]";
  check_keys(j, {"name", "kind", "lookahead", "stats", "pattern", "localized"}, where);
  EstimatorSpec e;
  const auto kind = get<std::string>(j, "kind", where, "zo");
  if (kind == "fo_cs") {
    e.family = EstimatorFamily::FirstOrderCurrent;
    e.depth = 0;
  } else if (kind == "fo_la") {
    e.family = EstimatorFamily::FirstOrderLookahead;
    e.depth = 1;
  } else if (kind == "zo") {
    e.family = EstimatorFamily::ZerothOrder;
    e.depth = std::nullopt;
  } else {
    throw ConfigError(where + ".kind: expected fo_cs, fo_la or zo");
  }
  if (j.contains("lookahead")) {
    const auto& la = j.at("lookahead");
    if (la.is_string()) {
      const auto s = la.get<std::string>();
      if (s == "full") e.depth = std::nullopt;
      else if (s == "one_step") e.depth = 1;
      else if (s == "current") e.depth = 0;
      else throw ConfigError(where + ".lookahead: expected full, one_step, current or a depth");
    } else if (la.is_number_integer() && la.get<int>() >= 0) {
      e.depth = la.get<int>();
    } else {
      throw ConfigError(where + ".lookahead: expected full, one_step, current or a depth");
    }
  }
  if (e.family == EstimatorFamily::FirstOrderCurrent && e.depth != 0) {
    throw ConfigError(where + ": fo_cs is current-state only");
  }
  if (e.family != EstimatorFamily::FirstOrderCurrent && e.depth == 0) {
    throw ConfigError(where + ": lookahead estimators need depth >= 1");
  }
  e.stats = stats_mode_from_string(get<std::string>(j, "stats", where, "raw"));
  e.pattern = get<std::vector<int>>(j, "pattern", where, {});
  for (int k : e.pattern) {
    if (k < 1) throw ConfigError(where + ".pattern: widths must be >= 1");
  }
  e.localized = get<bool>(j, "localized", where, false);
  e.name = get<std::string>(j, "name", where, kind + "_" + std::to_string(idx));
  return e;
}

std::vector<EstimatorSpec> default_estimators() {
  EstimatorSpec fo{"fo_one_step", EstimatorFamily::FirstOrderLookahead, 1, StatsMode::Raw, {}, false};
  EstimatorSpec raw{"zo_raw", EstimatorFamily::ZerothOrder, std::nullopt, StatsMode::Raw, {}, false};
  EstimatorSpec cen{"zo_centered", EstimatorFamily::ZerothOrder, std::nullopt, StatsMode::Centered, {}, false};
  return {fo, raw, cen};
}

RmseSpec parse_rmse(const json& j) {
  check_keys(j, {"steps", "step_fractions", "sizes", "size_unit", "n_points", "n_repeats", "fixed_point",
                 "rollout_field", "estimators"},
             "rmse");
  RmseSpec r;
  r.steps = get<std::vector<int>>(j, "steps", "rmse", {});
  r.step_fractions = get<std::vector<double>>(j, "step_fractions", "rmse", {});
  for (double f : r.step_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("rmse.step_fractions must lie in (0, 1]");
  }
  if (r.steps.empty() && r.step_fractions.empty()) r.step_fractions = {0.2, 0.8};
  r.sizes = get<std::vector<int>>(j, "sizes", "rmse", r.sizes);
  if (r.sizes.empty()) throw ConfigError("rmse.sizes must not be empty");
  for (int s : r.sizes) {
    if (s < 1) throw ConfigError("rmse.sizes entries must be >= 1");
  }
  const auto unit = get<std::string>(j, "size_unit", "rmse", "branches");
  if (unit == "branches") r.size_unit = SizeUnit::Branches;
  else if (unit == "nfe") r.size_unit = SizeUnit::Nfe;
  else throw ConfigError("rmse.size_unit: expected branches or nfe");
  r.n_points = get_positive(j, "n_points", "rmse", r.n_points);
  r.n_repeats = get_positive(j, "n_repeats", "rmse", r.n_repeats);
  r.fixed_point = get<bool>(j, "fixed_point", "rmse", false);
  const auto field = get<std::string>(j, "rollout_field", "rmse", "target");
  if (field != "target" && field != "reference") throw ConfigError("rmse.rollout_field: expected target or reference");
  r.rollout_reference = field == "reference";
  if (j.contains("estimators")) {
    if (!j.at("estimators").is_array()) throw ConfigError("rmse.estimators: expected an array");
    std::size_t idx = 0;
    for (const auto& e : j.at("estimators")) r.estimators.push_back(parse_estimator(e, idx++));
  }
  if (r.estimators.empty()) r.estimators = default_estimators();
  return r;
}

ScheduleSpec parse_schedules(const json& j) {
  check_keys(j, {"methods", "alpha", "sqdf_gamma_base", "resdb_wR_over_wF", "c2_reward", "log_scale"}, "schedules");
  ScheduleSpec s;
  if (j.contains("methods")) {
    for (const auto& n : get<std::vector<std::string>>(j, "methods", "schedules", {})) {
      const auto m = method_name_from_string(n);
      if (m == MethodName::Custom) throw ConfigError("schedules.methods: custom has no table row");
      s.methods.push_back(m);
    }
  } else {
    s.methods = named_methods();
  }
  s.alpha = get<double>(j, "alpha", "schedules", s.alpha);
  s.sqdf_gamma_base = get<double>(j, "sqdf_gamma_base", "schedules", s.sqdf_gamma_base);
  s.resdb_wR_over_wF = get<double>(j, "resdb_wR_over_wF", "schedules", s.resdb_wR_over_wF);
  s.c2_reward = get<double>(j, "c2_reward", "schedules", s.c2_reward);
  s.log_scale = get<bool>(j, "log_scale", "schedules", s.log_scale);
  return s;
}

TrainSpec parse_train(const json& j) {
  check_keys(j, {"pretrain", "finetune", "method", "reference_checkpoint", "eval_samples", "w2_samples",
                 "smooth_window"},
             "train");
  TrainSpec t;
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    check_keys(p, {"batch", "iters", "lr", "time_levels"}, "train.pretrain");
    t.pretrain.batch = get_positive(p, "batch", "train.pretrain", t.pretrain.batch);
    t.pretrain.iters = get<int>(p, "iters", "train.pretrain", t.pretrain.iters);
    if (t.pretrain.iters < 0) throw ConfigError("train.pretrain.iters must be >= 0");
    t.pretrain.lr = get<double>(p, "lr", "train.pretrain", t.pretrain.lr);
    t.pretrain.time_levels = get_positive(p, "time_levels", "train.pretrain", t.pretrain.time_levels);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    check_keys(f, {"iters", "trajectories", "steps_per_traj", "group_size", "updates_per_batch", "lr", "beta1",
                   "beta2", "adam_eps", "stats"},
               "train.finetune");
    auto& c = t.finetune;
    c.iters = get<int>(f, "iters", "train.finetune", c.iters);
    if (c.iters < 0) throw ConfigError("train.finetune.iters must be >= 0");
    c.trajectories = get_positive(f, "trajectories", "train.finetune", c.trajectories);
    c.steps_per_traj = get<int>(f, "steps_per_traj", "train.finetune", c.steps_per_traj);
    if (c.steps_per_traj < 0) throw ConfigError("train.finetune.steps_per_traj must be >= 0");
    c.group_size = get_positive(f, "group_size", "train.finetune", c.group_size);
    c.updates_per_batch = get_positive(f, "updates_per_batch", "train.finetune", c.updates_per_batch);
    c.lr = get<double>(f, "lr", "train.finetune", c.lr);
    c.beta1 = get<double>(f, "beta1", "train.finetune", c.beta1);
    c.beta2 = get<double>(f, "beta2", "train.finetune", c.beta2);
    c.adam_eps = get<double>(f, "adam_eps", "train.finetune", c.adam_eps);
    c.stats = stats_mode_from_string(get<std::string>(f, "stats", "train.finetune", to_string(c.stats)));
    if (c.trajectories % c.group_size != 0) {
      throw ConfigError("train.finetune.trajectories must be a multiple of group_size");
    }
  }
  if (j.contains("method")) {
    const auto& m = j.at("method");
    check_keys(m, {"name", "alpha", "clip", "gamma_cutoff"}, "train.method");
    t.method.name = method_name_from_string(get<std::string>(m, "name", "train.method", "reinforce_kl"));
    t.method.alpha = get<double>(m, "alpha", "train.method", t.method.alpha);
    if (!(t.method.alpha > 0.0)) throw ConfigError("train.method.alpha must be > 0");
    if (m.contains("clip")) t.method.clip = parse_clip(m.at("clip"), "train.method.clip");
    t.method.gamma_cutoff = get<double>(m, "gamma_cutoff", "train.method", t.method.gamma_cutoff);
  }
  t.reference_checkpoint = get<std::string>(j, "reference_checkpoint", "train", "");
  t.eval_samples = get_positive(j, "eval_samples", "train", t.eval_samples);
  t.w2_samples = get<int>(j, "w2_samples", "train", t.w2_samples);
  if (t.w2_samples < 0) throw ConfigError("train.w2_samples must be >= 0");
  t.smooth_window = get_positive(j, "smooth_window", "train", t.smooth_window);
  return t;
}

AuditSpec parse_audit(const json& j) {
  check_keys(j, {"instances", "omega_scale", "sigma"}, "audit");
  AuditSpec a;
  a.instances = get_positive(j, "instances", "audit", a.instances);
  a.omega_scale = get<double>(j, "omega_scale", "audit", a.omega_scale);
  if (j.contains("sigma")) a.sigma_override = get<double>(j, "sigma", "audit", 0.0);
  return a;
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::RmseBench: return "rmse_bench";
    case ExperimentKind::ScheduleDump: return "schedule_dump";
    case ExperimentKind::Train: return "train";
    case ExperimentKind::KernelAudit: return "kernel_audit";
  }
  return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
  if (name == "rmse_bench") return ExperimentKind::RmseBench;
  if (name == "schedule_dump") return ExperimentKind::ScheduleDump;
  if (name == "train") return ExperimentKind::Train;
  if (name == "kernel_audit") return ExperimentKind::KernelAudit;
  throw ConfigError("unknown experiment kind '" + name + "'");
}

std::string to_string(EstimatorFamily family) {
  switch (family) {
    case EstimatorFamily::FirstOrderCurrent: return "fo_cs";
    case EstimatorFamily::FirstOrderLookahead: return "fo_la";
    case EstimatorFamily::ZerothOrder: return "zo";
  }
  return "?";
}

int EstimatorSpec::lookahead_index(int i) const {
  if (!depth) return 0;
  return std::max(0, i - *depth);
}

std::vector<int> RmseSpec::resolved_steps(int n_steps) const {
  std::vector<int> out = steps;
  for (double f : step_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("rmse.step_fractions must lie in (0, 1]");
    out.push_back(std::max(1, static_cast<int>(std::lround(f * n_steps))));
  }
  for (int i : out) {
    if (i < 1 || i > n_steps) throw ConfigError("rmse step " + std::to_string(i) + " outside 1..N");
  }
  return out;
}

ReverseSchedule ExperimentConfig::schedule() const {
  return ReverseSchedule(flow, TimeGrid::uniform(n_steps, shift), noise, sampler);
}

TiltedPair ExperimentConfig::pair() const { return TiltedPair::make(reference, reward, alpha); }

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"kind", "experiment_id", "seed", "flow", "grid", "noise", "sampler", "pair", "rmse", "schedules",
                 "train", "audit"},
             "config");
  ExperimentConfig c;
  if (!j.contains("kind")) throw ConfigError("config.kind is required");
  c.kind = experiment_kind_from_string(get<std::string>(j, "kind", "config", ""));
  c.experiment_id = get<std::string>(j, "experiment_id", "config", to_string(c.kind));
  c.seed = get<std::uint64_t>(j, "seed", "config", 0);
  if (c.kind == ExperimentKind::ScheduleDump) {
    c.flow = FlowSpec::rectified();
    c.n_steps = 10;
    c.noise = {NoiseRule::FlowGRPO, 1.0};
    c.sampler = SamplerKind::EulerFlow;
  }
  if (j.contains("flow")) c.flow = parse_flow(j.at("flow"));
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    check_keys(g, {"n_steps", "shift"}, "grid");
    c.n_steps = get_positive(g, "n_steps", "grid", c.n_steps);
    c.shift = get<double>(g, "shift", "grid", c.shift);
    if (!(c.shift > 0.0)) throw ConfigError("grid.shift must be > 0");
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    check_keys(n, {"rule", "amplitude"}, "noise");
    c.noise.rule = noise_rule_from_string(get<std::string>(n, "rule", "noise", to_string(c.noise.rule)));
    c.noise.amplitude = get<double>(n, "amplitude", "noise", c.noise.amplitude);
    if (c.noise.amplitude < 0.0) throw ConfigError("noise.amplitude must be >= 0");
  }
  if (j.contains("sampler")) c.sampler = sampler_kind_from_string(get<std::string>(j, "sampler", "config", "ddim"));
  if (j.contains("pair")) {
    const auto& p = j.at("pair");
    check_keys(p, {"reference", "reward", "alpha"}, "pair");
    if (p.contains("reference")) c.reference = parse_mixture(p.at("reference"));
    if (p.contains("reward")) {
      const auto& r = p.at("reward");
      check_keys(r, {"slope", "intercept"}, "pair.reward");
      if (r.contains("slope")) c.reward.slope = vec2(r.at("slope"), "pair.reward.slope");
      c.reward.intercept = get<double>(r, "intercept", "pair.reward", c.reward.intercept);
    }
    c.alpha = get<double>(p, "alpha", "pair", c.alpha);
    if (!(c.alpha > 0.0)) throw ConfigError("pair.alpha must be > 0");
  }
  c.rmse = parse_rmse(j.contains("rmse") ? j.at("rmse") : json::object());
  if (j.contains("schedules")) c.schedules = parse_schedules(j.at("schedules"));
  else c.schedules.methods = named_methods();
  if (j.contains("train")) c.train = parse_train(j.at("train"));
  if (j.contains("audit")) c.audit = parse_audit(j.at("audit"));
  c.train.pretrain.seed = c.seed;
  c.train.finetune.seed = c.seed;
  // Building the schedule validates flow/sampler/noise compatibility up front.
  (void)c.schedule();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_experiment_config(ss.str());
}

}  // namespace rsm
