#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "biped/control.hpp"
#include "biped/ga.hpp"
#include "biped/rl.hpp"
#include "biped/sim.hpp"

#ifndef BIPED_VERSION
#define BIPED_VERSION "0.1.0"
#endif

namespace biped {

using json = nlohmann::ordered_json;

inline constexpr const char* kVersion = BIPED_VERSION;

// ---------------------------------------------------------------- json helpers

namespace cfg {

inline void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& ctx) {
  if (!j.is_object()) throw Error("config-invalid", ctx + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : keys) ok = ok || k == a;
    if (!ok) throw Error("config-invalid", ctx + ": unknown key \"" + k + "\"");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& ctx) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error("config-invalid", ctx + "." + key + ": " + e.what());
  }
}

inline json diag(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (int i = 0; i < m.rows(); ++i) a.push_back(m(i, i));
  return a;
}

inline Eigen::MatrixXd read_diag(const json& j, const char* key, const Eigen::MatrixXd& dflt,
                                 const std::string& ctx) {
  if (!j.contains(key)) return dflt;
  std::vector<double> v;
  read(j, key, v, ctx);
  if (static_cast<long>(v.size()) != dflt.rows()) {
    throw Error("config-invalid", ctx + "." + key + ": expected " + std::to_string(dflt.rows()) + " entries");
  }
  return Eigen::VectorXd::Map(v.data(), static_cast<long>(v.size())).asDiagonal();
}

inline ModelVariant variant_from(const std::string& s) {
  for (auto v : {ModelVariant::Lipm, ModelVariant::LipmVertical, ModelVariant::TwoMass}) {
    if (to_string(v) == s) return v;
  }
  throw Error("config-invalid", "unknown model variant \"" + s + "\"");
}

}  // namespace cfg

// ---------------------------------------------------------------- model / gait / engine

inline json to_json(const ModelParams& p) {
  return {{"m_c_kg", p.m_c}, {"m_to_kg", p.m_to}, {"l_m", p.l},
          {"z_c_m", p.z_c},  {"z_to_m", p.z_to},  {"g_mps2", p.g}};
}

inline ModelParams model_from_json(const json& j, ModelParams p = {}) {
  const std::string c = "model";
  cfg::check_keys(j, {"m_c_kg", "m_to_kg", "l_m", "z_c_m", "z_to_m", "g_mps2"}, c);
  cfg::read(j, "m_c_kg", p.m_c, c);
  cfg::read(j, "m_to_kg", p.m_to, c);
  cfg::read(j, "l_m", p.l, c);
  cfg::read(j, "z_c_m", p.z_c, c);
  cfg::read(j, "z_to_m", p.z_to, c);
  cfg::read(j, "g_mps2", p.g, c);
  return p;
}

inline json to_json(const GaitParams& g) {
  return {{"t_ss_s", g.T_ss},         {"t_ds_s", g.T_ds},           {"step_len_m", g.x},
          {"step_width_m", g.y},       {"step_angle_deg", g.alpha},  {"swing_height_m", g.z_sw},
          {"torso_incl_deg", g.TI_to}, {"com_amp_m", g.A_z},         {"torso_amp_deg", g.A_to},
          {"com_height_m", g.z_0},     {"arm_bias_rad", g.arm_bias}, {"arm_amp_rad", g.arm_amplitude}};
}

inline GaitParams gait_from_json(const json& j, GaitParams g = {}) {
  const std::string c = "gait";
  cfg::check_keys(j, {"t_ss_s", "t_ds_s", "step_len_m", "step_width_m", "step_angle_deg", "swing_height_m",
                      "torso_incl_deg", "com_amp_m", "torso_amp_deg", "com_height_m", "arm_bias_rad",
                      "arm_amp_rad"},
                  c);
  cfg::read(j, "t_ss_s", g.T_ss, c);
  cfg::read(j, "t_ds_s", g.T_ds, c);
  cfg::read(j, "step_len_m", g.x, c);
  cfg::read(j, "step_width_m", g.y, c);
  cfg::read(j, "step_angle_deg", g.alpha, c);
  cfg::read(j, "swing_height_m", g.z_sw, c);
  cfg::read(j, "torso_incl_deg", g.TI_to, c);
  cfg::read(j, "com_amp_m", g.A_z, c);
  cfg::read(j, "torso_amp_deg", g.A_to, c);
  cfg::read(j, "com_height_m", g.z_0, c);
  cfg::read(j, "arm_bias_rad", g.arm_bias, c);
  cfg::read(j, "arm_amp_rad", g.arm_amplitude, c);
  return g;
}

inline json to_json(const EngineConfig& e) {
  json j;
  j["variant"] = std::string(to_string(e.variant));
  j["dt_s"] = e.dt;
  j["init_duration_s"] = e.init_duration;
  j["init_shift_fraction"] = e.init_shift_fraction;
  j["command_tau_s"] = e.command_tau;
  j["integral_limit"] = e.integral_limit;
  j["max_torso_accel_radps2"] = e.max_torso_accel;
  j["torso_safe_angle_rad"] = e.torso_safe_angle;
  j["torso_saturation_compensation"] = e.torso_saturation_compensation;
  j["lqr_q_diag"] = cfg::diag(e.weights.Q);
  j["lqr_r_diag"] = cfg::diag(e.weights.R);
  j["tracked_states"] = e.tracked;
  j["kalman"] = {{"q_proc_diag", cfg::diag(e.kalman.Q_proc)},
                 {"r_meas_diag", cfg::diag(e.kalman.R_meas)},
                 {"p0_diag", cfg::diag(e.kalman.P0)},
                 {"fixed_gain", e.kalman.use_fixed_gain}};
  j["constraints"] = {{"step_len_max_m", e.constraints.R_max},
                      {"step_angle_max_rad", e.constraints.sigma_max},
                      {"lateral_max_m", e.constraints.lateral_max},
                      {"nominal_width_m", e.constraints.nominal_width},
                      {"min_distance_m", e.constraints.min_distance}};
  j["foot"] = {{"half_length_m", e.foot.half_length}, {"half_width_m", e.foot.half_width}};
  j["emergency"] = {{"enabled", e.emergency.enabled},
                    {"zmp_shrink", e.emergency.zmp_shrink},
                    {"tracking_error_m", e.emergency.tracking_error},
                    {"min_step_fraction", e.emergency.min_step_fraction},
                    {"zmp_persist_ticks", e.emergency.zmp_persist_ticks},
                    {"max_capture_shift_m", e.emergency.max_capture_shift}};
  j["residual"] = {{"dz_max_m", e.residual.dz_max}, {"dthetadd_max_radps2", e.residual.dthetadd_max}};
  return j;
}

inline EngineConfig engine_from_json(const json& j, EngineConfig e = {}) {
  const std::string c = "engine";
  cfg::check_keys(j, {"variant", "dt_s", "init_duration_s", "init_shift_fraction", "command_tau_s",
                      "integral_limit", "max_torso_accel_radps2", "torso_safe_angle_rad",
                      "torso_saturation_compensation", "lqr_q_diag", "lqr_r_diag", "tracked_states", "kalman",
                      "constraints", "foot", "emergency", "residual"},
                  c);
  if (j.contains("variant")) {
    std::string v;
    cfg::read(j, "variant", v, c);
    e.variant = cfg::variant_from(v);
  }
  cfg::read(j, "dt_s", e.dt, c);
  cfg::read(j, "init_duration_s", e.init_duration, c);
  cfg::read(j, "init_shift_fraction", e.init_shift_fraction, c);
  cfg::read(j, "command_tau_s", e.command_tau, c);
  cfg::read(j, "integral_limit", e.integral_limit, c);
  cfg::read(j, "max_torso_accel_radps2", e.max_torso_accel, c);
  cfg::read(j, "torso_safe_angle_rad", e.torso_safe_angle, c);
  cfg::read(j, "torso_saturation_compensation", e.torso_saturation_compensation, c);
  cfg::read(j, "tracked_states", e.tracked, c);
  const int aug = 4 + static_cast<int>(e.tracked.size());
  Eigen::MatrixXd q = e.weights.Q;
  if (q.rows() != aug) q = Eigen::MatrixXd::Identity(aug, aug);
  e.weights.Q = cfg::read_diag(j, "lqr_q_diag", q, c);
  e.weights.R = cfg::read_diag(j, "lqr_r_diag", e.weights.R, c);
  if (j.contains("kalman")) {
    const auto& k = j.at("kalman");
    const std::string kc = c + ".kalman";
    cfg::check_keys(k, {"q_proc_diag", "r_meas_diag", "p0_diag", "fixed_gain"}, kc);
    e.kalman.Q_proc = cfg::read_diag(k, "q_proc_diag", e.kalman.Q_proc, kc);
    e.kalman.R_meas = cfg::read_diag(k, "r_meas_diag", e.kalman.R_meas, kc);
    e.kalman.P0 = cfg::read_diag(k, "p0_diag", e.kalman.P0, kc);
    cfg::read(k, "fixed_gain", e.kalman.use_fixed_gain, kc);
  }
  if (j.contains("constraints")) {
    const auto& k = j.at("constraints");
    const std::string kc = c + ".constraints";
    cfg::check_keys(k, {"step_len_max_m", "step_angle_max_rad", "lateral_max_m", "nominal_width_m", "min_distance_m"},
                    kc);
    cfg::read(k, "step_len_max_m", e.constraints.R_max, kc);
    cfg::read(k, "step_angle_max_rad", e.constraints.sigma_max, kc);
    cfg::read(k, "lateral_max_m", e.constraints.lateral_max, kc);
    cfg::read(k, "nominal_width_m", e.constraints.nominal_width, kc);
    cfg::read(k, "min_distance_m", e.constraints.min_distance, kc);
  }
  if (j.contains("foot")) {
    const auto& k = j.at("foot");
    cfg::check_keys(k, {"half_length_m", "half_width_m"}, c + ".foot");
    cfg::read(k, "half_length_m", e.foot.half_length, c + ".foot");
    cfg::read(k, "half_width_m", e.foot.half_width, c + ".foot");
  }
  if (j.contains("emergency")) {
    const auto& k = j.at("emergency");
    const std::string kc = c + ".emergency";
    cfg::check_keys(k, {"enabled", "zmp_shrink", "tracking_error_m", "min_step_fraction", "zmp_persist_ticks",
                        "max_capture_shift_m"},
                    kc);
    cfg::read(k, "enabled", e.emergency.enabled, kc);
    cfg::read(k, "zmp_shrink", e.emergency.zmp_shrink, kc);
    cfg::read(k, "tracking_error_m", e.emergency.tracking_error, kc);
    cfg::read(k, "min_step_fraction", e.emergency.min_step_fraction, kc);
    cfg::read(k, "zmp_persist_ticks", e.emergency.zmp_persist_ticks, kc);
    cfg::read(k, "max_capture_shift_m", e.emergency.max_capture_shift, kc);
  }
  if (j.contains("residual")) {
    const auto& k = j.at("residual");
    cfg::check_keys(k, {"dz_max_m", "dthetadd_max_radps2"}, c + ".residual");
    cfg::read(k, "dz_max_m", e.residual.dz_max, c + ".residual");
    cfg::read(k, "dthetadd_max_radps2", e.residual.dthetadd_max, c + ".residual");
  }
  return e;
}

// ---------------------------------------------------------------- plant / schedule

inline json to_json(const PlantConfig& p) {
  json pushes = json::array();
  for (const auto& q : p.pushes) pushes.push_back({{"t_s", q.t}, {"axis", q.axis}, {"dv_mps", q.dv}});
  return {{"true_model", to_json(p.true_params)},
          {"mismatch", p.mismatch},
          {"mismatch_range", p.mismatch_range},
          {"meas_noise_var", p.meas_noise_var},
          {"dt_s", p.dt},
          {"fall_margin_m", p.fall_margin},
          {"theta_limit_rad", p.theta_limit},
          {"pushes", pushes},
          {"random_pushes",
           {{"interval_s", p.random_pushes.interval},
            {"jitter_s", p.random_pushes.jitter},
            {"dv_min_mps", p.random_pushes.dv_min},
            {"dv_max_mps", p.random_pushes.dv_max},
            {"first_s", p.random_pushes.first}}}};
}

inline PlantConfig plant_from_json(const json& j, PlantConfig p = {}) {
  const std::string c = "plant";
  cfg::check_keys(j, {"true_model", "mismatch", "mismatch_range", "meas_noise_var", "dt_s", "fall_margin_m",
                      "theta_limit_rad", "pushes", "random_pushes"},
                  c);
  if (j.contains("true_model")) p.true_params = model_from_json(j.at("true_model"), p.true_params);
  cfg::read(j, "mismatch", p.mismatch, c);
  cfg::read(j, "mismatch_range", p.mismatch_range, c);
  cfg::read(j, "meas_noise_var", p.meas_noise_var, c);
  cfg::read(j, "dt_s", p.dt, c);
  cfg::read(j, "fall_margin_m", p.fall_margin, c);
  cfg::read(j, "theta_limit_rad", p.theta_limit, c);
  if (j.contains("pushes")) {
    p.pushes.clear();
    for (const auto& q : j.at("pushes")) {
      cfg::check_keys(q, {"t_s", "axis", "dv_mps"}, c + ".pushes");
      Push push;
      cfg::read(q, "t_s", push.t, c + ".pushes");
      cfg::read(q, "axis", push.axis, c + ".pushes");
      cfg::read(q, "dv_mps", push.dv, c + ".pushes");
      if (push.axis < 0 || push.axis > 1) throw Error("config-invalid", c + ".pushes: axis must be 0 or 1");
      p.pushes.push_back(push);
    }
  }
  if (j.contains("random_pushes")) {
    const auto& k = j.at("random_pushes");
    const std::string kc = c + ".random_pushes";
    cfg::check_keys(k, {"interval_s", "jitter_s", "dv_min_mps", "dv_max_mps", "first_s"}, kc);
    cfg::read(k, "interval_s", p.random_pushes.interval, kc);
    cfg::read(k, "jitter_s", p.random_pushes.jitter, kc);
    cfg::read(k, "dv_min_mps", p.random_pushes.dv_min, kc);
    cfg::read(k, "dv_max_mps", p.random_pushes.dv_max, kc);
    cfg::read(k, "first_s", p.random_pushes.first, kc);
  }
  return p;
}

inline json to_json(const CommandSchedule& s) {
  json a = json::array();
  for (const auto& e : s.entries()) {
    a.push_back({{"t_s", e.t},
                 {"step_len_m", e.command.X},
                 {"step_width_m", e.command.Y},
                 {"step_angle_deg", e.command.alpha},
                 {"walk", e.command.walk}});
  }
  return a;
}

inline CommandSchedule schedule_from_json(const json& j) {
  std::vector<ScheduleEntry> out;
  for (const auto& e : j) {
    cfg::check_keys(e, {"t_s", "step_len_m", "step_width_m", "step_angle_deg", "walk"}, "schedule");
    ScheduleEntry s;
    s.command.walk = true;
    cfg::read(e, "t_s", s.t, "schedule");
    cfg::read(e, "step_len_m", s.command.X, "schedule");
    cfg::read(e, "step_width_m", s.command.Y, "schedule");
    cfg::read(e, "step_angle_deg", s.command.alpha, "schedule");
    cfg::read(e, "walk", s.command.walk, "schedule");
    out.push_back(s);
  }
  return CommandSchedule(std::move(out));
}

/// Omnidirectional walking timeline: in place, forward, sideways, both,
/// then turning, and back to in place.
inline CommandSchedule omnidirectional_schedule() {
  return CommandSchedule({{0.0, {0.0, 0.0, 0.0, true}},
                          {10.0, {0.05, 0.0, 0.0, true}},
                          {20.0, {0.0, 0.04, 0.0, true}},
                          {30.0, {0.05, 0.04, 0.0, true}},
                          {40.0, {0.05, 0.04, 10.0, true}},
                          {60.0, {0.0, 0.0, 0.0, true}}});
}

// ---------------------------------------------------------------- learning configs

inline json to_json(const GaConfig& g) {
  json b = json::object();
  for (int i = 0; i < kGenes; ++i) b[std::string(kGeneNames[i])] = {g.bounds[i].lo, g.bounds[i].hi};
  return {{"population", g.population},
          {"generations", g.generations},
          {"crossover_rate", g.crossover_rate},
          {"mutation_rate", g.mutation_rate},
          {"sigma_fraction", g.sigma_fraction},
          {"init_sigma_fraction", g.init_sigma_fraction},
          {"elitism", g.elitism},
          {"tournament", g.tournament},
          {"repeats", g.repeats},
          {"bounds", b}};
}

inline json genome_to_json(const Genome& x) {
  json j = json::object();
  for (int i = 0; i < kGenes; ++i) j[std::string(kGeneNames[i])] = x[i];
  return j;
}

inline Genome genome_from_json(const json& j, Genome x) {
  if (!j.is_object()) throw Error("config-invalid", "genome: expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (int i = 0; i < kGenes; ++i) {
      if (k == kGeneNames[i]) {
        cfg::read(j, k.c_str(), x[i], "genome");
        ok = true;
      }
    }
    if (!ok) throw Error("config-invalid", "genome: unknown key \"" + k + "\"");
  }
  return x;
}

inline GaConfig ga_from_json(const json& j, GaConfig g = {}) {
  const std::string c = "ga";
  cfg::check_keys(j, {"population", "generations", "crossover_rate", "mutation_rate", "sigma_fraction",
                      "init_sigma_fraction", "elitism", "tournament", "repeats", "bounds"},
                  c);
  cfg::read(j, "population", g.population, c);
  cfg::read(j, "generations", g.generations, c);
  cfg::read(j, "crossover_rate", g.crossover_rate, c);
  cfg::read(j, "mutation_rate", g.mutation_rate, c);
  cfg::read(j, "sigma_fraction", g.sigma_fraction, c);
  cfg::read(j, "init_sigma_fraction", g.init_sigma_fraction, c);
  cfg::read(j, "elitism", g.elitism, c);
  cfg::read(j, "tournament", g.tournament, c);
  cfg::read(j, "repeats", g.repeats, c);
  if (j.contains("bounds")) {
    for (const auto& [k, v] : j.at("bounds").items()) {
      bool ok = false;
      for (int i = 0; i < kGenes; ++i) {
        if (k == kGeneNames[i]) {
          std::vector<double> lh;
          cfg::read(j.at("bounds"), k.c_str(), lh, c + ".bounds");
          if (lh.size() != 2) throw Error("config-invalid", c + ".bounds." + k + ": expected [lo, hi]");
          g.bounds[i] = {lh[0], lh[1]};
          ok = true;
        }
      }
      if (!ok) throw Error("config-invalid", c + ".bounds: unknown gene \"" + k + "\"");
    }
  }
  return g;
}

inline json to_json(const PpoConfig& p) {
  return {{"clip_eps", p.clip_eps},         {"epochs", p.epochs},
          {"minibatches", p.minibatches},   {"lr", p.lr},
          {"batch", p.batch},               {"gamma", p.gamma},
          {"lambda", p.lambda},             {"value_coef", p.value_coef},
          {"max_grad_norm", p.max_grad_norm}, {"adam_beta1", p.adam_beta1},
          {"adam_beta2", p.adam_beta2},     {"adam_eps", p.adam_eps},
          {"hidden", p.hidden},             {"init_log_std", p.init_log_std}};
}

inline PpoConfig ppo_from_json(const json& j, PpoConfig p = {}) {
  const std::string c = "ppo";
  cfg::check_keys(j, {"clip_eps", "epochs", "minibatches", "lr", "batch", "gamma", "lambda", "value_coef",
                      "max_grad_norm", "adam_beta1", "adam_beta2", "adam_eps", "hidden", "init_log_std"},
                  c);
  cfg::read(j, "clip_eps", p.clip_eps, c);
  cfg::read(j, "epochs", p.epochs, c);
  cfg::read(j, "minibatches", p.minibatches, c);
  cfg::read(j, "lr", p.lr, c);
  cfg::read(j, "batch", p.batch, c);
  cfg::read(j, "gamma", p.gamma, c);
  cfg::read(j, "lambda", p.lambda, c);
  cfg::read(j, "value_coef", p.value_coef, c);
  cfg::read(j, "max_grad_norm", p.max_grad_norm, c);
  cfg::read(j, "adam_beta1", p.adam_beta1, c);
  cfg::read(j, "adam_beta2", p.adam_beta2, c);
  cfg::read(j, "adam_eps", p.adam_eps, c);
  cfg::read(j, "hidden", p.hidden, c);
  cfg::read(j, "init_log_std", p.init_log_std, c);
  return p;
}

struct TaskSettings {
  double step_len = 0.05;
  double square_side = 2.0;
  double turn_rate_min = 30.0;
  double turn_rate_max = 60.0;
  double train_max_time = 60.0;
  double eval_max_time = 600.0;
  double reward_k = 0.01;
};

inline json to_json(const TaskSettings& t) {
  return {{"step_len_m", t.step_len},          {"square_side_m", t.square_side},
          {"turn_rate_min_degps", t.turn_rate_min}, {"turn_rate_max_degps", t.turn_rate_max},
          {"train_max_time_s", t.train_max_time}, {"eval_max_time_s", t.eval_max_time},
          {"reward_k", t.reward_k}};
}

inline TaskSettings task_from_json(const json& j, TaskSettings t = {}) {
  const std::string c = "task";
  cfg::check_keys(j, {"step_len_m", "square_side_m", "turn_rate_min_degps", "turn_rate_max_degps",
                      "train_max_time_s", "eval_max_time_s", "reward_k"},
                  c);
  cfg::read(j, "step_len_m", t.step_len, c);
  cfg::read(j, "square_side_m", t.square_side, c);
  cfg::read(j, "turn_rate_min_degps", t.turn_rate_min, c);
  cfg::read(j, "turn_rate_max_degps", t.turn_rate_max, c);
  cfg::read(j, "train_max_time_s", t.train_max_time, c);
  cfg::read(j, "eval_max_time_s", t.eval_max_time, c);
  cfg::read(j, "reward_k", t.reward_k, c);
  return t;
}

// ---------------------------------------------------------------- scenario

struct TrackSettings {
  double duration = 10.0;   // s per run
  double step_time = 2.0;   // s, reference step instant in the step run
  double step_size = 0.05;  // m
  double settle = 3.0;      // s discarded before computing steady-state statistics
};

struct SweepSettings {
  int axis = 0;
  double push_time = 2.013;  // s, inside a single-support phase
  double episode = 5.0;      // s
  int trials = 10;
  double dv_hi = 2.0;        // m/s, upper end of the bisection bracket
  int iterations = 14;
  bool emergency = false;
  std::vector<ModelVariant> variants{ModelVariant::Lipm, ModelVariant::LipmVertical, ModelVariant::TwoMass};
};

struct EvalSettings {
  int episodes = 100;
  std::string policy;  // weights JSON path, relative to the config file
  bool compare_untrained = true;
};

struct Scenario {
  std::string kind;
  std::uint64_t seed = 1;
  int workers = 1;
  double duration = 70.0;
  EngineConfig engine;
  PlantConfig plant;
  CommandSchedule schedule = omnidirectional_schedule();
  TrackSettings track;
  SweepSettings sweep;
  GaConfig ga;
  Genome ga_seed = slow_walk_genome();
  double ga_episode = 10.0;
  PpoConfig ppo;
  long total_timesteps = 2'000'000;
  TaskSettings task;
  EvalSettings eval;
  std::filesystem::path base_dir;  // directory of the config file
};

inline const std::vector<std::string>& scenario_kinds() {
  static const std::vector<std::string> k{"track", "walk", "optimize-ga", "train-ppo", "eval", "push-sweep"};
  return k;
}

inline json to_json(const Scenario& s) {
  json j;
  j["kind"] = s.kind;
  j["version"] = kVersion;
  j["seed"] = s.seed;
  j["workers"] = s.workers;
  j["duration_s"] = s.duration;
  j["model"] = to_json(s.engine.nominal);
  j["gait"] = to_json(s.engine.gait);
  j["engine"] = to_json(s.engine);
  j["plant"] = to_json(s.plant);
  j["schedule"] = to_json(s.schedule);
  j["track"] = {{"duration_s", s.track.duration},
                {"step_time_s", s.track.step_time},
                {"step_size_m", s.track.step_size},
                {"settle_s", s.track.settle}};
  json vars = json::array();
  for (auto v : s.sweep.variants) vars.push_back(std::string(to_string(v)));
  j["push_sweep"] = {{"axis", s.sweep.axis},
                     {"push_time_s", s.sweep.push_time},
                     {"episode_s", s.sweep.episode},
                     {"trials", s.sweep.trials},
                     {"dv_hi_mps", s.sweep.dv_hi},
                     {"iterations", s.sweep.iterations},
                     {"emergency", s.sweep.emergency},
                     {"variants", vars}};
  j["ga"] = to_json(s.ga);
  j["ga_seed_genome"] = genome_to_json(s.ga_seed);
  j["ga_episode_s"] = s.ga_episode;
  j["ppo"] = to_json(s.ppo);
  j["total_timesteps"] = s.total_timesteps;
  j["task"] = to_json(s.task);
  j["eval"] = {{"episodes", s.eval.episodes},
               {"policy", s.eval.policy},
               {"compare_untrained", s.eval.compare_untrained}};
  return j;
}

inline Scenario scenario_from_json(const json& j, Scenario s = {}) {
  const std::string c = "scenario";
  cfg::check_keys(j, {"kind", "version", "seed", "workers", "duration_s", "model", "gait", "engine", "plant",
                      "schedule", "track", "push_sweep", "ga", "ga_seed_genome", "ga_episode_s", "ppo",
                      "total_timesteps", "task", "eval"},
                  c);
  cfg::read(j, "kind", s.kind, c);
  cfg::read(j, "seed", s.seed, c);
  cfg::read(j, "workers", s.workers, c);
  cfg::read(j, "duration_s", s.duration, c);
  if (j.contains("engine")) s.engine = engine_from_json(j.at("engine"), s.engine);
  if (j.contains("model")) s.engine.nominal = model_from_json(j.at("model"), s.engine.nominal);
  if (j.contains("gait")) s.engine.gait = gait_from_json(j.at("gait"), s.engine.gait);
  if (j.contains("plant")) s.plant = plant_from_json(j.at("plant"), s.plant);
  if (j.contains("schedule")) s.schedule = schedule_from_json(j.at("schedule"));
  if (j.contains("track")) {
    const auto& k = j.at("track");
    cfg::check_keys(k, {"duration_s", "step_time_s", "step_size_m", "settle_s"}, "track");
    cfg::read(k, "duration_s", s.track.duration, "track");
    cfg::read(k, "step_time_s", s.track.step_time, "track");
    cfg::read(k, "step_size_m", s.track.step_size, "track");
    cfg::read(k, "settle_s", s.track.settle, "track");
  }
  if (j.contains("push_sweep")) {
    const auto& k = j.at("push_sweep");
    const std::string kc = "push_sweep";
    cfg::check_keys(k, {"axis", "push_time_s", "episode_s", "trials", "dv_hi_mps", "iterations", "emergency",
                        "variants"},
                    kc);
    cfg::read(k, "axis", s.sweep.axis, kc);
    cfg::read(k, "push_time_s", s.sweep.push_time, kc);
    cfg::read(k, "episode_s", s.sweep.episode, kc);
    cfg::read(k, "trials", s.sweep.trials, kc);
    cfg::read(k, "dv_hi_mps", s.sweep.dv_hi, kc);
    cfg::read(k, "iterations", s.sweep.iterations, kc);
    cfg::read(k, "emergency", s.sweep.emergency, kc);
    if (k.contains("variants")) {
      std::vector<std::string> names;
      cfg::read(k, "variants", names, kc);
      s.sweep.variants.clear();
      for (const auto& n : names) s.sweep.variants.push_back(cfg::variant_from(n));
    }
  }
  if (j.contains("ga")) s.ga = ga_from_json(j.at("ga"), s.ga);
  if (j.contains("ga_seed_genome")) s.ga_seed = genome_from_json(j.at("ga_seed_genome"), s.ga_seed);
  cfg::read(j, "ga_episode_s", s.ga_episode, c);
  if (j.contains("ppo")) s.ppo = ppo_from_json(j.at("ppo"), s.ppo);
  cfg::read(j, "total_timesteps", s.total_timesteps, c);
  if (j.contains("task")) s.task = task_from_json(j.at("task"), s.task);
  if (j.contains("eval")) {
    const auto& k = j.at("eval");
    cfg::check_keys(k, {"episodes", "policy", "compare_untrained"}, "eval");
    cfg::read(k, "episodes", s.eval.episodes, "eval");
    cfg::read(k, "policy", s.eval.policy, "eval");
    cfg::read(k, "compare_untrained", s.eval.compare_untrained, "eval");
  }
  s.plant.dt = s.engine.dt;
  return s;
}

/// Parses a scenario file. Syntax errors carry the parser's line/column.
inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config-invalid", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("config-invalid", path.string() + ": " + e.what());
  }
  Scenario s = scenario_from_json(j);
  s.base_dir = path.parent_path();
  return s;
}

inline ResidualTask residual_task(const Scenario& s, bool eval) {
  ResidualTask t;
  t.engine = s.engine;
  t.plant = s.plant;
  t.step_len = s.task.step_len;
  t.square_side = s.task.square_side;
  t.turn_rate_min = s.task.turn_rate_min;
  t.turn_rate_max = s.task.turn_rate_max;
  t.max_time = eval ? s.task.eval_max_time : s.task.train_max_time;
  t.reward_k = s.task.reward_k;
  return t;
}

// ---------------------------------------------------------------- tracking

struct TrackRun {
  double rms_error = 0.0;        // steady-state x_c error
  double estimator_error_var = 0.0;
  double meas_var = 0.0;
  double max_abs_error = 0.0;
};

/// Single-axis LQG loop on the matched nominal model: noisy full-state
/// measurement, Kalman filter, LQR with integrators. The reference holds
/// x_c at 0 and, when step_time < duration, jumps by step_size.
inline TrackRun run_tracking(const EngineConfig& ec, double noise_var, const TrackSettings& ts, bool step,
                             std::uint64_t seed, std::ostream* csv = nullptr) {
  const DiscreteSS model = discretize_model(ec.nominal, ec.dt);
  const auto aug = augment_integrator(model, ec.tracked);
  const LqrGain gain = solve_dare(aug, ec.weights);
  Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double sd = std::sqrt(noise_var);

  PendulumState x;
  EstimatorState est;
  est.x_hat = x.vec();
  est.P = ec.kalman.P0;
  Eigen::VectorXd xi = Eigen::VectorXd::Zero(static_cast<long>(ec.tracked.size()));
  ControlInput u;
  bool first = true;
  const long ticks = std::lround(ts.duration / ec.dt);
  double se = 0, ee = 0, em = 0, me = 0;
  long cnt = 0;
  if (csv) *csv << "t,ref,x_c,xhat_c,y_c,zmp,thetadd\n";
  for (long k = 0; k < ticks; ++k) {
    const double t = k * ec.dt;
    const double ref = step && t >= ts.step_time ? ts.step_size : 0.0;
    Vec4 y = x.vec();
    for (int i = 0; i < 4; ++i) y[i] += sd * n01(rng);
    if (!first) est = kalman_predict(est, model, u, ec.kalman);
    est = kalman_update(est, y, model, ec.kalman);
    first = false;
    const Vec4 xr(ref, 0, 0, 0);
    const Eigen::VectorXd du = lqg_law(est.x_hat, xr, xi, gain);
    u = {ref + du[0], du[1]};
    for (std::size_t j = 0; j < ec.tracked.size(); ++j) {
      const int s = ec.tracked[j];
      xi[static_cast<long>(j)] += ec.dt * (est.x_hat[s] - xr[s]);
    }
    if (csv) *csv << t << ',' << ref << ',' << x.x << ',' << est.x_hat[0] << ',' << y[0] << ',' << u.zmp << ',' << u.torso_accel << '\n';
    const double since = step ? t - ts.step_time : t;
    if (since >= ts.settle || (!step && t >= ts.settle)) {
      const double e = x.x - ref;
      se += e * e;
      const double d = est.x_hat[0] - x.x;
      ee += d;
      em += d * d;
      const double v = y[0] - x.x;
      me += v * v;
      ++cnt;
    }
    x = step_discrete(model, x, u);
  }
  TrackRun r;
  if (cnt > 0) {
    r.rms_error = std::sqrt(se / cnt);
    const double mean = ee / cnt;
    r.estimator_error_var = em / cnt - mean * mean;
    r.meas_var = me / cnt;
  }
  return r;
}

// ---------------------------------------------------------------- push sweep

inline bool survives_push(EngineConfig ec, PlantConfig pc, const SweepSettings& ss, double dv, std::uint64_t seed) {
  ec.emergency.enabled = ss.emergency;
  pc.pushes.push_back({ss.push_time, ss.axis, dv});
  const auto r = run_episode(ec, pc, CommandSchedule::constant({0, 0, 0, true}), {}, {ss.episode, false}, seed);
  return !r.fell;
}

/// Largest push (m/s) survived, by bisection; 0 when the unpushed run falls.
inline double max_recoverable_push(const EngineConfig& ec, const PlantConfig& pc, const SweepSettings& ss,
                                   std::uint64_t seed) {
  if (!survives_push(ec, pc, ss, 0.0, seed)) return 0.0;
  double lo = 0.0, hi = ss.dv_hi;
  for (int i = 0; i < ss.iterations; ++i) {
    const double m = 0.5 * (lo + hi);
    if (survives_push(ec, pc, ss, m, seed)) {
      lo = m;
    } else {
      hi = m;
    }
  }
  return lo;
}

struct SweepResult {
  std::vector<ModelVariant> variants;
  std::vector<std::vector<double>> per_trial;  // [variant][trial]
  std::vector<double> mean;
};

/// Trials share seeds across variants, so each variant meets the same
/// mismatch draw and noise stream.
inline SweepResult push_sweep(const EngineConfig& base, const PlantConfig& pc, const SweepSettings& ss,
                              std::uint64_t seed, int workers = 1) {
  SweepResult r;
  r.variants = ss.variants;
  const std::size_t nv = ss.variants.size();
  r.per_trial.assign(nv, std::vector<double>(static_cast<std::size_t>(ss.trials), 0.0));
  const std::size_t jobs = nv * static_cast<std::size_t>(ss.trials);
  auto job = [&](std::size_t w) {
    for (std::size_t i = w; i < jobs; i += static_cast<std::size_t>(workers)) {
      const std::size_t v = i / static_cast<std::size_t>(ss.trials);
      const std::size_t t = i % static_cast<std::size_t>(ss.trials);
      EngineConfig ec = base;
      ec.variant = ss.variants[v];
      r.per_trial[v][t] = max_recoverable_push(ec, pc, ss, derive_seed(seed, t));
    }
  };
  if (workers <= 1) {
    job(0);
  } else {
    std::vector<std::thread> th;
    for (int w = 0; w < workers; ++w) th.emplace_back(job, static_cast<std::size_t>(w));
    for (auto& t : th) t.join();
  }
  for (const auto& v : r.per_trial) {
    r.mean.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
  }
  return r;
}

// ---------------------------------------------------------------- policy io

inline json policy_to_json(const PolicyNet& net, const RunningNorm& norm) {
  return {{"obs_dim", net.obs_dim()},
          {"act_dim", net.act_dim()},
          {"hidden", net.pi.hidden},
          {"theta", std::vector<double>(net.theta.data(), net.theta.data() + net.theta.size())},
          {"obs_mean", std::vector<double>(norm.mean.data(), norm.mean.data() + norm.mean.size())},
          {"obs_var", std::vector<double>(norm.var.data(), norm.var.data() + norm.var.size())},
          {"obs_count", norm.count},
          {"obs_clip", norm.clip}};
}

inline std::pair<PolicyNet, RunningNorm> policy_from_json(const json& j) {
  try {
    PolicyNet net(j.at("obs_dim").get<int>(), j.at("act_dim").get<int>(), j.at("hidden").get<int>());
    const auto theta = j.at("theta").get<std::vector<double>>();
    if (static_cast<int>(theta.size()) != net.size()) throw Error("config-invalid", "policy: weight count mismatch");
    net.theta = Eigen::VectorXd::Map(theta.data(), static_cast<long>(theta.size()));
    RunningNorm norm(net.obs_dim());
    const auto m = j.at("obs_mean").get<std::vector<double>>();
    const auto v = j.at("obs_var").get<std::vector<double>>();
    if (static_cast<int>(m.size()) != net.obs_dim() || v.size() != m.size()) {
      throw Error("config-invalid", "policy: normalizer size mismatch");
    }
    norm.mean = Eigen::VectorXd::Map(m.data(), static_cast<long>(m.size()));
    norm.var = Eigen::VectorXd::Map(v.data(), static_cast<long>(v.size()));
    norm.count = j.at("obs_count").get<double>();
    norm.clip = j.at("obs_clip").get<double>();
    return {net, norm};
  } catch (const json::exception& e) {
    throw Error("config-invalid", std::string("policy: ") + e.what());
  }
}

// ---------------------------------------------------------------- walk summary

struct WalkReport {
  EpisodeResult result;
  double max_command_step = 0.0;   // largest per-tick change of a filtered command channel
  double command_step_bound = 0.0; // dt/tau times the largest raw jump
  double max_hip_ref_step = 0.0;   // m per tick
};

inline WalkReport run_walk(const Scenario& s, std::ostream* trace_csv = nullptr) {
  WalkReport w;
  w.result = run_episode(s.engine, s.plant, s.schedule, {}, {s.duration, true}, s.seed);
  double raw_jump = 0.0;
  WalkCommand prev_raw{0, 0, 0, true};
  for (const auto& e : s.schedule.entries()) {
    raw_jump = std::max({raw_jump, std::abs(e.command.X - prev_raw.X), std::abs(e.command.Y - prev_raw.Y),
                         std::abs(e.command.alpha - prev_raw.alpha)});
    prev_raw = e.command;
  }
  w.command_step_bound = s.engine.dt / s.engine.command_tau * raw_jump;
  const TraceRecord* prev = nullptr;
  if (trace_csv) write_trace_csv_header(*trace_csv);
  for (const auto& t : w.result.trace) {
    if (trace_csv) write_trace_csv_row(*trace_csv, t);
    if (prev) {
      const auto& a = prev->tick.command;
      const auto& b = t.tick.command;
      w.max_command_step = std::max({w.max_command_step, std::abs(b.X - a.X), std::abs(b.Y - a.Y),
                                     std::abs(b.alpha - a.alpha)});
      w.max_hip_ref_step = std::max(w.max_hip_ref_step,
                                    std::hypot(t.tick.x_ref[0][0] - prev->tick.x_ref[0][0],
                                               t.tick.x_ref[1][0] - prev->tick.x_ref[1][0]));
    }
    prev = &t;
  }
  return w;
}

}  // namespace biped
