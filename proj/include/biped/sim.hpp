#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "biped/dynamics.hpp"
#include "biped/error.hpp"
#include "biped/estimation.hpp"
#include "biped/walk_engine.hpp"

namespace biped {

using Rng = std::mt19937_64;

/// Derives an independent stream seed for episode `index` (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct Push {
  double t = 0.0;   // s
  int axis = 0;     // 0 = x, 1 = y
  double dv = 0.0;  // velocity impulse, m/s
};

/// Pushes drawn per episode: one every `interval` s (+/- jitter) with a
/// uniformly random direction and magnitude.
struct RandomPushes {
  double interval = 0.0;  // 0 disables
  double jitter = 0.0;
  double dv_min = 0.0;
  double dv_max = 0.0;
  double first = 0.0;     // earliest push time
};

struct PlantConfig {
  ModelParams true_params;
  // Multiplicative factors on (m_to, l, z_c). z_to follows z_c.
  std::array<double, 3> mismatch{1.0, 1.0, 1.0};
  double mismatch_range = 0.0;  // factors drawn from U(1-r, 1+r) per episode when > 0
  double meas_noise_var = 6.25e-4;
  double dt = 0.02;
  std::vector<Push> pushes;
  RandomPushes random_pushes;
  double fall_margin = 0.1;   // m outside the support polygon
  double theta_limit = kLinearizationBound;

  void validate() const {
    true_params.validate();
    if (!(dt > 0) || !(meas_noise_var >= 0) || !(mismatch_range >= 0 && mismatch_range < 1)) {
      throw Error("invalid-params", "plant configuration out of range");
    }
    for (double f : mismatch) {
      if (!(f > 0)) throw Error("invalid-params", "mismatch factors must be positive");
    }
  }
};

/// Applies (m_to, l, z_c) factors to a parameter set.
inline ModelParams apply_mismatch(ModelParams p, const std::array<double, 3>& f) {
  p.m_to *= f[0];
  p.l *= f[1];
  p.z_c *= f[2];
  p.z_to *= f[2];
  return p;
}

struct PlantState {
  std::array<PendulumState, 2> axes{};
  bool operator==(const PlantState&) const = default;
};

using Measurement = std::array<Vec4, 2>;

/// One exact ZOH step of both axes followed by a noisy full-state measurement.
inline std::pair<PlantState, Measurement> plant_step(const PlantState& s,
                                                     const std::array<ControlInput, 2>& u,
                                                     const DiscreteSS& model,
                                                     double meas_noise_var, Rng& rng) {
  PlantState out;
  Measurement y;
  std::normal_distribution<double> noise(0.0, std::sqrt(meas_noise_var));
  for (int a = 0; a < 2; ++a) {
    if (!s.axes[a].finite()) throw Error("plant-diverged", "non-finite plant state");
    out.axes[a] = step_discrete(model, s.axes[a], u[a]);
    if (!out.axes[a].finite()) throw Error("plant-diverged", "non-finite plant state");
  }
  for (int a = 0; a < 2; ++a) {
    y[a] = out.axes[a].vec();
    if (meas_noise_var > 0) {
      for (int i = 0; i < 4; ++i) y[a][i] += noise(rng);
    }
  }
  return {out, y};
}

/// Fall when the COM is further than the margin outside the support polygon
/// or the torso reaches the angle bound (closed boundary).
inline bool check_fall(const PlantState& s, const SupportPolygon& support, const PlantConfig& cfg) {
  for (const auto& ax : s.axes) {
    if (!ax.finite()) return true;
    if (std::abs(ax.theta) >= cfg.theta_limit) return true;
  }
  const Vec2 com(s.axes[0].x, s.axes[1].x);
  return support.signed_distance(com) > cfg.fall_margin;
}

inline bool check_fall(const PlantState& s, const Footstep& support, const PlantConfig& cfg,
                       const FootGeometry& foot = {}) {
  return check_fall(s, SupportPolygon::of_feet({support}, foot), cfg);
}

/// Piecewise-constant command schedule; entry i applies from its time on.
struct ScheduleEntry {
  double t = 0.0;
  WalkCommand command;
};

class CommandSchedule {
 public:
  CommandSchedule() = default;
  explicit CommandSchedule(std::vector<ScheduleEntry> e) : entries_(std::move(e)) {
    std::stable_sort(entries_.begin(), entries_.end(),
                     [](const ScheduleEntry& a, const ScheduleEntry& b) { return a.t < b.t; });
  }
  static CommandSchedule constant(const WalkCommand& c) { return CommandSchedule({{0.0, c}}); }

  WalkCommand at(double t) const {
    WalkCommand c{0.0, 0.0, 0.0, true};
    for (const auto& e : entries_) {
      if (e.t <= t + 1e-9) c = e.command;
    }
    return c;
  }
  const std::vector<ScheduleEntry>& entries() const { return entries_; }

 private:
  std::vector<ScheduleEntry> entries_;
};

struct TraceRecord {
  EngineTick tick;
  WalkCommand raw_command;
  PlantState state;  // at tick time, before the plant step
  std::array<Vec4, 2> estimate{Vec4::Zero(), Vec4::Zero()};
};

struct EpisodeResult {
  double duration = 0.0;
  bool fell = false;
  std::string reason;
  Vec2 displacement = Vec2::Zero();
  double mean_speed = 0.0;
  long steps = 0;
  std::vector<TraceRecord> trace;
  std::vector<std::pair<double, PhaseKind>> phase_timeline;
};

/// One engine + plant + estimator instance. Loop order per tick:
/// measure -> estimate -> engine tick -> plant step.
class Episode {
 public:
  Episode(const EngineConfig& engine_cfg, const PlantConfig& plant_cfg, std::uint64_t seed)
      : engine_(engine_cfg), pcfg_(plant_cfg), rng_(seed) {
    pcfg_.validate();
    if (std::abs(pcfg_.dt - engine_cfg.dt) > 1e-12) {
      throw Error("invalid-params", "plant and engine time steps differ");
    }
    factors_ = pcfg_.mismatch;
    if (pcfg_.mismatch_range > 0) {
      std::uniform_real_distribution<double> u(1.0 - pcfg_.mismatch_range, 1.0 + pcfg_.mismatch_range);
      for (auto& f : factors_) f *= u(rng_);
    }
    pushes_ = pcfg_.pushes;
    draw_random_pushes();
    std::stable_sort(pushes_.begin(), pushes_.end(),
                     [](const Push& a, const Push& b) { return a.t < b.t; });
    const Vec2 c = engine_.stance_center();
    state_.axes[0].x = c.x();
    state_.axes[1].x = c.y();
    start_ = c;
    for (int a = 0; a < 2; ++a) {
      est_[a].x_hat = state_.axes[a].vec();
      est_[a].P = engine_cfg.kalman.P0;
    }
    measure_initial();
  }

  struct StepOut {
    EngineTick tick;
    bool fell = false;
    std::string reason;
  };

  StepOut step(const WalkCommand& command, const std::optional<Residual>& residual = std::nullopt) {
    StepOut out;
    out.tick = engine_.tick(command, est_, residual);
    const DiscreteSS& model = engine_.step_model();
    const double t_end = out.tick.t + pcfg_.dt;
    try {
      auto [next, y] = plant_step(state_, out.tick.u, plant_model(out.tick.step_com_height),
                                  pcfg_.meas_noise_var, rng_);
      while (push_cursor_ < pushes_.size() && push_tick(pushes_[push_cursor_]) < ticks_) ++push_cursor_;
      for (std::size_t i = push_cursor_; i < pushes_.size() && push_tick(pushes_[i]) == ticks_; ++i) {
        next.axes[pushes_[i].axis].xd += pushes_[i].dv;
      }
      state_ = next;
      y_ = y;
    } catch (const Error& e) {
      out.fell = true;
      out.reason = e.code();
    }
    ++ticks_;
    time_ = t_end;
    if (!out.fell) {
      // Estimate for the next tick from the measurement just taken.
      const KalmanConfig& kc = engine_.config().kalman;
      for (int a = 0; a < 2; ++a) {
        est_[a] = kalman_update(kalman_predict(est_[a], model, engine_.last_input()[a], kc), y_[a], model, kc);
      }
      if (check_fall(state_, out.tick.support_polygon, pcfg_)) {
        out.fell = true;
        out.reason = fall_reason(out.tick.support_polygon);
      }
    }
    return out;
  }

  const WalkEngine& engine() const { return engine_; }
  const PlantState& state() const { return state_; }
  const std::array<EstimatorState, 2>& estimate() const { return est_; }
  const PlantConfig& plant_config() const { return pcfg_; }
  const std::array<double, 3>& mismatch_factors() const { return factors_; }
  const std::vector<Push>& pushes() const { return pushes_; }
  double time() const { return time_; }
  Vec2 start() const { return start_; }
  Vec2 com() const { return {state_.axes[0].x, state_.axes[1].x}; }
  Rng& rng() { return rng_; }

 private:
  void measure_initial() {
    std::normal_distribution<double> noise(0.0, std::sqrt(pcfg_.meas_noise_var));
    for (int a = 0; a < 2; ++a) {
      y_[a] = state_.axes[a].vec();
      if (pcfg_.meas_noise_var > 0) {
        for (int i = 0; i < 4; ++i) y_[a][i] += noise(rng_);
      }
      est_[a] = kalman_update(est_[a], y_[a], engine_.step_model(), engine_.config().kalman);
    }
  }

  long push_tick(const Push& p) const { return static_cast<long>(std::floor(p.t / pcfg_.dt + 1e-9)); }

  void draw_random_pushes() {
    const auto& rp = pcfg_.random_pushes;
    if (!(rp.interval > 0)) return;
    // A fixed horizon keeps the draw count independent of episode length.
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double t = rp.first;
    while (t < 3600.0 && pushes_.size() < 4096) {
      t += rp.interval + rp.jitter * (2 * unit(rng_) - 1);
      const double ang = 2 * std::numbers::pi * unit(rng_);
      const double mag = rp.dv_min + (rp.dv_max - rp.dv_min) * unit(rng_);
      pushes_.push_back({t, 0, mag * std::cos(ang)});
      pushes_.push_back({t, 1, mag * std::sin(ang)});
    }
  }

  const DiscreteSS& plant_model(double z_step) {
    auto it = models_.find(z_step);
    if (it == models_.end()) {
      if (models_.size() > 256) models_.clear();
      ModelParams p = pcfg_.true_params;
      p.z_c = z_step;
      p.z_to = z_step + (pcfg_.true_params.z_to - pcfg_.true_params.z_c);
      it = models_.emplace(z_step, discretize_model(apply_mismatch(p, factors_), pcfg_.dt)).first;
    }
    return it->second;
  }

  std::string fall_reason(const SupportPolygon& support) const {
    for (const auto& ax : state_.axes) {
      if (std::abs(ax.theta) >= pcfg_.theta_limit) return "torso-limit";
    }
    (void)support;
    return "com-outside-support";
  }

  WalkEngine engine_;
  PlantConfig pcfg_;
  Rng rng_;
  std::array<double, 3> factors_{1.0, 1.0, 1.0};
  std::vector<Push> pushes_;
  std::map<double, DiscreteSS> models_;
  PlantState state_;
  Vec2 start_ = Vec2::Zero();
  std::array<EstimatorState, 2> est_;
  Measurement y_{Vec4::Zero(), Vec4::Zero()};
  std::size_t push_cursor_ = 0;
  double time_ = 0.0;
  long ticks_ = 0;
};

/// Residual source consulted every tick; may return nothing.
using ResidualPolicy = std::function<std::optional<Residual>(const Episode&)>;

struct EpisodeOptions {
  double max_time = 10.0;
  bool keep_trace = false;
};

inline EpisodeResult run_episode(const EngineConfig& engine_cfg, const PlantConfig& plant_cfg,
                                 const CommandSchedule& schedule, const ResidualPolicy& policy,
                                 const EpisodeOptions& opt, std::uint64_t seed) {
  EpisodeResult r;
  Episode ep(engine_cfg, plant_cfg, seed);
  const long ticks = std::lround(opt.max_time / plant_cfg.dt);
  std::optional<PhaseKind> last_phase;
  for (long k = 0; k < ticks; ++k) {
    const WalkCommand cmd = schedule.at(ep.time());
    std::optional<Residual> res;
    if (policy) res = policy(ep);
    const PlantState before = ep.state();
    const auto est = ep.estimate();
    const auto s = ep.step(cmd, res);
    if (!last_phase || *last_phase != s.tick.phase.kind) {
      r.phase_timeline.emplace_back(s.tick.t, s.tick.phase.kind);
      last_phase = s.tick.phase.kind;
    }
    if (opt.keep_trace) {
      r.trace.push_back({s.tick, cmd, before, {est[0].x_hat, est[1].x_hat}});
    }
    if (s.fell) {
      r.fell = true;
      r.reason = s.reason;
      break;
    }
  }
  r.duration = ep.time();
  r.displacement = ep.com() - ep.start();
  r.mean_speed = r.duration > 0 ? r.displacement.norm() / r.duration : 0.0;
  r.steps = ep.engine().steps_taken();
  return r;
}

inline void write_trace_csv_header(std::ostream& os) {
  os << "t,phase,cmd_x,cmd_y,cmd_alpha,filt_x,filt_y,filt_alpha,"
        "r_zmp_x,r_zmp_y,hip_ref_x,hip_ref_y,swing_x,swing_y,swing_z,z_com,theta_ref,"
        "zmp_x,zmp_y,thetadd_x,thetadd_y,res_dz,res_thetadd_x,res_thetadd_y,emergency,"
        "x_c,y_c,theta_x,theta_y,xhat_c,yhat_c\n";
}

inline void write_trace_csv_row(std::ostream& os, const TraceRecord& r) {
  const auto& k = r.tick;
  const auto& f = k.references;
  os << k.t << ',' << to_string(k.phase.kind) << ',' << r.raw_command.X << ','
     << r.raw_command.Y << ',' << r.raw_command.alpha << ',' << k.command.X << ','
     << k.command.Y << ',' << k.command.alpha << ',' << f.r_zmp.x() << ',' << f.r_zmp.y() << ','
     << f.hip[0].pos << ',' << f.hip[1].pos << ',' << f.swing_foot.x() << ','
     << f.swing_foot.y() << ',' << f.swing_foot.z() << ',' << f.z_com << ',' << f.theta_to_ref
     << ',' << k.u[0].zmp << ',' << k.u[1].zmp << ',' << k.u[0].torso_accel << ','
     << k.u[1].torso_accel << ',' << k.residual.dz_com << ',' << k.residual.dthetadd[0] << ','
     << k.residual.dthetadd[1] << ',' << (k.emergency ? 1 : 0) << ',' << r.state.axes[0].x
     << ',' << r.state.axes[1].x << ',' << r.state.axes[0].theta << ',' << r.state.axes[1].theta
     << ',' << r.estimate[0][0] << ',' << r.estimate[1][0] << '\n';
}

}  // namespace biped
