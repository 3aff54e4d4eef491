#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string_view>

#include "biped/control.hpp"
#include "biped/dynamics.hpp"
#include "biped/error.hpp"
#include "biped/estimation.hpp"
#include "biped/planning.hpp"

namespace biped {

enum class PhaseKind { Idle, Initialize, SingleSupport, DoubleSupport };

inline std::string_view to_string(PhaseKind k) {
  switch (k) {
    case PhaseKind::Idle: return "idle";
    case PhaseKind::Initialize: return "initialize";
    case PhaseKind::SingleSupport: return "single_support";
    case PhaseKind::DoubleSupport: return "double_support";
  }
  return "?";
}

struct WalkPhase {
  PhaseKind kind = PhaseKind::Idle;
  double timer = 0.0;  // seconds spent in the current phase
};

/// Operator command: step length X (m), width Y (m) and angle alpha (deg per
/// step). The engine keeps a lag-filtered copy.
struct WalkCommand {
  double X = 0.0;
  double Y = 0.0;
  double alpha = 0.0;
  bool walk = true;
  bool operator==(const WalkCommand&) const = default;
};

/// Which dynamics model the planner and controller are built on.
enum class ModelVariant { Lipm, LipmVertical, TwoMass };

inline std::string_view to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::Lipm: return "lipm";
    case ModelVariant::LipmVertical: return "lipm_vertical";
    case ModelVariant::TwoMass: return "two_mass";
  }
  return "?";
}

struct EmergencyMargins {
  double zmp_shrink = 0.2;          // fraction the support polygon is shrunk by
  double tracking_error = 0.05;     // m, hip error norm
  double min_step_fraction = 0.5;   // earliest termination, fraction of T_ss
  int zmp_persist_ticks = 8;        // consecutive ticks outside the shrunk polygon
  double max_capture_shift = 0.08;  // m, landing correction toward the capture point
  bool enabled = true;
};

struct ResidualBounds {
  double dz_max = 0.03;          // m
  double dthetadd_max = 20.0;    // rad/s^2
};

/// Learned correction added on top of the analytical controller.
struct Residual {
  double dz_com = 0.0;
  std::array<double, 2> dthetadd{0.0, 0.0};
};

struct EngineConfig {
  ModelParams nominal;
  GaitParams gait;
  ModelVariant variant = ModelVariant::TwoMass;
  LqrWeights weights = default_weights();
  std::vector<int> tracked{0, 2};
  StepConstraints constraints;
  FootGeometry foot;
  KalmanConfig kalman;
  double dt = 0.02;
  double init_duration = 1.0;
  double init_shift_fraction = 0.3;
  double command_tau = 0.5;
  double integral_limit = 0.05;
  double max_torso_accel = 60.0;
  double torso_safe_angle = 0.3;  // rad, the torso must be able to stop inside this
  bool torso_saturation_compensation = false;
  EmergencyMargins emergency;
  ResidualBounds residual;
};

/// Raw command clamped to the step constraints, then lag filtered per channel.
inline WalkCommand command_filter(const WalkCommand& filtered, const WalkCommand& raw,
                                  double dt, double tau, const StepConstraints& c) {
  const double amax = c.sigma_max / kDegToRad;
  WalkCommand out = raw;
  out.X = lag_filter(filtered.X, std::clamp(raw.X, -c.R_max, c.R_max), dt, tau);
  out.Y = lag_filter(filtered.Y, std::clamp(raw.Y, -c.lateral_max, c.lateral_max), dt, tau);
  out.alpha = lag_filter(filtered.alpha, std::clamp(raw.alpha, -amax, amax), dt, tau);
  return out;
}

inline bool tracking_emergency(const std::array<double, 2>& hip_error, const EmergencyMargins& m) {
  return m.enabled && std::hypot(hip_error[0], hip_error[1]) > m.tracking_error;
}

inline bool zmp_emergency(const Vec2& zmp, const SupportPolygon& support, const EmergencyMargins& m) {
  return m.enabled && m.zmp_shrink < 1.0 && !support.shrunk(m.zmp_shrink).contains(zmp);
}

/// True when the hip error or the commanded ZMP leaves its margin.
inline bool emergency_check(const std::array<double, 2>& hip_error, const Vec2& zmp_command,
                            const SupportPolygon& support, const EmergencyMargins& m) {
  return tracking_emergency(hip_error, m) || zmp_emergency(zmp_command, support, m);
}

/// Torso acceleration closest to `desired` after which the torso can still be
/// stopped (braking at a_max) inside [-theta_safe, theta_safe].
inline double torso_viable_accel(double theta, double thetad, double desired, double dt,
                                 double a_max, double theta_safe) {
  auto stop_angle = [&](double acc) {
    const double w = thetad + acc * dt;
    return theta + thetad * dt + 0.5 * acc * dt * dt + w * std::abs(w) / (2.0 * a_max);
  };
  // stop_angle is increasing in acc; bisect for the admissible interval ends.
  auto solve = [&](double target) {
    double lo = -a_max, hi = a_max;
    if (stop_angle(lo) >= target) return lo;
    if (stop_angle(hi) <= target) return hi;
    for (int i = 0; i < 50; ++i) {
      const double mid = 0.5 * (lo + hi);
      (stop_angle(mid) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  };
  const double lo = solve(-theta_safe);
  const double hi = std::max(lo, solve(theta_safe));
  return std::clamp(std::clamp(desired, -a_max, a_max), lo, hi);
}

/// ZMP that makes the nominal model follow (x, xdd, theta, thetadd) exactly.
inline double consistent_zmp(double x, double xdd, double theta, double thetadd,
                             const ModelParams& p) {
  return x + p.torso_offset() * theta - (xdd + p.torso_accel_gain() * thetadd) / p.mu();
}

struct EngineTick {
  double t = 0.0;
  WalkPhase phase;
  WalkCommand command;           // filtered
  ReferenceFrame references;
  std::array<Vec4, 2> x_ref{Vec4::Zero(), Vec4::Zero()};
  std::array<ControlInput, 2> u{};          // applied (after saturation)
  std::array<ControlInput, 2> u_command{};  // before saturation
  Residual residual;                        // as applied, after clamping
  bool emergency = false;
  Footstep support;
  SupportPolygon support_polygon;
  double step_com_height = 0.3;  // COM height held during the current step
};

/// Orchestrates the planners and the LQG law through the
/// Idle -> Initialize -> {SS <-> DS} state machine. One instance per episode;
/// the instance is a plain value and may be copied.
class WalkEngine {
 public:
  explicit WalkEngine(EngineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.gait.validate();
    cfg_.nominal.validate();
    ctrl_params_ = cfg_.nominal;
    ctrl_params_.z_c = cfg_.gait.z_0;
    if (cfg_.variant != ModelVariant::TwoMass) ctrl_params_.m_to = 0.0;
    ss_ticks_ = std::max(1L, std::lround(cfg_.gait.T_ss / cfg_.dt));
    ds_ticks_ = std::max(0L, std::lround(cfg_.gait.T_ds / cfg_.dt));
    eff_gait_ = cfg_.gait;
    eff_gait_.T_ss = ss_ticks_ * cfg_.dt;
    eff_gait_.T_ds = ds_ticks_ * cfg_.dt;
    if (cfg_.variant == ModelVariant::Lipm) eff_gait_.A_z = 0.0;
    if (cfg_.variant != ModelVariant::TwoMass) {
      eff_gait_.TI_to = 0.0;
      eff_gait_.A_to = 0.0;
    }
    const auto model = discretize_model(ctrl_params_, cfg_.dt);
    gain_ = std::make_shared<const LqrGain>(
        solve_dare(augment_integrator(model, cfg_.tracked), cfg_.weights));
    step_z_ = cfg_.gait.z_0;
    step_model_ = model;
    integral_.fill(VectorXd::Zero(static_cast<Eigen::Index>(cfg_.tracked.size())));
    hip_end_ = {0.5 * (feet_.x_l + feet_.x_r), 0.5 * (feet_.y_l + feet_.y_r)};
  }

  const EngineConfig& config() const { return cfg_; }
  const WalkPhase& phase() const { return phase_; }
  const LqrGain& gain() const { return *gain_; }
  const ModelParams& controller_params() const { return ctrl_params_; }
  const FeetState& feet() const { return feet_; }
  double time() const { return t_; }
  long steps_taken() const { return step_index_; }
  double step_time() const { return eff_gait_.step_time(); }
  /// Nominal discrete model valid for the current step (COM height included).
  const DiscreteSS& step_model() const { return step_model_; }
  double step_com_height() const { return step_z_; }
  const std::array<ControlInput, 2>& last_input() const { return last_u_; }
  Footstep support() const { return support_; }
  double heading() const { return support_.yaw; }

  /// Initial hip position (COM between the feet).
  Vec2 stance_center() const { return {0.5 * (feet_.x_l + feet_.x_r), 0.5 * (feet_.y_l + feet_.y_r)}; }

  EngineTick tick(const WalkCommand& raw, const std::array<EstimatorState, 2>& est,
                  const std::optional<Residual>& residual = std::nullopt) {
    const double dt = cfg_.dt;
    filtered_ = command_filter(filtered_, raw, dt, cfg_.command_tau, cfg_.constraints);

    Residual applied;
    if (residual) {
      applied.dz_com = std::clamp(residual->dz_com, -cfg_.residual.dz_max, cfg_.residual.dz_max);
      for (int a = 0; a < 2; ++a) {
        applied.dthetadd[a] = std::clamp(residual->dthetadd[a], -cfg_.residual.dthetadd_max,
                                         cfg_.residual.dthetadd_max);
      }
      pending_dz_ = applied.dz_com;
    }

    advance_phase(est);

    EngineTick out;
    out.t = t_;
    out.phase = {phase_.kind, phase_ticks_ * dt};
    out.command = filtered_;
    out.residual = applied;

    std::array<Vec4, 2> x_ref;
    std::array<Vec2, 2> u_ref;
    compute_references(out.references, x_ref, u_ref);
    out.x_ref = x_ref;
    out.support = support_;
    out.support_polygon = support_polygon();
    out.step_com_height = step_z_;

    const LqrGain& g = *gain_;
    const auto n_int = static_cast<Eigen::Index>(cfg_.tracked.size());
    std::array<Vec4, 2> err;
    std::array<ControlInput, 2> u_cmd;
    for (int a = 0; a < 2; ++a) {
      err[a] = est[a].x_hat - x_ref[a];
      Eigen::VectorXd z(4 + n_int);
      z << err[a], integral_[a];
      const Vec2 u = u_ref[a] - g.K * z;
      u_cmd[a] = ControlInput::from(u);
      if (cfg_.variant != ModelVariant::TwoMass) u_cmd[a].torso_accel = 0.0;
      u_cmd[a].torso_accel += applied.dthetadd[a];
    }

    // Ankle saturation: the ZMP cannot leave the support polygon. The two-mass
    // controller recovers the lost COM acceleration with the torso.
    const Vec2 zmp_cmd(u_cmd[0].zmp, u_cmd[1].zmp);
    const Vec2 zmp_sat = out.support_polygon.closest_point(zmp_cmd);
    std::array<ControlInput, 2> u_app = u_cmd;
    for (int a = 0; a < 2; ++a) {
      u_app[a].zmp = zmp_sat[a];
      if (cfg_.variant == ModelVariant::TwoMass && cfg_.torso_saturation_compensation) {
        const double d = ctrl_params_.torso_accel_gain();
        const double mu = step_mu_;
        if (d > 0) u_app[a].torso_accel += mu * (zmp_cmd[a] - zmp_sat[a]) / d;
      }
      if (cfg_.variant == ModelVariant::TwoMass) {
        u_app[a].torso_accel =
            torso_viable_accel(est[a].x_hat[2], est[a].x_hat[3], u_app[a].torso_accel, dt,
                               cfg_.max_torso_accel, cfg_.torso_safe_angle);
      } else {
        u_app[a].torso_accel =
            std::clamp(u_app[a].torso_accel, -cfg_.max_torso_accel, cfg_.max_torso_accel);
      }
    }
    out.u_command = u_cmd;
    out.u = u_app;
    last_u_ = u_app;

    const bool stepping = phase_.kind == PhaseKind::SingleSupport;
    zmp_out_ticks_ = stepping && zmp_emergency(zmp_cmd, out.support_polygon, cfg_.emergency)
                         ? zmp_out_ticks_ + 1
                         : 0;
    out.emergency = stepping && (tracking_emergency({err[0][0], err[1][0]}, cfg_.emergency) ||
                                 zmp_out_ticks_ >= cfg_.emergency.zmp_persist_ticks);
    emergency_pending_ = out.emergency;
    if (out.emergency) {
      const double w = std::sqrt(step_mu_);
      for (int a = 0; a < 2; ++a) {
        capture_shift_[a] = (est[a].x_hat[0] + est[a].x_hat[1] / w) - (x_ref[a][0] + x_ref[a][1] / w);
      }
    }

    for (int a = 0; a < 2; ++a) {
      for (Eigen::Index j = 0; j < n_int; ++j) {
        integral_[a][j] = std::clamp(integral_[a][j] + dt * err[a][cfg_.tracked[j]],
                                     -cfg_.integral_limit, cfg_.integral_limit);
      }
    }
    ++phase_ticks_;
    ++tick_count_;
    t_ = tick_count_ * dt;
    return out;
  }

  SupportPolygon support_polygon() const {
    const auto [left, right] = feet_poses();
    switch (phase_.kind) {
      case PhaseKind::SingleSupport:
        return SupportPolygon::of_feet({support_}, cfg_.foot);
      case PhaseKind::DoubleSupport:
        return SupportPolygon::of_feet({support_, next_support_}, cfg_.foot);
      default:
        return SupportPolygon::of_feet({left, right}, cfg_.foot);
    }
  }

 private:
  std::pair<Footstep, Footstep> feet_poses() const {
    return {Footstep{feet_.x_l, feet_.y_l, feet_.theta_l, 0},
            Footstep{feet_.x_r, feet_.y_r, feet_.theta_r, 0}};
  }

  void advance_phase(const std::array<EstimatorState, 2>& est) {
    switch (phase_.kind) {
      case PhaseKind::Idle:
        if (filtered_.walk) enter(PhaseKind::Initialize);
        break;
      case PhaseKind::Initialize:
        if (phase_ticks_ >= init_ticks()) {
          const Vec2 h = init_hip_target();
          hip_end_ = {h.x(), h.y()};
          start_step(std::nullopt);
        }
        break;
      case PhaseKind::SingleSupport:
        if (phase_ticks_ >= ss_ticks_) {
          if (ds_ticks_ > 0) {
            enter(PhaseKind::DoubleSupport);
          } else {
            finish_step();
            start_step(std::nullopt);
          }
        } else if (emergency_pending_ &&
                   phase_ticks_ >= cfg_.emergency.min_step_fraction * ss_ticks_) {
          // Land now, nearer the capture point, and replan the hip from the
          // estimated state.
          shift_landing(capture_shift_);
          finish_step();
          start_step(std::array<Vec2, 2>{est[0].x_hat.head<2>(), est[1].x_hat.head<2>()});
        }
        break;
      case PhaseKind::DoubleSupport:
        if (phase_ticks_ >= ds_ticks_) {
          finish_step();
          start_step(std::nullopt);
        }
        break;
    }
    emergency_pending_ = false;
  }

  long init_ticks() const { return std::max(1L, std::lround(cfg_.init_duration / cfg_.dt)); }

  void enter(PhaseKind k) {
    phase_.kind = k;
    phase_ticks_ = 0;
    phase_.timer = 0.0;
  }

  Footstep first_support() const {
    const auto [left, right] = feet_poses();
    return feet_.left_swings() ? right : left;
  }

  Vec2 init_hip_target() const {
    const Vec2 mid = stance_center();
    return mid + cfg_.init_shift_fraction * (first_support().pos() - mid);
  }

  void finish_step() { feet_ = feet_after_; }

  void shift_landing(Vec2 shift) {
    const double n = shift.norm();
    if (n > cfg_.emergency.max_capture_shift) shift *= cfg_.emergency.max_capture_shift / n;
    // Keep the landing on its own side of the support foot.
    const double c = std::cos(next_support_.yaw), sn = std::sin(next_support_.yaw);
    const Vec2 rel = next_support_.pos() + shift - support_.pos();
    double fwd = c * rel.x() + sn * rel.y();
    double lat = -sn * rel.x() + c * rel.y();
    const double side = feet_.left_swings() ? 1.0 : -1.0;
    const auto& k = cfg_.constraints;
    fwd = std::clamp(fwd, -k.R_max, k.R_max);
    lat = side * std::clamp(side * lat, k.min_distance, k.nominal_width + 2 * k.lateral_max);
    next_support_.x = support_.x + c * fwd - sn * lat;
    next_support_.y = support_.y + sn * fwd + c * lat;
    if (feet_.left_swings()) {
      feet_after_.x_l = next_support_.x;
      feet_after_.y_l = next_support_.y;
    } else {
      feet_after_.x_r = next_support_.x;
      feet_after_.y_r = next_support_.y;
    }
  }

  void start_step(std::optional<std::array<Vec2, 2>> replan_from) {
    const bool left = feet_.left_swings();
    support_ = left ? Footstep{feet_.x_r, feet_.y_r, feet_.theta_r, step_index_}
                    : Footstep{feet_.x_l, feet_.y_l, feet_.theta_l, step_index_};
    swing_start_ = left ? Vec3(feet_.x_l, feet_.y_l, 0.0) : Vec3(feet_.x_r, feet_.y_r, 0.0);

    const StepAction action{filtered_.X, filtered_.alpha * kDegToRad, filtered_.Y};
    auto [after, landing] = plan_footstep(feet_, action, cfg_.constraints, step_index_ + 1);
    feet_after_ = after;
    next_support_ = landing;
    ++step_index_;

    step_z_ = com_height(0.0, {eff_gait_.z_0, eff_gait_.A_z, 0.0, eff_gait_.step_time()}) +
              pending_dz_;
    ModelParams p = ctrl_params_;
    p.z_c = step_z_;
    step_mu_ = p.mu();
    step_params_ = p;
    step_model_ = model_at(step_z_);

    const auto prof = sinusoidal_profiles(0.0, eff_gait_);
    const Vec2 end = step_endpoint(support_, next_support_);
    const std::array<double, 2> dir{std::cos(support_.yaw), std::sin(support_.yaw)};
    for (int a = 0; a < 2; ++a) {
      hip_g_[a] = compute_gx(support_.pos()[a], prof.theta_to * dir[a],
                             prof.thetadd_to * dir[a], p);
      if (replan_from) {
        hip_start_[a] = (*replan_from)[a][0];
        hip_end_[a] = end[a];
      } else {
        hip_start_[a] = hip_end_[a];
        hip_end_[a] = end[a];
      }
    }
    enter(PhaseKind::SingleSupport);
  }

  const DiscreteSS& model_at(double z) {
    auto it = models_.find(z);
    if (it == models_.end()) {
      if (models_.size() > 256) models_.clear();
      ModelParams p = ctrl_params_;
      p.z_c = z;
      it = models_.emplace(z, discretize_model(p, cfg_.dt)).first;
    }
    return it->second;
  }

  void compute_references(ReferenceFrame& r, std::array<Vec4, 2>& x_ref,
                          std::array<Vec2, 2>& u_ref) const {
    const double tau = phase_ticks_ * cfg_.dt;
    r.t = tau;
    const ModelParams& p = phase_.kind == PhaseKind::SingleSupport ||
                                   phase_.kind == PhaseKind::DoubleSupport
                               ? step_params_
                               : ctrl_params_;
    const std::array<double, 2> dir{std::cos(support_.yaw), std::sin(support_.yaw)};

    if (phase_.kind == PhaseKind::Idle || phase_.kind == PhaseKind::Initialize) {
      const Vec2 mid = stance_center();
      double s = 0, sd = 0, sdd = 0;
      if (phase_.kind == PhaseKind::Initialize) {
        const double T = init_ticks() * cfg_.dt;
        const double u = std::clamp(tau / T, 0.0, 1.0);
        s = u * u * (3 - 2 * u);
        sd = 6 * u * (1 - u) / T;
        sdd = (6 - 12 * u) / (T * T);
      }
      const Vec2 target = init_hip_target();
      const double ti = eff_gait_.TI_to * kDegToRad;
      const Footstep first = first_support();
      const std::array<double, 2> fdir{std::cos(first.yaw), std::sin(first.yaw)};
      for (int a = 0; a < 2; ++a) {
        const double d = target[a] - mid[a];
        const double x = mid[a] + s * d, xd = sd * d, xdd = sdd * d;
        const double th = s * ti * fdir[a], thd = sd * ti * fdir[a], thdd = sdd * ti * fdir[a];
        x_ref[a] = Vec4(x, xd, th, thd);
        u_ref[a] = Vec2(consistent_zmp(x, xdd, th, thdd, p), thdd);
        r.hip[a] = {x, xd};
      }
      r.r_zmp = Vec2(u_ref[0][0], u_ref[1][0]);
      r.swing_foot = feet_.left_swings() ? Vec3(feet_.x_l, feet_.y_l, 0) : Vec3(feet_.x_r, feet_.y_r, 0);
      r.z_com = cfg_.gait.z_0;
      r.theta_to_ref = s * ti;
      r.arm_ref = eff_gait_.arm_bias;
      return;
    }

    const double T = eff_gait_.step_time();
    const auto prof = sinusoidal_profiles(tau, eff_gait_);
    const GaitTiming timing{eff_gait_.T_ss, eff_gait_.T_ds};
    const Vec2 L = next_support_.pos() - support_.pos();
    r.r_zmp = zmp_reference(support_, L.x(), L.y(), timing, std::min(tau, T - 1e-12));
    for (int a = 0; a < 2; ++a) {
      const auto h = hip_trajectory(hip_start_[a], hip_end_[a], 0.0, T, hip_g_[a], step_mu_, tau);
      const double xdd = step_mu_ * (h.x - hip_g_[a]);
      const double th = prof.theta_to * dir[a];
      const double thd = prof.thetad_to * dir[a];
      const double thdd = prof.thetadd_to * dir[a];
      x_ref[a] = Vec4(h.x, h.xd, th, thd);
      u_ref[a] = Vec2(consistent_zmp(h.x, xdd, th, thdd, p), thdd);
      r.hip[a] = {h.x, h.xd};
    }
    const Vec3 target(next_support_.x, next_support_.y, 0.0);
    r.swing_foot = phase_.kind == PhaseKind::SingleSupport
                       ? swing_trajectory(swing_start_, target, eff_gait_.z_sw, tau / eff_gait_.T_ss)
                       : target;
    r.z_com = prof.z_com + step_dz();
    r.theta_to_ref = prof.theta_to;
    r.arm_ref = prof.arm;
  }

  double step_dz() const {
    return step_z_ - com_height(0.0, {eff_gait_.z_0, eff_gait_.A_z, 0.0, eff_gait_.step_time()});
  }

  EngineConfig cfg_;
  ModelParams ctrl_params_;
  ModelParams step_params_;
  GaitParams eff_gait_;
  long ss_ticks_ = 10;
  long ds_ticks_ = 0;
  std::shared_ptr<const LqrGain> gain_;
  std::map<double, DiscreteSS> models_;
  DiscreteSS step_model_;

  WalkPhase phase_;
  long phase_ticks_ = 0;
  long tick_count_ = 0;
  double t_ = 0.0;
  WalkCommand filtered_{0.0, 0.0, 0.0, false};

  FeetState feet_;
  FeetState feet_after_;
  Footstep support_;
  Footstep next_support_;
  Vec3 swing_start_ = Vec3::Zero();
  long step_index_ = 0;

  std::array<double, 2> hip_start_{0.0, 0.0};
  std::array<double, 2> hip_end_{0.0, 0.0};
  std::array<double, 2> hip_g_{0.0, 0.0};
  double step_z_ = 0.3;
  double step_mu_ = 1.0;
  double pending_dz_ = 0.0;

  std::array<VectorXd, 2> integral_;
  std::array<ControlInput, 2> last_u_{};
  bool emergency_pending_ = false;
  Vec2 capture_shift_ = Vec2::Zero();
  int zmp_out_ticks_ = 0;
};

}  // namespace biped
