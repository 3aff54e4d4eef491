#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <vector>

#include <Eigen/Core>

#include "biped/dynamics.hpp"
#include "biped/error.hpp"

namespace biped {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;

/// Walking parameters tuned by the genetic optimizer. Angles in degrees.
struct GaitParams {
  double T_ss = 0.2;     // single-support duration (s)
  double x = 0.0;        // step length (m)
  double y = 0.0;        // step width (m), lateral displacement per step
  double alpha = 0.0;    // step angle (deg per step)
  double z_sw = 0.02;    // swing height (m)
  double TI_to = 0.0;    // torso inclination (deg)
  double A_z = 0.0;      // COM height amplitude (m)
  double A_to = 0.0;     // torso amplitude (deg)
  double z_0 = 0.3;      // nominal COM height (m)
  double T_ds = 0.0;     // double-support duration (s)
  double arm_bias = 0.0;       // rad
  double arm_amplitude = 0.0;  // rad

  double step_time() const { return T_ss + T_ds; }

  void validate() const {
    if (!(T_ss > 0) || !(T_ds >= 0)) throw Error("invalid-params", "gait timing out of range");
    if (!(z_sw > 0)) throw Error("invalid-params", "swing height must be positive");
    if (!(z_0 - std::abs(A_z) > 0.05)) throw Error("invalid-params", "COM too close to the ground");
  }
  bool operator==(const GaitParams&) const = default;
};

struct GaitTiming {
  double T_ss = 0.2;
  double T_ds = 0.0;
  double step_time() const { return T_ss + T_ds; }
};

/// Position and yaw of both feet plus their roles (+1 swing, -1 support).
struct FeetState {
  double x_l = 0.0, y_l = 0.05, theta_l = 0.0, phi_l = 1.0;
  double x_r = 0.0, y_r = -0.05, theta_r = 0.0, phi_r = -1.0;

  bool left_swings() const { return phi_l > 0; }
  bool operator==(const FeetState&) const = default;
};

struct StepAction {
  double R = 0.0;        // step length along the new heading (m)
  double sigma = 0.0;    // heading change (rad)
  double lateral = 0.0;  // sideways displacement (m), positive to the left
};

struct StepConstraints {
  double R_max = 0.2;
  double sigma_max = 0.6;
  double lateral_max = 0.06;
  double nominal_width = 0.1;  // lateral distance between feet centers
  double min_distance = 0.04;  // feet centers may not come closer than this
};

struct Footstep {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;
  long index = 0;

  Vec2 pos() const { return {x, y}; }
  bool operator==(const Footstep&) const = default;
};

/// s' = t(s, a): the swing foot lands R ahead of the support foot along the
/// support yaw plus sigma, offset sideways by the nominal width (toward the
/// swing side) plus the lateral command; roles are toggled afterwards.
/// Returns the new feet state and the footstep that becomes the support.
inline std::pair<FeetState, Footstep> plan_footstep(const FeetState& s, StepAction a,
                                                    const StepConstraints& c,
                                                    long index = 0) {
  a.R = std::clamp(a.R, -c.R_max, c.R_max);
  a.sigma = std::clamp(a.sigma, -c.sigma_max, c.sigma_max);
  a.lateral = std::clamp(a.lateral, -c.lateral_max, c.lateral_max);

  const bool left = s.left_swings();
  const double sx = left ? s.x_r : s.x_l;
  const double sy = left ? s.y_r : s.y_l;
  const double syaw = left ? s.theta_r : s.theta_l;
  const double side = left ? 1.0 : -1.0;

  const double yaw = syaw + a.sigma;
  const double c0 = std::cos(yaw), s0 = std::sin(yaw);
  const double offset = side * c.nominal_width + a.lateral;
  const double nx = sx + a.R * c0 - offset * s0;
  const double ny = sy + a.R * s0 + offset * c0;

  // Lateral separation measured in the frame of the new foot.
  const double dx = nx - sx, dy = ny - sy;
  const double lat = -dx * s0 + dy * c0;
  if (side * lat < c.min_distance) {
    throw Error("infeasible-step", "feet would overlap");
  }

  FeetState out = s;
  if (left) {
    out.x_l = nx;
    out.y_l = ny;
    out.theta_l = yaw;
  } else {
    out.x_r = nx;
    out.y_r = ny;
    out.theta_r = yaw;
  }
  out.phi_l = -s.phi_l;
  out.phi_r = -s.phi_r;
  return {out, Footstep{nx, ny, yaw, index}};
}

/// Piecewise ZMP reference within one step: fixed on the support foot during
/// single support, then a linear ramp of L_s over the double support.
inline Vec2 zmp_reference(const Footstep& f, double L_sx, double L_sy,
                          const GaitTiming& timing, double t) {
  if (!(t >= 0.0) || !(t < timing.step_time())) {
    throw Error("time-out-of-step", "t outside [0, step_time)");
  }
  if (t < timing.T_ss) return f.pos();
  const double k = (t - timing.T_ss) / timing.T_ds;
  return {f.x + L_sx * k, f.y + L_sy * k};
}

/// Swing foot path through the start, an apex of height Z_swing above the
/// midpoint, and the target. Horizontal motion uses a single smoothstep
/// cubic; the vertical motion is two clamped cubics meeting at the apex with
/// zero vertical velocity.
inline Vec3 swing_trajectory(const Vec3& p_start, const Vec3& p_target, double Z_swing,
                             double s) {
  s = std::clamp(s, 0.0, 1.0);
  const double h = s * s * (3.0 - 2.0 * s);
  Vec3 p = p_start + h * (p_target - p_start);
  const double apex = 0.5 * (p_start.z() + p_target.z()) + Z_swing;
  if (s <= 0.5) {
    const double u = 2.0 * s;
    p.z() = p_start.z() + (apex - p_start.z()) * u * u * (3.0 - 2.0 * u);
  } else {
    const double u = 2.0 * (1.0 - s);
    p.z() = p_target.z() + (apex - p_target.z()) * u * u * (3.0 - 2.0 * u);
  }
  return p;
}

struct SinusoidalRefs {
  double z_com;
  double theta_to;    // rad
  double thetad_to;   // rad/s
  double thetadd_to;  // rad/s^2
  double arm;         // rad
};

/// COM height, torso pitch and arm references over one step. `dz` shifts the
/// COM height setpoint.
inline SinusoidalRefs sinusoidal_profiles(double t, const GaitParams& gait, double dz = 0.0,
                                          double phi = 0.0) {
  const double T = gait.step_time();
  const double w = 2.0 * std::numbers::pi / T;
  const double A = gait.A_to * kDegToRad;
  SinusoidalRefs r;
  r.z_com = com_height(t, {gait.z_0, gait.A_z, phi, T}) + dz;
  r.theta_to = gait.TI_to * kDegToRad + A * std::sin(w * t);
  r.thetad_to = A * w * std::cos(w * t);
  r.thetadd_to = -A * w * w * std::sin(w * t);
  r.arm = gait.arm_bias + gait.arm_amplitude * std::sin(w * t);
  return r;
}

struct HipSample {
  double x;
  double xd;
};

/// Boundary-value solution of xdd = mu (x - g_x) with x(t_0) = x_0 and
/// x(t_f) = x_f.
inline HipSample hip_trajectory(double x_0, double x_f, double t_0, double t_f, double g_x,
                                double mu, double t) {
  if (!(t_0 < t_f) || !(mu > 0)) throw Error("invalid-params", "hip trajectory needs t_0 < t_f, mu > 0");
  const double w = std::sqrt(mu);
  const double den = std::sinh(w * (t_0 - t_f));
  const double a = g_x - x_f;
  const double b = x_0 - g_x;
  return {g_x + (a * std::sinh(w * (t - t_0)) + b * std::sinh(w * (t - t_f))) / den,
          w * (a * std::cosh(w * (t - t_0)) + b * std::cosh(w * (t - t_f))) / den};
}

/// Constant the hip oscillates about, including the torso contribution.
inline double compute_gx(double r_zmp, double theta_to, double thetadd_to,
                         const ModelParams& params) {
  params.validate();
  return r_zmp - params.torso_offset() * theta_to +
         params.torso_accel_gain() / params.mu() * thetadd_to;
}

/// Hip target at the end of a step: halfway between the current and next
/// support feet.
inline Vec2 step_endpoint(const Footstep& f_i, const Footstep& f_next) {
  return 0.5 * (f_i.pos() + f_next.pos());
}

struct AxisRef {
  double pos = 0.0;
  double vel = 0.0;
};

struct ReferenceFrame {
  double t = 0.0;
  Vec2 r_zmp = Vec2::Zero();
  std::array<AxisRef, 2> hip{};
  Vec3 swing_foot = Vec3::Zero();
  double z_com = 0.3;
  double theta_to_ref = 0.0;
  double arm_ref = 0.0;
};

inline void write_reference_csv_header(std::ostream& os) {
  os << "t,r_zmp_x,r_zmp_y,hip_x,hip_y,swing_x,swing_y,swing_z,z_com,theta_ref\n";
}

inline void write_reference_csv_row(std::ostream& os, double t, const ReferenceFrame& r) {
  os << t << ',' << r.r_zmp.x() << ',' << r.r_zmp.y() << ',' << r.hip[0].pos << ','
     << r.hip[1].pos << ',' << r.swing_foot.x() << ',' << r.swing_foot.y() << ','
     << r.swing_foot.z() << ',' << r.z_com << ',' << r.theta_to_ref << '\n';
}

/// Rectangle of a foot expressed by its center pose.
struct FootGeometry {
  double half_length = 0.07;
  double half_width = 0.04;
};

/// Convex support region with counter-clockwise vertices.
class SupportPolygon {
 public:
  SupportPolygon() = default;
  explicit SupportPolygon(std::vector<Vec2> pts) : v_(convex_hull(std::move(pts))) {}

  static SupportPolygon of_feet(std::initializer_list<Footstep> feet, const FootGeometry& g) {
    std::vector<Vec2> pts;
    for (const auto& f : feet) {
      const double c = std::cos(f.yaw), s = std::sin(f.yaw);
      for (double sx : {-1.0, 1.0}) {
        for (double sy : {-1.0, 1.0}) {
          const double lx = sx * g.half_length, ly = sy * g.half_width;
          pts.emplace_back(f.x + c * lx - s * ly, f.y + s * lx + c * ly);
        }
      }
    }
    return SupportPolygon(std::move(pts));
  }

  const std::vector<Vec2>& vertices() const { return v_; }

  /// Positive outside, negative inside: distance to the boundary.
  double signed_distance(const Vec2& p) const {
    double inside_depth = std::numeric_limits<double>::infinity();
    bool inside = true;
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const Vec2& a = v_[i];
      const Vec2& b = v_[(i + 1) % v_.size()];
      const Vec2 e = b - a;
      const double cross = e.x() * (p - a).y() - e.y() * (p - a).x();
      const double d = cross / e.norm();
      if (d < 0) inside = false;
      inside_depth = std::min(inside_depth, d);
    }
    if (inside) return -inside_depth;
    return (p - closest_point(p)).norm();
  }

  bool contains(const Vec2& p) const { return signed_distance(p) <= 0.0; }

  Vec2 closest_point(const Vec2& p) const {
    bool inside = true;
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const Vec2& a = v_[i];
      const Vec2 e = v_[(i + 1) % v_.size()] - a;
      if (e.x() * (p - a).y() - e.y() * (p - a).x() < 0) inside = false;
    }
    if (inside) return p;
    Vec2 best = v_.front();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const Vec2& a = v_[i];
      const Vec2 e = v_[(i + 1) % v_.size()] - a;
      const double k = std::clamp((p - a).dot(e) / e.squaredNorm(), 0.0, 1.0);
      const Vec2 q = a + k * e;
      const double d = (p - q).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = q;
      }
    }
    return best;
  }

  /// Polygon scaled about its centroid.
  SupportPolygon shrunk(double fraction) const {
    Vec2 c = Vec2::Zero();
    for (const auto& p : v_) c += p;
    c /= static_cast<double>(v_.size());
    std::vector<Vec2> pts;
    for (const auto& p : v_) pts.push_back(c + (1.0 - fraction) * (p - c));
    return SupportPolygon(std::move(pts));
  }

 private:
  static std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
      return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    if (pts.size() < 3) return pts;
    auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
      return (a - o).x() * (b - o).y() - (a - o).y() * (b - o).x();
    };
    std::vector<Vec2> h(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
      while (k >= 2 && cross(h[k - 2], h[k - 1], p) <= 0) --k;
      h[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
      while (k >= t && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
      h[k++] = pts[i];
    }
    h.resize(k - 1);
    return h;
  }

  std::vector<Vec2> v_;
};

}  // namespace biped
