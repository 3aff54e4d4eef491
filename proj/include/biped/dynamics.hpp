#pragma once

#include <cmath>
#include <numbers>
#include <span>

#include <Eigen/Core>
#include <unsupported/Eigen/MatrixFunctions>

#include "biped/error.hpp"

namespace biped {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;
using Mat42 = Eigen::Matrix<double, 4, 2>;

/// Physical constants of the two-mass (lower body + torso) pendulum.
struct ModelParams {
  double m_c = 3.0;    // lower body mass (kg)
  double m_to = 1.5;   // torso mass (kg)
  double l = 0.3;      // torso length (m)
  double z_c = 0.3;    // COM height (m)
  double z_to = 0.36;  // torso height (m)
  double g = 9.81;

  double alpha() const { return m_to / m_c; }
  double beta() const { return z_to / z_c; }
  double omega2() const { return g / z_c; }
  double mu() const {
    const double a = alpha();
    return (1.0 + a) / (1.0 + a * beta()) * omega2();
  }
  // Coefficient of theta_to in the COM position term: alpha*l/(1+alpha).
  double torso_offset() const {
    const double a = alpha();
    return a * l / (1.0 + a);
  }
  // Coefficient of the torso angular acceleration: alpha*beta*l/(1+alpha*beta).
  double torso_accel_gain() const {
    const double ab = alpha() * beta();
    return ab * l / (1.0 + ab);
  }

  void validate() const {
    if (!(m_c > 0) || !(m_to >= 0) || !(l > 0) || !(z_c > 0) || !(z_to > 0) ||
        !(g > 0)) {
      throw Error("invalid-params", "model parameters out of range");
    }
  }

  bool operator==(const ModelParams&) const = default;
};

/// Horizontal state of one axis: [x_c, xd_c, theta_to, thetad_to].
struct PendulumState {
  double x = 0.0;
  double xd = 0.0;
  double theta = 0.0;
  double thetad = 0.0;

  Vec4 vec() const { return {x, xd, theta, thetad}; }
  static PendulumState from(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(xd) && std::isfinite(theta) &&
           std::isfinite(thetad);
  }
  bool operator==(const PendulumState&) const = default;
};

/// Input of one axis: ZMP position and torso angular acceleration.
struct ControlInput {
  double zmp = 0.0;
  double torso_accel = 0.0;

  Vec2 vec() const { return {zmp, torso_accel}; }
  static ControlInput from(const Vec2& v) { return {v[0], v[1]}; }
  bool operator==(const ControlInput&) const = default;
};

inline constexpr double kLinearizationBound = 0.35;  // rad

/// Linear time-invariant system in state-space form. `dt` is zero for
/// continuous-time systems.
template <int N, int M>
struct LinearSystem {
  Eigen::Matrix<double, N, N> A;
  Eigen::Matrix<double, N, M> B;
  Eigen::Matrix<double, N, N> C;
  double dt = 0.0;
};

using ContinuousSS = LinearSystem<4, 2>;
using DiscreteSS = LinearSystem<4, 2>;

struct PointMass {
  double m;
  double x;
  double z;
  double xdd;
  double zdd;
};

/// Multi-body ZMP along one horizontal axis.
inline double zmp_multibody(std::span<const PointMass> masses, double g = 9.81) {
  if (masses.empty()) throw Error("zmp-undefined", "no masses");
  double num = 0.0;
  double den = 0.0;
  for (const auto& b : masses) {
    num += b.m * b.x * (b.zdd + g) - b.m * b.z * b.xdd;
    den += b.m * (b.zdd + g);
  }
  if (std::abs(den) < 1e-12) {
    throw Error("zmp-undefined", "vertical force vanishes (free fall)");
  }
  return num / den;
}

/// Linear inverted pendulum: xdd = omega^2 (x_c - p_x).
inline double lipm_accel(double x_c, double p_x, const ModelParams& params) {
  params.validate();
  return params.omega2() * (x_c - p_x);
}

struct VerticalComProfile {
  double z_0 = 0.3;
  double A_z = 0.0;
  double phi = 0.0;
  double step_time = 0.2;

  void validate() const {
    if (!(step_time > 0)) throw Error("invalid-params", "step_time must be > 0");
    if (!(z_0 - std::abs(A_z) > 0)) {
      throw Error("invalid-params", "COM profile reaches the ground");
    }
  }
};

inline double com_height(double t, const VerticalComProfile& profile) {
  return profile.z_0 +
         profile.A_z * std::cos(2.0 * std::numbers::pi * t / profile.step_time +
                                profile.phi);
}

struct AccelResult {
  double value;
  bool linearization_exceeded;
};

/// Two-mass model COM acceleration. Exceeding the small-angle bound is
/// reported, not rejected.
inline AccelResult two_mass_accel(const PendulumState& s, const ControlInput& u,
                                  const ModelParams& params,
                                  double theta_bound = kLinearizationBound) {
  params.validate();
  const double xdd =
      params.mu() * (s.x + params.torso_offset() * s.theta - u.zmp) -
      params.torso_accel_gain() * u.torso_accel;
  return {xdd, std::abs(s.theta) > theta_bound};
}

inline ContinuousSS build_continuous_ss(const ModelParams& params) {
  params.validate();
  const double mu = params.mu();
  ContinuousSS ss;
  ss.A.setZero();
  ss.A(0, 1) = 1.0;
  ss.A(1, 0) = mu;
  ss.A(1, 2) = mu * params.torso_offset();
  ss.A(2, 3) = 1.0;
  ss.B.setZero();
  ss.B(1, 0) = -mu;
  ss.B(1, 1) = -params.torso_accel_gain();
  ss.B(3, 1) = 1.0;
  ss.C.setIdentity();
  ss.dt = 0.0;
  return ss;
}

/// Exact zero-order-hold discretization through the exponential of the
/// augmented block [[A, B], [0, 0]] * dt.
template <int N, int M>
LinearSystem<N, M> discretize(const LinearSystem<N, M>& ss, double dt) {
  if (!(dt > 0)) throw Error("invalid-params", "dt must be > 0");
  constexpr int K = N + M;
  Eigen::Matrix<double, K, K> aug = Eigen::Matrix<double, K, K>::Zero();
  aug.template topLeftCorner<N, N>() = ss.A * dt;
  aug.template topRightCorner<N, M>() = ss.B * dt;
  const Eigen::Matrix<double, K, K> phi = aug.exp();
  LinearSystem<N, M> d;
  d.A = phi.template topLeftCorner<N, N>();
  d.B = phi.template topRightCorner<N, M>();
  d.C = ss.C;
  d.dt = dt;
  return d;
}

inline DiscreteSS discretize_model(const ModelParams& params, double dt) {
  return discretize(build_continuous_ss(params), dt);
}

template <int N, int M>
Eigen::Matrix<double, N, 1> step_discrete(const LinearSystem<N, M>& ss,
                                          const Eigen::Matrix<double, N, 1>& x,
                                          const Eigen::Matrix<double, M, 1>& u) {
  return ss.A * x + ss.B * u;
}

inline PendulumState step_discrete(const DiscreteSS& ss, const PendulumState& x,
                                   const ControlInput& u) {
  return PendulumState::from(ss.A * x.vec() + ss.B * u.vec());
}

/// ZMP that holds a state in equilibrium: the root of the two-mass
/// acceleration with zero torso acceleration.
inline double equilibrium_zmp(const PendulumState& s, const ModelParams& params) {
  return s.x + params.torso_offset() * s.theta;
}

}  // namespace biped
