#pragma once

#include <algorithm>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "biped/dynamics.hpp"
#include "biped/error.hpp"

namespace biped {

template <int N>
struct KalmanConfigT {
  Eigen::Matrix<double, N, N> Q_proc = Eigen::Matrix<double, N, N>::Identity() * 1e-6;
  Eigen::Matrix<double, N, N> R_meas = Eigen::Matrix<double, N, N>::Identity() * 6.25e-4;
  Eigen::Matrix<double, N, N> P0 = Eigen::Matrix<double, N, N>::Identity() * 1e-2;
  // When set, the update uses `fixed_gain` instead of the covariance-driven
  // gain, and P is left at its steady-state value.
  bool use_fixed_gain = false;
  Eigen::Matrix<double, N, N> fixed_gain = Eigen::Matrix<double, N, N>::Zero();
};

template <int N>
struct EstimatorStateT {
  Eigen::Matrix<double, N, 1> x_hat = Eigen::Matrix<double, N, 1>::Zero();
  Eigen::Matrix<double, N, N> P = Eigen::Matrix<double, N, N>::Identity();
};

using KalmanConfig = KalmanConfigT<4>;
using EstimatorState = EstimatorStateT<4>;

template <int N>
bool is_symmetric_psd(const Eigen::Matrix<double, N, N>& P, double tol = 1e-10) {
  const double scale = std::max(1.0, P.cwiseAbs().maxCoeff());
  if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) return false;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, N, N>> es(P);
  return es.eigenvalues().minCoeff() >= -tol;
}

template <int N, int M>
EstimatorStateT<N> kalman_predict(const EstimatorStateT<N>& est,
                                  const LinearSystem<N, M>& ss,
                                  const Eigen::Matrix<double, M, 1>& u,
                                  const KalmanConfigT<N>& cfg) {
  EstimatorStateT<N> out;
  out.x_hat = ss.A * est.x_hat + ss.B * u;
  if (cfg.use_fixed_gain) {
    out.P = est.P;
  } else {
    out.P = ss.A * est.P * ss.A.transpose() + cfg.Q_proc;
    out.P = 0.5 * (out.P + out.P.transpose()).eval();
  }
  return out;
}

inline EstimatorState kalman_predict(const EstimatorState& est, const DiscreteSS& ss,
                                     const ControlInput& u, const KalmanConfig& cfg) {
  return kalman_predict<4, 2>(est, ss, u.vec(), cfg);
}

/// Measurement update with y = C x + v. Uses the Joseph form so P stays
/// symmetric PSD over long runs.
template <int N, int M>
EstimatorStateT<N> kalman_update(const EstimatorStateT<N>& est,
                                 const Eigen::Matrix<double, N, 1>& y,
                                 const LinearSystem<N, M>& ss,
                                 const KalmanConfigT<N>& cfg) {
  using MatN = Eigen::Matrix<double, N, N>;
  const MatN& C = ss.C;
  EstimatorStateT<N> out;
  if (cfg.use_fixed_gain) {
    out.x_hat = est.x_hat + cfg.fixed_gain * (y - C * est.x_hat);
    out.P = est.P;
    return out;
  }
  const MatN S = C * est.P * C.transpose() + cfg.R_meas;
  Eigen::FullPivLU<MatN> lu(S);
  if (!lu.isInvertible() || !S.allFinite()) {
    throw Error("estimator-degenerate", "innovation covariance is singular");
  }
  const MatN K = est.P * C.transpose() * lu.inverse();
  out.x_hat = est.x_hat + K * (y - C * est.x_hat);
  const MatN I_KC = MatN::Identity() - K * C;
  out.P = I_KC * est.P * I_KC.transpose() + K * cfg.R_meas * K.transpose();
  out.P = 0.5 * (out.P + out.P.transpose()).eval();
  return out;
}

inline EstimatorState kalman_update(const EstimatorState& est, const Vec4& y,
                                    const DiscreteSS& ss, const KalmanConfig& cfg) {
  return kalman_update<4, 2>(est, y, ss, cfg);
}

/// Steady-state filter gain (predicted-covariance form) obtained by iterating
/// the filter Riccati recursion to convergence.
template <int N, int M>
Eigen::Matrix<double, N, N> steady_state_kalman_gain(const LinearSystem<N, M>& ss,
                                                     const KalmanConfigT<N>& cfg,
                                                     double tol = 1e-12,
                                                     int max_iter = 100000) {
  using MatN = Eigen::Matrix<double, N, N>;
  MatN P = cfg.P0;
  for (int i = 0; i < max_iter; ++i) {
    const MatN S = ss.C * P * ss.C.transpose() + cfg.R_meas;
    const MatN K = P * ss.C.transpose() * S.inverse();
    const MatN Pu = (MatN::Identity() - K * ss.C) * P;
    MatN next = ss.A * Pu * ss.A.transpose() + cfg.Q_proc;
    next = 0.5 * (next + next.transpose()).eval();
    const double diff = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (diff <= tol) {
      const MatN Sf = ss.C * P * ss.C.transpose() + cfg.R_meas;
      return P * ss.C.transpose() * Sf.inverse();
    }
  }
  throw Error("riccati-diverged", "filter Riccati recursion did not converge");
}

/// First-order lag: prev + (dt / tau) (input - prev).
inline double lag_filter(double prev, double input, double dt, double tau) {
  if (!(tau > 0) || !(dt > 0)) throw Error("invalid-params", "lag filter needs dt, tau > 0");
  return prev + (dt / tau) * (input - prev);
}

}  // namespace biped
