#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "biped/dynamics.hpp"
#include "biped/error.hpp"

namespace biped {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct LqrWeights {
  MatrixXd Q;
  MatrixXd R;
};

struct LqrGain {
  MatrixXd K;
  MatrixXd P;
  int iterations = 0;
};

enum class RiccatiMethod { FixedPoint, Doubling };

/// Discrete system extended with integrators of selected output errors.
struct AugmentedSystem {
  MatrixXd A;
  MatrixXd B;
  double dt = 0.0;
  std::vector<int> tracked;
  int base_states = 0;
};

/// x_i(k+1) = x_i(k) + dt * (y_j(k) - r_j(k)) for every tracked output j.
/// The reference enters as an exogenous signal, so it does not appear in
/// the augmented matrices.
template <int N, int M>
AugmentedSystem augment_integrator(const LinearSystem<N, M>& ss,
                                   const std::vector<int>& tracked) {
  const int n = N;
  const int m = M;
  const int k = static_cast<int>(tracked.size());
  for (int idx : tracked) {
    if (idx < 0 || idx >= n) throw Error("invalid-params", "tracked index out of range");
  }
  AugmentedSystem out;
  out.A = MatrixXd::Zero(n + k, n + k);
  out.B = MatrixXd::Zero(n + k, m);
  out.A.topLeftCorner(n, n) = ss.A;
  out.B.topRows(n) = ss.B;
  for (int j = 0; j < k; ++j) {
    out.A.row(n + j).head(n) = ss.dt * ss.C.row(tracked[j]);
    out.A(n + j, n + j) = 1.0;
  }
  out.dt = ss.dt;
  out.tracked = tracked;
  out.base_states = n;
  return out;
}

inline double spectral_radius(const MatrixXd& M) {
  Eigen::EigenSolver<MatrixXd> es(M, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline MatrixXd dare_rhs(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                         const MatrixXd& R, const MatrixXd& P) {
  const MatrixXd BtPA = B.transpose() * P * A;
  const MatrixXd S = R + B.transpose() * P * B;
  return A.transpose() * P * A - BtPA.transpose() * S.fullPivLu().solve(BtPA) + Q;
}

/// Infinity-norm residual of the discrete algebraic Riccati equation.
inline double dare_residual(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                            const MatrixXd& R, const MatrixXd& P) {
  return (P - dare_rhs(A, B, Q, R, P)).cwiseAbs().rowwise().sum().maxCoeff();
}

namespace detail {

inline MatrixXd gain_from(const MatrixXd& A, const MatrixXd& B, const MatrixXd& R,
                          const MatrixXd& P) {
  const MatrixXd S = R + B.transpose() * P * B;
  Eigen::FullPivLU<MatrixXd> lu(S);
  if (!lu.isInvertible()) throw Error("riccati-degenerate", "R + B'PB is singular");
  return lu.solve(B.transpose() * P * A);
}

inline void check_weights(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                          const MatrixXd& R) {
  const auto n = A.rows();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n ||
      R.rows() != B.cols() || R.cols() != B.cols()) {
    throw Error("invalid-params", "DARE dimension mismatch");
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> q(0.5 * (Q + Q.transpose()));
  Eigen::SelfAdjointEigenSolver<MatrixXd> r(0.5 * (R + R.transpose()));
  if (q.eigenvalues().minCoeff() < -1e-12) throw Error("invalid-params", "Q must be PSD");
  if (r.eigenvalues().minCoeff() <= 0) throw Error("riccati-degenerate", "R must be PD");
}

}  // namespace detail

/// Solves P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q and returns the LQR gain
/// K = (R + B'PB)^-1 B'PA. The fixed-point iteration starts from P = Q; the
/// doubling variant squares the Hamiltonian pencil each step.
inline LqrGain solve_dare(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                          const MatrixXd& R, double tol = 1e-10, int max_iter = 100000,
                          RiccatiMethod method = RiccatiMethod::FixedPoint) {
  detail::check_weights(A, B, Q, R);
  const auto n = A.rows();
  LqrGain out;
  MatrixXd P = Q;
  bool converged = false;

  if (method == RiccatiMethod::FixedPoint) {
    for (int it = 1; it <= max_iter; ++it) {
      const MatrixXd S = R + B.transpose() * P * B;
      Eigen::FullPivLU<MatrixXd> lu(S);
      if (!lu.isInvertible()) throw Error("riccati-degenerate", "R + B'PB is singular");
      const MatrixXd BtPA = B.transpose() * P * A;
      MatrixXd next = A.transpose() * P * A - BtPA.transpose() * lu.solve(BtPA) + Q;
      next = 0.5 * (next + next.transpose()).eval();
      if (!next.allFinite() || next.cwiseAbs().maxCoeff() > 1e15) {
        throw Error("riccati-diverged", "Riccati iterate grew without bound");
      }
      const double step = (next - P).cwiseAbs().maxCoeff();
      P = std::move(next);
      out.iterations = it;
      if (step <= tol * 1e-2 * std::max(1.0, P.cwiseAbs().maxCoeff()) &&
          dare_residual(A, B, Q, R, P) <= tol) {
        converged = true;
        break;
      }
    }
  } else {
    const MatrixXd I = MatrixXd::Identity(n, n);
    Eigen::FullPivLU<MatrixXd> rlu(R);
    MatrixXd Ak = A;
    MatrixXd Gk = B * rlu.solve(B.transpose());
    MatrixXd Hk = Q;
    for (int it = 1; it <= max_iter; ++it) {
      Eigen::FullPivLU<MatrixXd> w(I + Gk * Hk);
      if (!w.isInvertible()) throw Error("riccati-degenerate", "doubling step is singular");
      const MatrixXd W_A = w.solve(Ak);
      const MatrixXd W_G = w.solve(Gk);
      MatrixXd Hn = Hk + Ak.transpose() * Hk * W_A;
      MatrixXd Gn = Gk + Ak * W_G * Ak.transpose();
      MatrixXd An = Ak * W_A;
      Hn = 0.5 * (Hn + Hn.transpose()).eval();
      Gn = 0.5 * (Gn + Gn.transpose()).eval();
      if (!Hn.allFinite() || Hn.cwiseAbs().maxCoeff() > 1e15) {
        throw Error("riccati-diverged", "doubling iterate grew without bound");
      }
      const double step = (Hn - Hk).cwiseAbs().maxCoeff();
      Ak = std::move(An);
      Gk = std::move(Gn);
      Hk = std::move(Hn);
      out.iterations = it;
      if (step <= tol * 1e-2 * std::max(1.0, Hk.cwiseAbs().maxCoeff())) {
        P = Hk;
        // Polish with fixed-point steps, which contract toward the same root.
        for (int k = 0; k < 50 && dare_residual(A, B, Q, R, P) > tol; ++k) {
          P = dare_rhs(A, B, Q, R, P);
          P = 0.5 * (P + P.transpose()).eval();
        }
        converged = dare_residual(A, B, Q, R, P) <= tol;
        break;
      }
    }
  }

  if (!converged) {
    throw Error("riccati-diverged", "no convergence within max_iter");
  }
  out.P = P;
  out.K = detail::gain_from(A, B, R, P);
  if (spectral_radius(A - B * out.K) >= 1.0) {
    throw Error("riccati-diverged", "closed loop is not stable (unstabilizable pair)");
  }
  return out;
}

inline LqrGain solve_dare(const AugmentedSystem& sys, const LqrWeights& w,
                          double tol = 1e-10, int max_iter = 100000,
                          RiccatiMethod method = RiccatiMethod::FixedPoint) {
  return solve_dare(sys.A, sys.B, w.Q, w.R, tol, max_iter, method);
}

/// u = -K [x_tilde - x_ref; x_i]
inline VectorXd lqg_law(const VectorXd& x_tilde, const VectorXd& x_ref,
                        const VectorXd& x_i, const LqrGain& gain) {
  if (x_tilde.size() != x_ref.size() ||
      gain.K.cols() != x_tilde.size() + x_i.size()) {
    throw Error("invalid-params", "LQG law dimension mismatch");
  }
  VectorXd z(x_tilde.size() + x_i.size());
  z << x_tilde - x_ref, x_i;
  return -gain.K * z;
}

/// Default weights on [x_c, xd_c, theta, thetad, int(x_c err), int(theta err)].
inline LqrWeights default_weights() {
  LqrWeights w;
  w.Q = VectorXd((VectorXd(6) << 400, 10, 50, 1, 100, 100).finished()).asDiagonal();
  w.R = Eigen::Vector2d(1, 1).asDiagonal();
  return w;
}

}  // namespace biped
