#include "biped/control.hpp"

#include <cmath>

#include <gtest/gtest.h>

namespace biped {
namespace {

MatrixXd m1(double v) { return MatrixXd::Constant(1, 1, v); }

TEST(Dare, ScalarGoldenRatio) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  for (auto method : {RiccatiMethod::FixedPoint, RiccatiMethod::Doubling}) {
    const auto g = solve_dare(m1(1), m1(1), m1(1), m1(1), 1e-12, 100000, method);
    EXPECT_NEAR(g.P(0, 0), phi, 1e-9);
    EXPECT_NEAR(g.K(0, 0), 1.0 / phi, 1e-9);
  }
}

TEST(Dare, NoControlAuthorityIsRejected) {
  try {
    solve_dare(m1(1), m1(0), m1(1), m1(1), 1e-10, 2000);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "riccati-diverged");
  }
  EXPECT_THROW(solve_dare(m1(1), m1(0), m1(0), m1(1)), Error);
}

TEST(Dare, ZeroStateCostNeedsNoControl) {
  const auto g = solve_dare(m1(0.5), m1(1), m1(0), m1(1));
  EXPECT_EQ(g.P(0, 0), 0.0);
  EXPECT_EQ(g.K(0, 0), 0.0);
}

TEST(Dare, SingularInputWeightIsDegenerate) {
  try {
    solve_dare(m1(0.5), m1(1), m1(1), m1(0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "riccati-degenerate");
  }
}

class WalkingPlantDare : public ::testing::Test {
 protected:
  DiscreteSS ss = discretize_model(ModelParams{}, 0.02);
  AugmentedSystem aug = augment_integrator(ss, {0, 2});
  LqrWeights w = default_weights();
};

TEST_F(WalkingPlantDare, ResidualAndStability) {
  const auto g = solve_dare(aug, w);
  EXPECT_LE(dare_residual(aug.A, aug.B, w.Q, w.R, g.P), 1e-10);
  EXPECT_LT(spectral_radius(aug.A - aug.B * g.K), 1.0);
  EXPECT_TRUE(g.P.isApprox(g.P.transpose(), 1e-12));
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(g.P);
  EXPECT_GE(es.eigenvalues().minCoeff(), 0.0);
}

TEST_F(WalkingPlantDare, DoublingAgreesWithFixedPoint) {
  const auto a = solve_dare(aug, w, 1e-10, 100000, RiccatiMethod::FixedPoint);
  const auto b = solve_dare(aug, w, 1e-10, 100000, RiccatiMethod::Doubling);
  EXPECT_LT((a.K - b.K).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(b.iterations, a.iterations);
}

TEST_F(WalkingPlantDare, GainIsInvariantToJointWeightScaling) {
  const auto a = solve_dare(aug, w);
  for (double s : {0.01, 7.0, 250.0}) {
    LqrWeights ws{w.Q * s, w.R * s};
    const auto b = solve_dare(aug, ws, 1e-10 * s);
    EXPECT_LT((a.K - b.K).cwiseAbs().maxCoeff(), 1e-9) << "scale " << s;
  }
}

TEST(AugmentIntegrator, Bookkeeping) {
  const auto ss = discretize_model(ModelParams{}, 0.02);
  const auto none = augment_integrator(ss, {});
  EXPECT_TRUE(none.A.isApprox(MatrixXd(ss.A)));
  EXPECT_TRUE(none.B.isApprox(MatrixXd(ss.B)));

  const auto one = augment_integrator(ss, {0});
  EXPECT_EQ(one.A.rows(), 5);
  EXPECT_EQ(one.B.rows(), 5);
  EXPECT_THROW(augment_integrator(ss, {4}), Error);
}

TEST(AugmentIntegrator, ConstantErrorIntegratesLinearly) {
  const auto ss = discretize_model(ModelParams{}, 0.02);
  const auto aug = augment_integrator(ss, {0});
  // Hold the plant state at a constant offset e from a zero reference and
  // propagate only the integrator row.
  const double e = 0.03;
  VectorXd z = VectorXd::Zero(5);
  z[0] = e;
  for (int n = 1; n <= 50; ++n) {
    const double xi = aug.A.row(4).dot(z);
    z[4] = xi;
    EXPECT_NEAR(xi, n * 0.02 * e, 1e-15);
  }
}

TEST(LqgLaw, Examples) {
  LqrGain g;
  g.K = MatrixXd::Identity(2, 3);
  const VectorXd x(VectorXd::Constant(2, 0.4));
  EXPECT_TRUE(lqg_law(x, x, VectorXd::Zero(1), g).isZero());

  VectorXd xt(2), xr(2);
  xt << 0.3, -0.2;
  xr << 0.1, 0.1;
  const VectorXd u = lqg_law(xt, xr, VectorXd::Zero(1), g);
  EXPECT_NEAR(u[0], -0.2, 1e-15);
  EXPECT_NEAR(u[1], 0.3, 1e-15);

  const auto golden = solve_dare(m1(1), m1(1), m1(1), m1(1), 1e-12);
  const VectorXd ug = lqg_law(VectorXd::Constant(1, 0.1), VectorXd::Zero(1), VectorXd::Zero(0), golden);
  EXPECT_NEAR(ug[0], -0.0618034, 1e-7);

  EXPECT_THROW(lqg_law(VectorXd::Zero(3), VectorXd::Zero(2), VectorXd::Zero(1), g), Error);
}

}  // namespace
}  // namespace biped
