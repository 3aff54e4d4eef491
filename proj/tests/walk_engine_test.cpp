#include "biped/walk_engine.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "biped/sim.hpp"

namespace biped {
namespace {

std::array<EstimatorState, 2> at_rest(const Vec2& c) {
  std::array<EstimatorState, 2> est;
  est[0].x_hat = Vec4(c.x(), 0, 0, 0);
  est[1].x_hat = Vec4(c.y(), 0, 0, 0);
  return est;
}

TEST(CommandFilter, InheritsLagFilterBehaviour) {
  const StepConstraints c;
  const WalkCommand a{0.04, 0.02, 5.0, true};
  EXPECT_EQ(command_filter(a, a, 0.02, 0.1, c), a);

  const WalkCommand zero{0, 0, 0, true};
  const auto one = command_filter(zero, {0.1, 0.05, 10.0, true}, 0.02, 0.1, c);
  EXPECT_NEAR(one.X, 0.02, 1e-15);
  EXPECT_NEAR(one.Y, 0.01, 1e-15);
  EXPECT_NEAR(one.alpha, 2.0, 1e-12);

  WalkCommand f = zero;
  const double dt = 1e-4, tau = 0.1;
  for (int i = 0; i < 1000; ++i) f = command_filter(f, {0.1, 0, 0, true}, dt, tau, c);
  EXPECT_NEAR(f.X, 0.1 * (1.0 - std::exp(-1.0)), 5e-5);
}

TEST(CommandFilter, ClampsBeforeFiltering) {
  const StepConstraints c;
  WalkCommand f{0, 0, 0, true};
  for (int i = 0; i < 2000; ++i) f = command_filter(f, {5.0, -5.0, 500.0, true}, 0.02, 0.1, c);
  EXPECT_NEAR(f.X, c.R_max, 1e-12);
  EXPECT_NEAR(f.Y, -c.lateral_max, 1e-12);
  EXPECT_NEAR(f.alpha * kDegToRad, c.sigma_max, 1e-12);
}

TEST(EmergencyCheck, Examples) {
  const auto poly = SupportPolygon::of_feet({Footstep{0, 0, 0, 0}}, FootGeometry{});
  EmergencyMargins m;
  EXPECT_FALSE(emergency_check({0.0, 0.0}, Vec2::Zero(), poly, m));
  EXPECT_TRUE(emergency_check({m.tracking_error * 1.01, 0.0}, Vec2::Zero(), poly, m));
  EXPECT_TRUE(emergency_check({0.0, 0.0}, Vec2(0.065, 0.0), poly, m));  // inside, but past the 20% margin
  EXPECT_FALSE(emergency_check({0.0, 0.0}, Vec2(0.05, 0.0), poly, m));

  m.tracking_error = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(emergency_check({1e6, -1e6}, Vec2::Zero(), poly, m));
  m.enabled = false;
  EXPECT_FALSE(emergency_check({1e6, 1e6}, Vec2(5, 5), poly, m));
}

TEST(TorsoViableAccel, PassesThroughWhenFarFromTheBound) {
  EXPECT_DOUBLE_EQ(torso_viable_accel(0.0, 0.0, 3.0, 0.02, 60.0, 0.3), 3.0);
  EXPECT_DOUBLE_EQ(torso_viable_accel(0.0, 0.0, 500.0, 0.02, 60.0, 0.3), 60.0);
}

TEST(TorsoViableAccel, StoppingAngleStaysInsideTheBound) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> th(-0.3, 0.3), thd(-2.0, 2.0), acc(-100, 100);
  const double dt = 0.02, a_max = 60.0, safe = 0.3;
  int checked = 0;
  for (int i = 0; i < 2000; ++i) {
    const double t0 = th(rng), w0 = thd(rng);
    // Only states that are themselves viable.
    if (std::abs(t0 + w0 * std::abs(w0) / (2 * a_max)) > safe) continue;
    const double a = torso_viable_accel(t0, w0, acc(rng), dt, a_max, safe);
    const double w1 = w0 + a * dt;
    const double t1 = t0 + w0 * dt + 0.5 * a * dt * dt;
    EXPECT_LE(std::abs(t1 + w1 * std::abs(w1) / (2 * a_max)), safe + 1e-9);
    EXPECT_LE(std::abs(a), a_max);
    ++checked;
  }
  EXPECT_GT(checked, 500);
}

TEST(WalkEngine, IdleWithoutSignalRegulatesInPlace) {
  WalkEngine e{EngineConfig{}};
  const auto est = at_rest(e.stance_center());
  for (int k = 0; k < 50; ++k) {
    const auto t = e.tick({0, 0, 0, false}, est);
    EXPECT_EQ(t.phase.kind, PhaseKind::Idle);
    EXPECT_NEAR(t.x_ref[0][0], 0.0, 1e-15);
    EXPECT_NEAR(t.x_ref[1][0], 0.0, 1e-15);
    EXPECT_NEAR(t.u[0].zmp, 0.0, 1e-12);
    EXPECT_NEAR(t.u[1].zmp, 0.0, 1e-12);
    EXPECT_NEAR(t.u[0].torso_accel, 0.0, 1e-12);
    EXPECT_FALSE(t.emergency);
  }
}

TEST(WalkEngine, PhaseSequenceAndStepTiming) {
  EngineConfig cfg;
  cfg.emergency.enabled = false;  // the frozen estimate would trip it
  WalkEngine e{cfg};
  const auto est = at_rest(e.stance_center());
  std::vector<PhaseKind> seq;
  std::vector<long> ss_lengths;
  long run = 0;
  for (int k = 0; k < 200; ++k) {
    const auto t = e.tick({0, 0, 0, k >= 5}, est);
    if (seq.empty() || seq.back() != t.phase.kind) seq.push_back(t.phase.kind);
    if (t.phase.kind == PhaseKind::SingleSupport) {
      if (t.phase.timer == 0.0 && run > 0) {
        ss_lengths.push_back(run);
        run = 0;
      }
      ++run;
    }
  }
  ASSERT_GE(seq.size(), 3u);
  EXPECT_EQ(seq[0], PhaseKind::Idle);
  EXPECT_EQ(seq[1], PhaseKind::Initialize);
  EXPECT_EQ(seq[2], PhaseKind::SingleSupport);
  EXPECT_EQ(seq.size(), 3u);  // T_ds = 0: SS restarts directly
  ASSERT_FALSE(ss_lengths.empty());
  for (long n : ss_lengths) EXPECT_EQ(n, std::lround(cfg.gait.T_ss / cfg.dt));
  EXPECT_GT(e.steps_taken(), 5);
}

TEST(WalkEngine, DoubleSupportIsVisitedWhenItHasDuration) {
  EngineConfig cfg;
  cfg.emergency.enabled = false;
  cfg.gait.T_ds = 0.06;
  WalkEngine e{cfg};
  const auto est = at_rest(e.stance_center());
  int ds = 0;
  PhaseKind prev = PhaseKind::Idle;
  for (int k = 0; k < 200; ++k) {
    const auto t = e.tick({0, 0, 0, true}, est);
    if (t.phase.kind == PhaseKind::DoubleSupport) {
      ++ds;
      EXPECT_TRUE(prev == PhaseKind::SingleSupport || prev == PhaseKind::DoubleSupport);
    }
    prev = t.phase.kind;
  }
  EXPECT_GT(ds, 0);
}

TEST(WalkEngine, ZeroResidualIsIdentity) {
  WalkEngine a{EngineConfig{}}, b{EngineConfig{}};
  auto est = at_rest(a.stance_center());
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 0.01);
  for (int k = 0; k < 300; ++k) {
    est[0].x_hat[0] += n(rng);
    est[1].x_hat[1] += n(rng);
    const auto ta = a.tick({0.05, 0, 0, true}, est);
    const auto tb = b.tick({0.05, 0, 0, true}, est, Residual{});
    ASSERT_EQ(ta.u, tb.u) << k;
    ASSERT_EQ(ta.x_ref[0], tb.x_ref[0]);
    ASSERT_EQ(ta.x_ref[1], tb.x_ref[1]);
  }
}

TEST(WalkEngine, ResidualsAreClampedAndDzReachesTheNextStep) {
  EngineConfig cfg;
  WalkEngine e{cfg};
  const auto est = at_rest(e.stance_center());
  Residual r;
  r.dz_com = 1.0;
  r.dthetadd = {-1e3, 1e3};
  double seen_height = 0.0;
  for (int k = 0; k < 120; ++k) {
    const auto t = e.tick({0, 0, 0, true}, est, r);
    EXPECT_LE(std::abs(t.residual.dz_com), 0.03 + 1e-15);
    EXPECT_DOUBLE_EQ(t.residual.dz_com, 0.03);
    EXPECT_DOUBLE_EQ(t.residual.dthetadd[0], -cfg.residual.dthetadd_max);
    EXPECT_DOUBLE_EQ(t.residual.dthetadd[1], cfg.residual.dthetadd_max);
    if (t.phase.kind == PhaseKind::SingleSupport) seen_height = t.step_com_height;
  }
  EXPECT_NEAR(seen_height, cfg.gait.z_0 + cfg.gait.A_z + 0.03, 1e-12);
}

TEST(WalkEngine, TicksAreDeterministic) {
  WalkEngine a{EngineConfig{}}, b{EngineConfig{}};
  const auto est = at_rest(a.stance_center());
  for (int k = 0; k < 400; ++k) {
    const WalkCommand c{0.05, 0.02, k > 200 ? 8.0 : 0.0, true};
    const auto ta = a.tick(c, est);
    const auto tb = b.tick(c, est);
    ASSERT_EQ(ta.u, tb.u);
    ASSERT_EQ(ta.references.swing_foot, tb.references.swing_foot);
  }
}

TEST(WalkEngine, LipmVariantLeavesTheTorsoAlone) {
  EngineConfig cfg;
  cfg.variant = ModelVariant::Lipm;
  WalkEngine e{cfg};
  auto est = at_rest(e.stance_center());
  est[0].x_hat[2] = 0.1;
  for (int k = 0; k < 100; ++k) {
    const auto t = e.tick({0.05, 0, 0, true}, est);
    EXPECT_EQ(t.u[0].torso_accel, 0.0);
    EXPECT_EQ(t.u[1].torso_accel, 0.0);
  }
  EXPECT_EQ(e.controller_params().m_to, 0.0);
}

TEST(WalkEngine, WalkingInPlaceDoesNotDrift) {
  EngineConfig ec;
  PlantConfig pc;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = run_episode(ec, pc, CommandSchedule::constant({0, 0, 0, true}), {},
                               {10.0, true}, seed);
    ASSERT_FALSE(r.fell) << r.reason;
    Vec2 mean = Vec2::Zero();
    int n = 0;
    for (const auto& t : r.trace) {
      mean += Vec2(t.state.axes[0].x, t.state.axes[1].x);
      ++n;
    }
    mean /= n;
    EXPECT_LE(mean.norm(), 0.05);
    EXPECT_LE(r.displacement.norm(), 0.05);
  }
}

TEST(WalkEngine, SingleSupportNeverOverrunsTheStep) {
  EngineConfig ec;
  PlantConfig pc;
  pc.mismatch_range = 0.1;
  pc.pushes = {{3.0, 0, 0.4}, {5.0, 1, -0.3}};
  const auto r = run_episode(ec, pc, CommandSchedule::constant({0.05, 0, 0, true}), {},
                             {8.0, true}, 7);
  for (const auto& t : r.trace) {
    if (t.tick.phase.kind == PhaseKind::SingleSupport) {
      EXPECT_LT(t.tick.phase.timer, ec.gait.T_ss - 1e-9);
    }
  }
}

}  // namespace
}  // namespace biped
