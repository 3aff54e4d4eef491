#include "biped/sim.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

namespace biped {
namespace {

std::string trace_csv(const EpisodeResult& r) {
  std::ostringstream os;
  os.precision(17);
  write_trace_csv_header(os);
  for (const auto& t : r.trace) write_trace_csv_row(os, t);
  return os.str();
}

TEST(PlantStep, NoiseFreeMatchesDiscreteStep) {
  const auto model = discretize_model(ModelParams{}, 0.02);
  PlantState s;
  s.axes[0] = {0.01, 0.1, 0.02, -0.3};
  s.axes[1] = {-0.02, 0.05, 0.0, 0.1};
  const std::array<ControlInput, 2> u{ControlInput{0.03, 1.0}, ControlInput{-0.01, -2.0}};
  Rng rng(1);
  const auto [next, y] = plant_step(s, u, model, 0.0, rng);
  for (int a = 0; a < 2; ++a) {
    EXPECT_EQ(next.axes[a], step_discrete(model, s.axes[a], u[a]));
    EXPECT_EQ(y[a], next.axes[a].vec());
  }
}

TEST(PlantStep, NonFiniteStateIsReported) {
  const auto model = discretize_model(ModelParams{}, 0.02);
  PlantState s;
  s.axes[1].x = std::nan("");
  Rng rng(1);
  try {
    plant_step(s, {}, model, 0.0, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "plant-diverged");
  }
}

TEST(PlantStep, MeasurementNoiseHasTheConfiguredSpread) {
  const auto model = discretize_model(ModelParams{}, 0.02);
  Rng rng(99);
  PlantState s;
  double sum = 0, sum2 = 0;
  long n = 0;
  while (n < 100000) {
    const auto [next, y] = plant_step(s, {}, model, 6.25e-4, rng);
    for (int a = 0; a < 2; ++a) {
      for (int i = 0; i < 4 && n < 100000; ++i, ++n) {
        const double e = y[a][i] - next.axes[a].vec()[i];
        sum += e;
        sum2 += e * e;
      }
    }
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sum2 / n - mean * mean);
  EXPECT_NEAR(sd, 0.025, 0.001);
}

TEST(CheckFall, Examples) {
  PlantConfig cfg;
  const Footstep f{0.0, 0.0, 0.0, 0};
  PlantState s;
  EXPECT_FALSE(check_fall(s, f, cfg));
  s.axes[0].x = 1.0;
  EXPECT_TRUE(check_fall(s, f, cfg));
  s.axes[0].x = 0.0;
  s.axes[1].theta = cfg.theta_limit;
  EXPECT_TRUE(check_fall(s, f, cfg));
  s.axes[1].theta = std::nextafter(cfg.theta_limit, 0.0);
  EXPECT_FALSE(check_fall(s, f, cfg));
}

TEST(Episode, PushAddsTheImpulseAtItsTick) {
  EngineConfig ec;
  PlantConfig quiet;
  quiet.meas_noise_var = 0.0;
  PlantConfig pushed = quiet;
  pushed.pushes = {{0.5, 0, 0.1}};
  Episode a(ec, quiet, 3), b(ec, pushed, 3);
  for (int k = 0; k < 26; ++k) {
    const WalkCommand c{0, 0, 0, true};
    a.step(c);
    b.step(c);
    const double dv = b.state().axes[0].xd - a.state().axes[0].xd;
    if (k < 25) {
      ASSERT_EQ(dv, 0.0) << k;
    } else {
      EXPECT_NEAR(dv, 0.1, 1e-15);
      EXPECT_EQ(b.state().axes[0].x, a.state().axes[0].x);
    }
  }
}

TEST(Episode, MismatchFactorsAreDrawnPerEpisode) {
  EngineConfig ec;
  PlantConfig pc;
  pc.mismatch_range = 0.1;
  std::set<double> seen;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Episode ep(ec, pc, s);
    for (double f : ep.mismatch_factors()) {
      EXPECT_GE(f, 0.9);
      EXPECT_LE(f, 1.1);
    }
    seen.insert(ep.mismatch_factors()[0]);
  }
  EXPECT_EQ(seen.size(), 5u);
}

TEST(RunEpisode, ZeroTimeGivesEmptyResult) {
  const auto r = run_episode(EngineConfig{}, PlantConfig{}, {}, {}, {0.0, true}, 1);
  EXPECT_EQ(r.duration, 0.0);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_FALSE(r.fell);
  EXPECT_EQ(r.mean_speed, 0.0);
}

TEST(RunEpisode, StandingWithoutNoiseHolds) {
  PlantConfig pc;
  pc.meas_noise_var = 0.0;
  const auto r = run_episode(EngineConfig{}, pc, CommandSchedule::constant({0, 0, 0, false}),
                             {}, {10.0, false}, 1);
  EXPECT_FALSE(r.fell);
  EXPECT_NEAR(r.duration, 10.0, 1e-9);
  EXPECT_LT(r.displacement.norm(), 1e-12);
}

TEST(RunEpisode, SameSeedGivesIdenticalTraces) {
  PlantConfig pc;
  pc.mismatch_range = 0.1;
  pc.random_pushes = {1.0, 0.3, 0.05, 0.2, 1.0};
  const auto sched = CommandSchedule({{0, {0, 0, 0, true}}, {2, {0.05, 0.02, 5, true}}});
  const auto a = run_episode(EngineConfig{}, pc, sched, {}, {6.0, true}, 42);
  const auto b = run_episode(EngineConfig{}, pc, sched, {}, {6.0, true}, 42);
  const auto c = run_episode(EngineConfig{}, pc, sched, {}, {6.0, true}, 43);
  EXPECT_EQ(trace_csv(a), trace_csv(b));
  EXPECT_NE(trace_csv(a), trace_csv(c));
}

TEST(RunEpisode, MeanSpeedIsDisplacementOverDuration) {
  const auto r = run_episode(EngineConfig{}, PlantConfig{},
                             CommandSchedule::constant({0.05, 0, 0, true}), {}, {5.0, false}, 2);
  ASSERT_FALSE(r.fell);
  EXPECT_GT(r.displacement.x(), 0.5);
  EXPECT_DOUBLE_EQ(r.mean_speed, r.displacement.norm() / r.duration);
}

TEST(ClosedLoop, NoiseFreeMatchedTracking) {
  PlantConfig pc;
  pc.meas_noise_var = 0.0;
  // Regulation: error goes to zero.
  auto r = run_episode(EngineConfig{}, pc, CommandSchedule::constant({0, 0, 0, false}), {},
                       {5.0, true}, 1);
  EXPECT_LT(std::abs(r.trace.back().state.axes[0].x - r.trace.back().tick.x_ref[0][0]), 1e-9);
  // Walking: error stays bounded.
  r = run_episode(EngineConfig{}, pc, CommandSchedule::constant({0.05, 0.02, 5, true}), {},
                  {10.0, true}, 1);
  ASSERT_FALSE(r.fell);
  double worst = 0;
  for (const auto& t : r.trace) {
    for (int a = 0; a < 2; ++a) worst = std::max(worst, std::abs(t.state.axes[a].x - t.tick.x_ref[a][0]));
  }
  EXPECT_LT(worst, 0.01);
}

TEST(DeriveSeed, StreamsDiffer) {
  std::set<std::uint64_t> s;
  for (std::uint64_t i = 0; i < 1000; ++i) s.insert(derive_seed(7, i));
  EXPECT_EQ(s.size(), 1000u);
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}

}  // namespace
}  // namespace biped
