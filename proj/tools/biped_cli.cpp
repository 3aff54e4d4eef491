// biped: scenario runner for the walking workbench.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "biped/scenario.hpp"

namespace fs = std::filesystem;
using namespace biped;

namespace {

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string policy;
};

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw Error("io", "cannot write " + p.string());
  f.precision(17);
  return f;
}

void write_json(const fs::path& p, const json& j) {
  auto f = open_out(p);
  f << j.dump(2) << '\n';
}

Scenario resolve(const std::string& kind, const Options& o) {
  Scenario s;
  if (!o.config.empty()) s = load_scenario(o.config);
  if (!s.kind.empty() && s.kind != kind) {
    throw Error("config-invalid", "config is for \"" + s.kind + "\", not \"" + kind + "\"");
  }
  s.kind = kind;
  if (o.seed) s.seed = *o.seed;
  if (o.workers) s.workers = *o.workers;
  if (s.workers < 1) throw Error("config-invalid", "workers must be >= 1");
  s.ga.seed = s.seed;
  s.ga.workers = s.workers;
  s.ppo.seed = s.seed;
  s.ppo.workers = s.workers;
  // The manifest records the weights actually used.
  if (!o.policy.empty()) s.eval.policy = fs::absolute(o.policy).string();
  return s;
}

int run_track(const Scenario& s, const fs::path& out, json& summary) {
  auto fr = open_out(out / "track_regulation.csv");
  auto fs_ = open_out(out / "track_step.csv");
  const auto reg = run_tracking(s.engine, s.plant.meas_noise_var, s.track, false, derive_seed(s.seed, 0), &fr);
  const auto stp = run_tracking(s.engine, s.plant.meas_noise_var, s.track, true, derive_seed(s.seed, 1), &fs_);
  auto rep = [](const TrackRun& r) {
    return json{{"rms_error_m", r.rms_error},
                {"estimator_error_var", r.estimator_error_var},
                {"measurement_var", r.meas_var}};
  };
  summary["regulation"] = rep(reg);
  summary["step"] = rep(stp);
  // A tracking error beyond the fall margin counts as a fall.
  const bool fell = !(std::max(reg.rms_error, stp.rms_error) <= s.plant.fall_margin);
  summary["fell"] = fell;
  return fell ? 1 : 0;
}

int run_walk_scenario(const Scenario& s, const fs::path& out, json& summary) {
  auto f = open_out(out / "trace.csv");
  const auto w = run_walk(s, &f);
  json timeline = json::array();
  for (const auto& [t, k] : w.result.phase_timeline) timeline.push_back({{"t_s", t}, {"phase", to_string(k)}});
  summary["fell"] = w.result.fell;
  summary["fall_reason"] = w.result.reason;
  summary["duration_s"] = w.result.duration;
  summary["steps"] = w.result.steps;
  summary["displacement_m"] = {w.result.displacement.x(), w.result.displacement.y()};
  summary["mean_speed_mps"] = w.result.mean_speed;
  summary["max_filtered_command_step"] = w.max_command_step;
  summary["filtered_command_step_bound"] = w.command_step_bound;
  summary["max_hip_reference_step_m"] = w.max_hip_ref_step;
  summary["phase_timeline"] = timeline;
  return w.result.fell ? 1 : 0;
}

int run_ga_scenario(const Scenario& s, const fs::path& out, json& summary) {
  WalkFitness wf{s.engine, s.plant, s.ga_episode};
  auto f = open_out(out / "fitness.csv");
  f << "gen,best,mean\n";
  const auto r = run_ga(s.ga, s.ga_seed, wf, [&](const GaHistoryEntry& h) {
    f << h.generation << ',' << h.best << ',' << h.mean << '\n';
    std::cerr << "gen " << h.generation << " best " << h.best << " mean " << h.mean << '\n';
  });
  write_json(out / "best_genome.json", genome_to_json(r.best));
  summary["seed_fitness"] = r.seed_fitness;
  summary["best_fitness"] = r.best_fitness;
  summary["improvement"] = r.seed_fitness != 0 ? (r.seed_fitness - r.best_fitness) / std::abs(r.seed_fitness) : 0.0;
  summary["best_genome"] = genome_to_json(r.best);
  return 0;
}

int run_train(const Scenario& s, const fs::path& out, json& summary) {
  auto f = open_out(out / "curve.csv");
  f << "timesteps,mean_return,episodes,mean_ratio,clip_fraction,value_loss\n";
  const auto r = train(residual_task(s, false), s.ppo, s.total_timesteps, [&](const CurvePoint& c) {
    f << c.timesteps << ',' << c.mean_return << ',' << c.episodes << ',' << c.stats.mean_ratio << ','
      << c.stats.clip_fraction << ',' << c.stats.value_loss << '\n';
    std::cerr << c.timesteps << " return " << c.mean_return << '\n';
  });
  write_json(out / "policy.json", policy_to_json(r.net, r.norm));
  summary["updates"] = r.updates;
  summary["final_mean_return"] = r.curve.empty() ? 0.0 : r.curve.back().mean_return;
  return 0;
}

json eval_json(const EvalSummary& e) {
  return {{"mean_return", e.mean_return}, {"median_length_s", e.median_length}, {"fall_rate", e.fall_rate}};
}

int run_eval(const Scenario& s, const fs::path& out, json& summary) {
  if (s.eval.policy.empty()) throw Error("config-invalid", "eval needs a policy (--policy)");
  const fs::path pp = s.base_dir / s.eval.policy;
  std::ifstream in(pp);
  if (!in) throw Error("config-invalid", "cannot open policy " + pp.string());
  json pj;
  try {
    pj = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("config-invalid", pp.string() + ": " + e.what());
  }
  const auto [net, norm] = policy_from_json(pj);
  const auto task = residual_task(s, true);
  const auto trained = evaluate_policy(net, norm, task, s.eval.episodes, derive_seed(s.seed, 7), s.workers);
  auto f = open_out(out / "episodes.csv");
  f << "episode,return,length_s,fell\n";
  for (std::size_t i = 0; i < trained.episodes.size(); ++i) {
    const auto& e = trained.episodes[i];
    f << i << ',' << e.ret << ',' << e.length << ',' << (e.fell ? 1 : 0) << '\n';
  }
  summary["trained"] = eval_json(trained);
  if (s.eval.compare_untrained) {
    const auto base = evaluate_policy(make_policy(s.ppo), RunningNorm(kObsDim), task, s.eval.episodes,
                                      derive_seed(s.seed, 7), s.workers);
    summary["untrained"] = eval_json(base);
    summary["return_ratio"] = base.mean_return != 0 ? trained.mean_return / base.mean_return : 0.0;
    summary["median_length_ratio"] = base.median_length != 0 ? trained.median_length / base.median_length : 0.0;
  }
  return 0;
}

int run_sweep(const Scenario& s, const fs::path& out, json& summary) {
  const auto r = push_sweep(s.engine, s.plant, s.sweep, s.seed, s.workers);
  auto f = open_out(out / "push_sweep.csv");
  f << "variant,trial,max_dv_mps\n";
  json means = json::object();
  for (std::size_t v = 0; v < r.variants.size(); ++v) {
    for (std::size_t t = 0; t < r.per_trial[v].size(); ++t) {
      f << to_string(r.variants[v]) << ',' << t << ',' << r.per_trial[v][t] << '\n';
    }
    means[std::string(to_string(r.variants[v]))] = r.mean[v];
  }
  summary["mean_max_dv_mps"] = means;
  return 0;
}

int dispatch(const std::string& kind, const Options& o) {
  const Scenario s = resolve(kind, o);
  const fs::path out(o.out);
  fs::create_directories(out);
  write_json(out / "manifest.json", to_json(s));
  json summary;
  summary["kind"] = kind;
  summary["seed"] = s.seed;
  summary["version"] = kVersion;
  const auto t0 = std::chrono::steady_clock::now();
  int rc = 0;
  if (kind == "track") rc = run_track(s, out, summary);
  else if (kind == "walk") rc = run_walk_scenario(s, out, summary);
  else if (kind == "optimize-ga") rc = run_ga_scenario(s, out, summary);
  else if (kind == "train-ppo") rc = run_train(s, out, summary);
  else if (kind == "eval") rc = run_eval(s, out, summary);
  else if (kind == "push-sweep") rc = run_sweep(s, out, summary);
  write_json(out / "summary.json", summary);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << kind << ": " << (rc == 0 ? "ok" : "scenario failed") << " in " << secs << " s, outputs in "
            << out.string() << '\n';
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Biped walking workbench: analytical gait stack, GA and PPO layers on a simulated plant"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Options o;
  std::string chosen;
  for (const auto& kind : scenario_kinds()) {
    auto* sub = app.add_subcommand(kind, "run the " + kind + " scenario");
    sub->add_option("--config", o.config, "scenario JSON (a manifest.json also works)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "master seed, overrides the config");
    sub->add_option("--workers", o.workers, "parallel workers, overrides the config");
    if (kind == "eval") sub->add_option("--policy", o.policy, "policy weights JSON from train-ppo");
    sub->callback([&chosen, kind] { chosen = kind; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    return dispatch(chosen, o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == "config-invalid" ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
