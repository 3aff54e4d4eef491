#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string_view>
#include <thread>
#include <vector>

#include "biped/error.hpp"
#include "biped/planning.hpp"
#include "biped/sim.hpp"

namespace biped {

inline constexpr int kGenes = 8;
inline constexpr std::array<std::string_view, kGenes> kGeneNames{
    "t_ss_s", "step_len_m", "step_width_m", "step_angle_deg",
    "swing_height_m", "torso_incl_deg", "com_amp_m", "torso_amp_deg"};

struct GeneBounds {
  double lo = 0.0;
  double hi = 0.0;
};

using Genome = std::array<double, kGenes>;
using GenomeBounds = std::array<GeneBounds, kGenes>;

inline GenomeBounds default_gene_bounds() {
  return {{{0.1, 0.4},
           {0.0, 0.2},
           {-0.03, 0.03},
           {-0.87, 0.87},
           {0.005, 0.114},
           {-16.8, 16.8},
           {-0.012, 0.012},
           {-5.76, 5.76}}};
}

/// Slow forward walk used to start the search.
inline Genome slow_walk_genome() { return {0.2, 0.022, 0.0, 0.0, 0.02, 0.0, 0.0, 0.0}; }

inline GaitParams apply_genome(GaitParams g, const Genome& x) {
  g.T_ss = x[0];
  g.x = x[1];
  g.y = x[2];
  g.alpha = x[3];
  g.z_sw = x[4];
  g.TI_to = x[5];
  g.A_z = x[6];
  g.A_to = x[7];
  return g;
}

inline Genome genome_of(const GaitParams& g) {
  return {g.T_ss, g.x, g.y, g.alpha, g.z_sw, g.TI_to, g.A_z, g.A_to};
}

inline bool within_bounds(const Genome& x, const GenomeBounds& b) {
  for (int i = 0; i < kGenes; ++i) {
    if (!(x[i] >= b[i].lo && x[i] <= b[i].hi)) return false;
  }
  return true;
}

/// Walking cost, lower is better: -|dx| + |dy| + 100 on a fall.
inline double fitness(const EpisodeResult& r) {
  return -std::abs(r.displacement.x()) + std::abs(r.displacement.y()) + (r.fell ? 100.0 : 0.0);
}

struct GaConfig {
  int population = 64;
  int generations = 300;
  double crossover_rate = 0.9;
  double mutation_rate = 0.2;
  double sigma_fraction = 0.05;  // per-gene sigma as a fraction of its range
  double init_sigma_fraction = 0.1;
  int elitism = 2;
  int tournament = 3;
  int repeats = 3;
  int workers = 1;
  std::uint64_t seed = 1;
  GenomeBounds bounds = default_gene_bounds();

  void validate() const {
    if (population < 2 || repeats < 1 || generations < 0 || tournament < 1 || elitism < 0 ||
        elitism > population || workers < 1) {
      throw Error("invalid-params", "GA configuration out of range");
    }
    for (const auto& b : bounds) {
      if (!(b.lo <= b.hi)) throw Error("invalid-params", "gene bounds inverted");
    }
  }
};

/// Episode fitness of one genome for one RNG stream.
using EpisodeFitness = std::function<double(const Genome&, std::uint64_t seed)>;

/// Forward-walk episodes on the simulated plant.
struct WalkFitness {
  EngineConfig engine;
  PlantConfig plant;
  double episode_time = 10.0;

  double operator()(const Genome& x, std::uint64_t seed) const {
    EngineConfig ec = engine;
    ec.gait = apply_genome(ec.gait, x);
    const auto sched = CommandSchedule::constant({x[1], x[2], x[3], true});
    try {
      return fitness(run_episode(ec, plant, sched, {}, {episode_time, false}, seed));
    } catch (const Error&) {
      // Genomes the planner rejects count as a fall without progress.
      return 100.0;
    }
  }
};

/// Mean fitness over `repeats` independent streams.
inline double evaluate(const Genome& x, int repeats, const EpisodeFitness& f, std::uint64_t seed) {
  double sum = 0.0;
  for (int r = 0; r < repeats; ++r) sum += f(x, derive_seed(seed, static_cast<std::uint64_t>(r)));
  return sum / repeats;
}

/// Evaluates all genomes with common seeds; results are placed by index so
/// the outcome does not depend on the worker count.
inline std::vector<double> evaluate_population(const std::vector<Genome>& pop, int repeats,
                                               const EpisodeFitness& f, std::uint64_t seed,
                                               int workers) {
  std::vector<double> out(pop.size());
  const auto n = pop.size();
  auto job = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += static_cast<std::size_t>(workers)) {
      out[i] = evaluate(pop[i], repeats, f, seed);
    }
  };
  if (workers <= 1) {
    job(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(job, static_cast<std::size_t>(w));
    for (auto& t : threads) t.join();
  }
  return out;
}

struct Individual {
  Genome genes{};
  double fitness = 0.0;
};

inline Genome mutate(Genome x, const GaConfig& cfg, double rate, double sigma_fraction, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < kGenes; ++i) {
    const auto& b = cfg.bounds[i];
    if (u(rng) < rate) x[i] += sigma_fraction * (b.hi - b.lo) * n(rng);
    x[i] = std::clamp(x[i], b.lo, b.hi);
  }
  return x;
}

/// Next generation: elites copied unchanged, the rest bred by tournament
/// selection, uniform crossover and clipped Gaussian mutation.
inline std::vector<Genome> evolve(const std::vector<Individual>& pop, const GaConfig& cfg, Rng& rng) {
  std::vector<std::size_t> order(pop.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pop[a].fitness < pop[b].fitness; });

  std::vector<Genome> next;
  next.reserve(pop.size());
  for (int e = 0; e < cfg.elitism && e < static_cast<int>(pop.size()); ++e) {
    next.push_back(pop[order[e]].genes);
  }
  std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto select = [&]() -> const Genome& {
    std::size_t best = pick(rng);
    for (int k = 1; k < cfg.tournament; ++k) {
      const std::size_t c = pick(rng);
      if (pop[c].fitness < pop[best].fitness) best = c;
    }
    return pop[best].genes;
  };
  while (next.size() < pop.size()) {
    Genome child = select();
    const Genome& other = select();
    if (u(rng) < cfg.crossover_rate) {
      for (int i = 0; i < kGenes; ++i) {
        if (u(rng) < 0.5) child[i] = other[i];
      }
    }
    next.push_back(mutate(child, cfg, cfg.mutation_rate, cfg.sigma_fraction, rng));
  }
  return next;
}

struct GaHistoryEntry {
  int generation = 0;
  double best = 0.0;  // best so far
  double mean = 0.0;  // population mean of the evaluated generation
};

struct GaResult {
  Genome best{};
  double best_fitness = 0.0;
  double seed_fitness = 0.0;
  std::vector<GaHistoryEntry> history;
};

/// Runs the search from a seed genome. Elites keep the fitness they were
/// evaluated with, so the best-so-far value never increases.
inline GaResult run_ga(const GaConfig& cfg, const Genome& seed_genome, const EpisodeFitness& f,
                       const std::function<void(const GaHistoryEntry&)>& on_generation = {}) {
  cfg.validate();
  Genome start = seed_genome;
  for (int i = 0; i < kGenes; ++i) start[i] = std::clamp(start[i], cfg.bounds[i].lo, cfg.bounds[i].hi);

  Rng rng(derive_seed(cfg.seed, 0xA11CE));
  GaResult res;
  res.seed_fitness = evaluate(start, cfg.repeats, f, derive_seed(cfg.seed, 0));
  res.best = start;
  res.best_fitness = res.seed_fitness;
  if (cfg.generations == 0) return res;

  std::vector<Genome> genomes{start};
  while (static_cast<int>(genomes.size()) < cfg.population) {
    genomes.push_back(mutate(start, cfg, 1.0, cfg.init_sigma_fraction, rng));
  }
  std::vector<Individual> pop(genomes.size());
  // The seed keeps its measured fitness and acts as the first elite.
  pop[0] = {start, res.seed_fitness};
  int carried = 1;

  for (int gen = 1; gen <= cfg.generations; ++gen) {
    const std::uint64_t gseed = derive_seed(cfg.seed, static_cast<std::uint64_t>(gen));
    std::vector<Genome> todo(genomes.begin() + carried, genomes.end());
    const auto fit = evaluate_population(todo, cfg.repeats, f, gseed, cfg.workers);
    double sum = 0.0;
    for (std::size_t i = 0; i < genomes.size(); ++i) {
      if (static_cast<int>(i) >= carried) pop[i] = {genomes[i], fit[i - carried]};
      sum += pop[i].fitness;
      if (pop[i].fitness < res.best_fitness) {
        res.best_fitness = pop[i].fitness;
        res.best = pop[i].genes;
      }
    }
    GaHistoryEntry h{gen, res.best_fitness, sum / static_cast<double>(genomes.size())};
    res.history.push_back(h);
    if (on_generation) on_generation(h);
    if (gen == cfg.generations) break;

    // Elites go first in the next population and keep their fitness.
    std::vector<std::size_t> order(pop.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pop[a].fitness < pop[b].fitness; });
    std::vector<Individual> elites;
    for (int e = 0; e < cfg.elitism; ++e) elites.push_back(pop[order[e]]);
    genomes = evolve(pop, cfg, rng);
    carried = cfg.elitism;
    for (int e = 0; e < carried; ++e) pop[e] = elites[e];
  }
  return res;
}

}  // namespace biped
