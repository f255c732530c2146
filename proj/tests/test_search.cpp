#include "crna/search.hpp"

#include <algorithm>
#include <set>

#include "crna/error.hpp"
#include "doctest.h"

using namespace crna;
using namespace crna::search;
using arch::Genome;

namespace {

// Cheap deterministic fitness in [0,1].
double gene_fitness(const Genome& g) {
  double acc = 0;
  for (int i = 0; i < arch::kGenomeLength; ++i) {
    acc += static_cast<double>(g.genes[static_cast<std::size_t>(i)]) /
           static_cast<double>(arch::gene_cardinality(i) - 0.5);
  }
  return acc / (2.0 * arch::kGenomeLength);
}

surrogate::SurrogateModel quick_surrogate(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<surrogate::Pair> pairs;
  surrogate::SurrogateConfig cfg;
  cfg.hidden = {16};
  for (int i = 0; i < 24; ++i) {
    Genome g = arch::random_genome(rng);
    pairs.push_back({g, gene_fitness(g)});
  }
  return surrogate::fit_low_fidelity(pairs, 120, 5e-3, seed, cfg);
}

EvoConfig quick_cfg(std::uint64_t seed, int n = 8, int g = 3, int m = 2) {
  EvoConfig cfg;
  cfg.population = n;
  cfg.generations = g;
  cfg.archive_per_gen = m;
  cfg.seed = seed;
  cfg.finetune_epochs = 20;
  return cfg;
}

// 256-genome sub-space: the eight op genes of the normal cell range over
// {3, 4}; everything else is pinned to zero.
const std::vector<int>& free_positions() {
  static std::vector<int> pos = [] {
    std::vector<int> p;
    for (int node = 0; node < 4; ++node) {
      for (int slot = 0; slot < 2; ++slot) {
        p.push_back(Genome::gene_index(0, node, slot, 0));
      }
    }
    return p;
  }();
  return pos;
}

SearchSpace restricted_space() {
  SearchSpace s;
  s.sample = [](Rng& rng) {
    Genome g{};
    for (int pos : free_positions()) {
      g.genes[static_cast<std::size_t>(pos)] = rng.uniform_int(0, 1) + 3;
    }
    return g;
  };
  s.resample_gene = [](Genome& g, int gene, Rng& rng) {
    const auto& fp = free_positions();
    if (std::find(fp.begin(), fp.end(), gene) == fp.end()) return;
    g.genes[static_cast<std::size_t>(gene)] = rng.uniform_int(0, 1) + 3;
  };
  return s;
}

// Fitness over the sub-space: fraction of free genes matching the target
// pattern, with a small deterministic tie-breaker.
double restricted_fitness(const Genome& g) {
  int matches = 0;
  for (int pos : free_positions()) {
    if (g.genes[static_cast<std::size_t>(pos)] == 4) ++matches;
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int v : g.genes) h = (h ^ static_cast<std::uint64_t>(v)) * 0x100000001b3ull;
  double tie = static_cast<double>(h >> 40) / static_cast<double>(1 << 24);
  return 0.1 + 0.8 * matches / 8.0 + 0.05 * tie;
}

std::vector<Genome> enumerate_restricted() {
  std::vector<Genome> all;
  for (int bits = 0; bits < 256; ++bits) {
    Genome g{};
    for (int i = 0; i < 8; ++i) {
      g.genes[static_cast<std::size_t>(free_positions()[static_cast<std::size_t>(i)])] =
          ((bits >> i) & 1) + 3;
    }
    all.push_back(g);
  }
  return all;
}

}  // namespace

TEST_CASE("evo config carries the protocol defaults") {
  EvoConfig cfg;
  CHECK(cfg.population == 20);
  CHECK(cfg.generations == 20);
  CHECK(cfg.archive_per_gen == 3);
  CHECK(cfg.crossover_rate == doctest::Approx(0.9));
  CHECK(cfg.mutation_prob == doctest::Approx(1.0 / 32.0));
}

TEST_CASE("bad configurations are rejected") {
  auto sur = quick_surrogate(1);
  EvoConfig cfg = quick_cfg(1);
  cfg.archive_per_gen = cfg.population + 1;
  CHECK_THROWS_AS(EvoSearch(cfg, gene_fitness, &sur), ConfigError);
  cfg = quick_cfg(1);
  cfg.crossover_rate = 1.5;
  CHECK_THROWS_AS(EvoSearch(cfg, gene_fitness, &sur), ConfigError);
  surrogate::SurrogateModel unfitted;
  CHECK_THROWS_AS(EvoSearch(quick_cfg(1), gene_fitness, &unfitted),
                  ConfigError);
}

TEST_CASE("initialization fills the archive with N distinct evaluated genomes") {
  auto sur = quick_surrogate(2);
  EvoSearch s(quick_cfg(5, 10), gene_fitness, &sur);
  s.initialize();
  CHECK(s.archive().size() == 10);
  std::set<Genome> unique;
  for (const auto& e : s.archive()) {
    unique.insert(e.genome);
    CHECK(arch::is_valid(e.genome));
    CHECK(e.ra == doctest::Approx(gene_fitness(e.genome)));
    CHECK(e.generation == 0);
  }
  CHECK(unique.size() == 10);
  CHECK(sur.high_fidelity_count() == 10);
}

TEST_CASE("initialization is deterministic per seed") {
  auto sur1 = quick_surrogate(3);
  auto sur2 = quick_surrogate(3);
  EvoSearch a(quick_cfg(9, 6), gene_fitness, &sur1);
  EvoSearch b(quick_cfg(9, 6), gene_fitness, &sur2);
  a.initialize();
  b.initialize();
  for (std::size_t i = 0; i < a.archive().size(); ++i) {
    CHECK(a.archive()[i].genome == b.archive()[i].genome);
  }
  CHECK(a.population() == b.population());
}

TEST_CASE("degenerate operators: archive grows only via the diversity rule") {
  auto sur = quick_surrogate(4);
  EvoConfig cfg = quick_cfg(7, 6, 3, 2);
  cfg.crossover_rate = 0.0;
  cfg.mutation_prob = 0.0;
  EvoSearch s(cfg, gene_fitness, &sur);
  s.initialize();
  std::set<Genome> initial;
  for (const auto& e : s.archive()) initial.insert(e.genome);
  for (int g = 0; g < 3; ++g) {
    std::size_t before = s.archive().size();
    s.step_generation();
    CHECK(s.archive().size() - before <= 2);  // at most m per generation
    for (std::size_t i = before; i < s.archive().size(); ++i) {
      // offspring are copies of archived parents, so every evaluated
      // genome must be a random replacement, never a population member
      CHECK(initial.count(s.archive()[i].genome) == 0);
    }
  }
}

TEST_CASE("population size stays constant and genomes stay valid") {
  auto sur = quick_surrogate(5);
  EvoSearch s(quick_cfg(11, 8, 4, 2), gene_fitness, &sur);
  s.run();
  CHECK(s.population().size() == 8);
  for (const auto& g : s.population()) CHECK(arch::is_valid(g));
  CHECK(s.generation() == 4);
}

TEST_CASE("archive best trace is non-decreasing") {
  auto sur = quick_surrogate(6);
  EvoSearch s(quick_cfg(13, 8, 5, 2), gene_fitness, &sur);
  s.run();
  const auto& tr = s.trace();
  REQUIRE(tr.size() == 6);  // init + 5 generations
  for (std::size_t i = 1; i < tr.size(); ++i) {
    CHECK(tr[i].best_ra >= tr[i - 1].best_ra);
  }
  CHECK(s.best().ra == tr.back().best_ra);
}

TEST_CASE("full run is reproducible bit for bit") {
  auto sur1 = quick_surrogate(7);
  auto sur2 = quick_surrogate(7);
  EvoSearch a(quick_cfg(17, 6, 4, 2), gene_fitness, &sur1);
  EvoSearch b(quick_cfg(17, 6, 4, 2), gene_fitness, &sur2);
  a.run();
  b.run();
  REQUIRE(a.archive().size() == b.archive().size());
  for (std::size_t i = 0; i < a.archive().size(); ++i) {
    CHECK(a.archive()[i].genome == b.archive()[i].genome);
    CHECK(a.archive()[i].ra == b.archive()[i].ra);
    CHECK(a.archive()[i].generation == b.archive()[i].generation);
  }
}

TEST_CASE("failed evaluations are skipped, not fatal") {
  auto sur = quick_surrogate(8);
  int calls = 0;
  auto flaky = [&calls](const Genome& g) {
    ++calls;
    if (calls > 10 && calls % 3 == 0) {
      throw NumericError("synthetic evaluation failure");
    }
    return gene_fitness(g);
  };
  EvoSearch s(quick_cfg(19, 8, 4, 2), flaky, &sur);
  s.run();  // must not throw after initialization
  CHECK(s.archive().size() >= 8);
  CHECK(s.archive().size() < 8 + 4 * 2 + 1);
}

TEST_CASE("search finds top genomes in an enumerable 256-genome space") {
  // exhaustive oracle ranking
  auto all = enumerate_restricted();
  std::vector<double> scores;
  for (const auto& g : all) scores.push_back(restricted_fitness(g));
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double top10_threshold = scores[order[25]];  // top 10% of 256

  int hits = 0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng rng(seed);
    std::vector<surrogate::Pair> pairs;
    surrogate::SurrogateConfig scfg;
    scfg.hidden = {16};
    SearchSpace space = restricted_space();
    for (int i = 0; i < 16; ++i) {
      Genome g = space.sample(rng);
      pairs.push_back({g, restricted_fitness(g)});
    }
    auto sur = surrogate::fit_low_fidelity(pairs, 120, 5e-3, seed, scfg);
    EvoConfig cfg = quick_cfg(seed, 10, 6, 3);
    EvoSearch s(cfg, restricted_fitness, &sur, space);
    s.run();
    if (s.best().ra >= top10_threshold) ++hits;
  }
  CHECK(hits >= 2);
}
