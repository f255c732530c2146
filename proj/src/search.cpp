#include "crna/search.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

#include "crna/error.hpp"

namespace crna::search {

SearchSpace SearchSpace::full() {
  SearchSpace s;
  s.sample = [](Rng& rng) { return arch::random_genome(rng); };
  s.resample_gene = [](arch::Genome& g, int gene, Rng& rng) {
    g.genes[static_cast<std::size_t>(gene)] =
        rng.uniform_int(0, arch::gene_cardinality(gene) - 1);
  };
  return s;
}

EvoSearch::EvoSearch(EvoConfig cfg, Evaluator evaluator,
                     surrogate::SurrogateModel* surrogate, SearchSpace space)
    : cfg_(cfg),
      evaluator_(std::move(evaluator)),
      surrogate_(surrogate),
      space_(std::move(space)),
      rng_(cfg.seed) {
  if (cfg_.population < 2) {
    throw ConfigError("search: population must be at least 2");
  }
  if (cfg_.archive_per_gen < 1 || cfg_.archive_per_gen > cfg_.population) {
    throw ConfigError("search: m must lie in [1, N]");
  }
  if (cfg_.crossover_rate < 0 || cfg_.crossover_rate > 1 ||
      cfg_.mutation_prob < 0 || cfg_.mutation_prob > 1) {
    throw ConfigError("search: rates must lie in [0, 1]");
  }
  if (!evaluator_) throw ConfigError("search: missing evaluator");
  if (!surrogate_ || !surrogate_->fitted()) {
    throw ConfigError("search: requires a fitted surrogate");
  }
}

bool EvoSearch::archived(const arch::Genome& g) const {
  return archive_index_.count(g) != 0;
}

arch::Genome EvoSearch::sample_unarchived() {
  for (int tries = 0; tries < 100000; ++tries) {
    arch::Genome g = space_.sample(rng_);
    if (!archived(g)) return g;
  }
  throw ConfigError("search: space exhausted while sampling fresh genomes");
}

void EvoSearch::evaluate_and_archive(const std::vector<arch::Genome>& genomes,
                                     bool abort_on_failure) {
  std::vector<surrogate::Pair> fresh;
  for (const arch::Genome& g : genomes) {
    double ra;
    try {
      ra = evaluator_(g);
    } catch (const std::exception& e) {
      if (abort_on_failure) throw;
      std::cerr << "search: evaluation failed for " << g.to_string() << ": "
                << e.what() << "; individual skipped\n";
      continue;
    }
    archive_index_.emplace(g, archive_.size());
    archive_.push_back({g, ra, generation_});
    fresh.push_back({g, ra});
  }
  if (!fresh.empty()) {
    surrogate_->finetune_high_fidelity(fresh, cfg_.finetune_epochs,
                                       cfg_.finetune_lr);
  }
}

void EvoSearch::initialize() {
  if (initialized_) throw StateError("search: already initialized");
  population_.clear();
  std::vector<arch::Genome> initial;
  for (int i = 0; i < cfg_.population; ++i) {
    // initial genomes are distinct so the whole population enters the archive
    for (int tries = 0;; ++tries) {
      arch::Genome g = space_.sample(rng_);
      bool dup = std::find(initial.begin(), initial.end(), g) != initial.end();
      if (!dup) {
        initial.push_back(g);
        break;
      }
      if (tries > 100000) {
        throw ConfigError("search: space too small for the population size");
      }
    }
  }
  generation_ = 0;
  evaluate_and_archive(initial, /*abort_on_failure=*/true);
  population_ = std::move(initial);
  trace_.push_back({0, best().ra, archive_.size()});
  initialized_ = true;
}

void EvoSearch::step_generation() {
  if (!initialized_) throw StateError("search: initialize first");

  // surrogate screening values for the current population
  std::vector<double> pred(population_.size());
  for (std::size_t i = 0; i < population_.size(); ++i) {
    pred[i] = surrogate_->predict(population_[i]);
  }

  auto tournament = [&]() -> const arch::Genome& {
    int a = rng_.uniform_int(0, cfg_.population - 1);
    int b = rng_.uniform_int(0, cfg_.population - 1);
    return pred[static_cast<std::size_t>(a)] >= pred[static_cast<std::size_t>(b)]
               ? population_[static_cast<std::size_t>(a)]
               : population_[static_cast<std::size_t>(b)];
  };

  std::vector<arch::Genome> offspring;
  for (int i = 0; i < cfg_.population; ++i) {
    arch::Genome child = tournament();
    if (rng_.uniform() < cfg_.crossover_rate) {
      const arch::Genome& other = tournament();
      for (int gene = 0; gene < arch::kGenomeLength; ++gene) {
        if (rng_.uniform() < 0.5) {
          child.genes[static_cast<std::size_t>(gene)] =
              other.genes[static_cast<std::size_t>(gene)];
        }
      }
    }
    for (int gene = 0; gene < arch::kGenomeLength; ++gene) {
      if (rng_.uniform() < cfg_.mutation_prob) {
        space_.resample_gene(child, gene, rng_);
      }
    }
    offspring.push_back(child);
  }

  // rank parents + offspring by surrogate prediction
  std::vector<arch::Genome> pool = population_;
  pool.insert(pool.end(), offspring.begin(), offspring.end());
  std::vector<double> pool_pred = pred;
  for (const arch::Genome& g : offspring) {
    pool_pred.push_back(surrogate_->predict(g));
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pool_pred[a] > pool_pred[b];
  });

  std::vector<arch::Genome> next_pop;
  for (std::size_t i = 0; i < static_cast<std::size_t>(cfg_.population); ++i) {
    next_pop.push_back(pool[order[i]]);
  }

  // the m best-ranked unarchived pool members get true evaluations; slots
  // that would re-evaluate archived genomes are filled with fresh random
  // genomes instead (diversity rule: replace, then evaluate)
  std::vector<arch::Genome> candidates;
  for (std::size_t i = 0;
       i < order.size() &&
       candidates.size() < static_cast<std::size_t>(cfg_.archive_per_gen);
       ++i) {
    const arch::Genome& g = pool[order[i]];
    if (archived(g)) continue;
    if (std::find(candidates.begin(), candidates.end(), g) != candidates.end()) {
      continue;
    }
    candidates.push_back(g);
  }
  while (candidates.size() < static_cast<std::size_t>(cfg_.archive_per_gen)) {
    arch::Genome fresh = sample_unarchived();
    if (std::find(candidates.begin(), candidates.end(), fresh) ==
        candidates.end()) {
      candidates.push_back(fresh);
    }
  }

  ++generation_;
  evaluate_and_archive(candidates, /*abort_on_failure=*/false);
  population_ = std::move(next_pop);
  trace_.push_back({generation_, best().ra, archive_.size()});
}

void EvoSearch::run() {
  if (!initialized_) initialize();
  for (int g = 0; g < cfg_.generations; ++g) step_generation();
}

ArchiveEntry EvoSearch::best() const {
  if (archive_.empty()) throw StateError("search: archive is empty");
  std::size_t best_idx = 0;
  for (std::size_t i = 1; i < archive_.size(); ++i) {
    if (archive_[i].ra > archive_[best_idx].ra) best_idx = i;
  }
  return archive_[best_idx];
}

}  // namespace crna::search
