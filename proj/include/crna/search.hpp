#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "crna/genome.hpp"
#include "crna/rng.hpp"
#include "crna/surrogate.hpp"

namespace crna::search {

struct EvoConfig {
  int population = 20;       // N
  int generations = 20;      // G
  int archive_per_gen = 3;   // m: high-fidelity evaluations per generation
  double crossover_rate = 0.9;
  double mutation_prob = 1.0 / 32.0;
  std::uint64_t seed = 0;
  int finetune_epochs = 100;
  double finetune_lr = 1e-3;
};

struct ArchiveEntry {
  arch::Genome genome;
  double ra = 0.0;
  int generation = 0;
};

struct GenerationTrace {
  int generation = 0;
  double best_ra = 0.0;
  std::size_t archive_size = 0;
};

// Genome space the operators act in. The default is the full encoding;
// tests may restrict it to an enumerable sub-space.
struct SearchSpace {
  std::function<arch::Genome(Rng&)> sample;
  std::function<void(arch::Genome&, int gene, Rng&)> resample_gene;
  static SearchSpace full();
};

// High-fidelity evaluator: genome -> comprehensive robust accuracy.
using Evaluator = std::function<double(const arch::Genome&)>;

// Archive-based evolutionary search: surrogate-screened offspring, m true
// evaluations per generation, online surrogate fine-tuning. The archive is
// the source of truth; no surrogate value ever enters it.
class EvoSearch {
 public:
  EvoSearch(EvoConfig cfg, Evaluator evaluator,
            surrogate::SurrogateModel* surrogate,
            SearchSpace space = SearchSpace::full());

  void initialize();
  void step_generation();
  void run();  // initialize (if needed) + G generations

  bool initialized() const { return initialized_; }
  int generation() const { return generation_; }
  const std::vector<arch::Genome>& population() const { return population_; }
  const std::vector<ArchiveEntry>& archive() const { return archive_; }
  const std::vector<GenerationTrace>& trace() const { return trace_; }
  ArchiveEntry best() const;

 private:
  bool archived(const arch::Genome& g) const;
  arch::Genome sample_unarchived();
  void evaluate_and_archive(const std::vector<arch::Genome>& genomes,
                            bool abort_on_failure);

  EvoConfig cfg_;
  Evaluator evaluator_;
  surrogate::SurrogateModel* surrogate_;
  SearchSpace space_;
  Rng rng_;
  std::vector<arch::Genome> population_;
  std::vector<ArchiveEntry> archive_;
  std::map<arch::Genome, std::size_t> archive_index_;
  std::vector<GenerationTrace> trace_;
  int generation_ = 0;
  bool initialized_ = false;
};

}  // namespace crna::search
