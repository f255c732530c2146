#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crna/attacks.hpp"
#include "crna/dataset.hpp"
#include "crna/genome.hpp"
#include "crna/network.hpp"

namespace crna::eval {

struct FidelityLevel {
  std::string label = "low";
  std::size_t samples = 100;

  static FidelityLevel paper_low() { return {"low", 100}; }
  static FidelityLevel paper_high() { return {"high", 5000}; }
  static FidelityLevel desk_low() { return {"low", 64}; }
  static FidelityLevel desk_high() { return {"high", 512}; }
};

struct EvaluationReport {
  arch::Genome genome;
  std::string fidelity_label;
  std::vector<int> eval_indices;   // original suite indices that were run
  std::vector<double> accuracies;  // one per executed evaluation
  std::vector<double> wall_seconds;
};

struct MergeGroup {
  int representative = 0;
  std::vector<int> members;  // includes the representative
  double coefficient = 1.0;
};

// Partition of the evaluation list into correlation-derived groups. Each
// group is represented by its earliest-indexed member; absorbed members are
// accounted for through the representative's coefficient.
struct MergePlan {
  double tau = 0.7;
  int total_evals = attack::kSuiteSize;
  std::vector<MergeGroup> groups;

  static MergePlan identity(int n);
  std::vector<int> representatives() const;
  bool is_identity() const;
  // Throws unless the groups partition 0..total_evals-1.
  void check_partition() const;

  std::string to_text(std::uint64_t config_hash) const;
  static MergePlan from_text(const std::string& text,
                             std::uint64_t* config_hash = nullptr);
  void save(const std::filesystem::path& path, std::uint64_t config_hash) const;
  static MergePlan load(const std::filesystem::path& path,
                        std::uint64_t* config_hash = nullptr);
};

struct CorrelationResult {
  std::size_t n = 0;
  std::vector<double> matrix;         // n*n, NaN where undefined
  std::vector<std::uint8_t> defined;  // n*n
  std::vector<std::vector<double>> accuracy_rows;  // one row per genome
  std::vector<arch::Genome> genomes;

  double at(std::size_t i, std::size_t j) const { return matrix[i * n + j]; }
  bool is_defined(std::size_t i, std::size_t j) const {
    return defined[i * n + j] != 0;
  }
  std::string matrix_csv(const std::vector<std::string>& names = {}) const;
  std::string samples_csv(const std::vector<std::string>& names = {}) const;
};

// Pearson correlation; sets *defined to false (and returns NaN) when either
// side has zero variance.
double pearson(const std::vector<double>& a, const std::vector<double>& b,
               bool* defined = nullptr);

// Spearman rank correlation (config-selectable alternative).
double spearman(const std::vector<double>& a, const std::vector<double>& b,
                bool* defined = nullptr);

// Kendall rank correlation (tau-b, tie-corrected).
double kendall_tau(const std::vector<double>& a, const std::vector<double>& b);

double mean(const std::vector<double>& v);

// Robust accuracy (correct / total) of `model` under one evaluation over the
// first `sample_count` samples. The clean entry skips perturbation.
double robust_accuracy(const net::ModelFn& model,
                       const attack::AttackSpec& spec,
                       const harness::Dataset& data, std::size_t sample_count,
                       int batch_size, std::uint64_t seed);

// Samples `count` random genomes from the supernet, evaluates each under the
// full suite, and correlates the per-evaluation accuracy columns.
CorrelationResult sample_and_correlate(const net::Supernet& net,
                                       std::size_t count,
                                       const std::vector<attack::AttackSpec>& suite,
                                       const harness::Dataset& data,
                                       std::size_t fidelity_samples,
                                       int batch_size, std::uint64_t seed,
                                       const std::string& metric = "pearson");

// Correlates precomputed accuracy rows (fixture replay path).
CorrelationResult correlate_rows(const std::vector<std::vector<double>>& rows,
                                 const std::string& metric = "pearson");

// Groups evaluations whose pairwise correlation reaches tau (transitive
// closure; earliest index becomes the representative) and computes group
// coefficients from the sampled accuracy rows, averaged over samples.
MergePlan build_merge_plan(const CorrelationResult& corr, double tau);

// Column-mean of per-sample coefficient rows (protocol averaging).
std::vector<double> average_rows(const std::vector<std::vector<double>>& rows);

// RA = sum_i k_i * f_i / n with n the total (unmerged) evaluation count.
double comprehensive_ra(const std::vector<double>& merged_accuracies,
                        const MergePlan& plan, int total_evals);

// Runs only the plan's representative evaluations against the genome's
// sub-network; wall time is recorded per evaluation.
EvaluationReport evaluate_suite(const net::Supernet& net,
                                const arch::Genome& genome,
                                const std::vector<attack::AttackSpec>& suite,
                                const MergePlan& plan,
                                const harness::Dataset& data,
                                const FidelityLevel& fidelity, int batch_size,
                                std::uint64_t seed);

double comprehensive_ra_of(const EvaluationReport& report,
                           const MergePlan& plan);

}  // namespace crna::eval
