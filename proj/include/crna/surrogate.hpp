#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "crna/genome.hpp"
#include "crna/tensor.hpp"

namespace crna::surrogate {

using Pair = std::pair<arch::Genome, double>;

struct SurrogateConfig {
  std::vector<int> hidden = {64, 64};
  double grad_clip = 5.0;     // global gradient norm bound
  double weight_decay = 0.01; // L2; the net must rank genomes it never saw
};

struct TrainingRecord {
  std::string phase;  // "low_fidelity" or "high_fidelity"
  std::size_t sample_count = 0;
  std::vector<double> epoch_mse;
};

// Perceptron mapping one-hot genome features to comprehensive robust
// accuracy. Pretrained on low-fidelity pairs; fine-tuned online by replaying
// the accumulated high-fidelity archive.
class SurrogateModel {
 public:
  explicit SurrogateModel(SurrogateConfig cfg = {});

  static int feature_dim();
  static std::vector<double> encode(const arch::Genome& g);

  void fit_low_fidelity(const std::vector<Pair>& pairs, int epochs, double lr,
                        std::uint64_t seed);
  // Appends the new pairs to the high-fidelity store and retrains on the
  // whole store. An empty list leaves the model untouched.
  void finetune_high_fidelity(const std::vector<Pair>& new_pairs, int epochs,
                              double lr);
  double predict(const arch::Genome& g) const;

  bool fitted() const { return fitted_; }
  std::size_t high_fidelity_count() const { return high_fidelity_.size(); }
  const std::vector<TrainingRecord>& history() const { return history_; }
  double last_mse() const;
  const std::string& last_warning() const { return warning_; }
  const SurrogateConfig& config() const { return cfg_; }

  void save(const std::filesystem::path& path, std::uint64_t config_hash) const;
  static SurrogateModel load(const std::filesystem::path& path,
                             std::uint64_t* config_hash = nullptr);

 private:
  void init_weights(std::uint64_t seed);
  void train_batch(const std::vector<std::vector<double>>& features,
                   const std::vector<double>& targets, int epochs, double lr,
                   const std::string& phase);

  SurrogateConfig cfg_;
  std::vector<Tensor> weights_;  // (w,b) per layer
  double target_mean_ = 0.0;     // targets are standardized for training
  double target_std_ = 1.0;
  bool fitted_ = false;
  std::vector<Pair> high_fidelity_;
  std::vector<TrainingRecord> history_;
  std::string warning_;
};

// Spec-level entry points.
SurrogateModel fit_low_fidelity(const std::vector<Pair>& pairs, int epochs,
                                double lr, std::uint64_t seed,
                                SurrogateConfig cfg = {});
void finetune_high_fidelity(SurrogateModel& model,
                            const std::vector<Pair>& new_pairs, int epochs,
                            double lr);
double predict(const SurrogateModel& model, const arch::Genome& g);

}  // namespace crna::surrogate
