#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "crna/dataset.hpp"
#include "crna/genome.hpp"
#include "crna/graph.hpp"

namespace crna::net {

// Builds logits differentiable with respect to the input batch; every attack
// works against this signature.
using ModelFn = std::function<ad::Var(ad::Graph&, ad::Var)>;

// Named weight storage shared by the supernet and standalone networks. Keys
// are stable path-like names so bank subsets can be copied between stores.
struct ParamStore {
  std::map<std::string, Tensor> params;
  std::map<std::string, ad::BatchNormState> bn;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  ad::BatchNormState& bn_state(const std::string& name);
};

struct NetworkConfig {
  int cells = 4;
  int channels = 8;
  int in_channels = 3;
  int classes = 10;
  int image_size = 16;

  bool is_reduction_cell(int index) const {
    return index == cells / 3 || index == 2 * cells / 3;
  }
};

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;   // protocol default
  double lr = 0.05;
  std::uint64_t seed = 0;
  std::string path_sampling = "uniform";
  bool adversarial = false;       // train on FGSM-perturbed batches
  double adv_epsilon = 1.0 / 255.0;
};

struct BuildContext {
  ad::Graph& graph;
  const ParamStore* store;
  bool training = false;
  // When training, every parameter var is recorded here for the update step.
  std::vector<std::pair<std::string, ad::Var>>* trainable = nullptr;
  std::set<std::string>* touched = nullptr;
};

// Builds the cell network selected by `genome` on top of x and returns the
// logits node. Used identically by the supernet (bank-selected weights) and
// by standalone networks (own weights), which is what makes weight-copy
// extraction exact.
ad::Var build_cell_network(BuildContext& ctx, const NetworkConfig& cfg,
                           const arch::Genome& genome, ad::Var x);

// Enumerates every weight-bank key of the full supernet in canonical order.
std::vector<std::string> supernet_param_names(const NetworkConfig& cfg);

// Weight-sharing supernet: one weight set per candidate op on every edge
// slot of every cell instance. Training samples one path uniformly per step;
// after training the structure is immutable and serves concurrent
// evaluations.
class Supernet {
 public:
  Supernet(NetworkConfig cfg, std::uint64_t init_seed);

  const NetworkConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  // Eval-mode forward of the sub-network selected by `genome`.
  ModelFn subnet(const arch::Genome& genome) const;
  Tensor infer(const arch::Genome& genome, const Tensor& batch) const;

  // Param names used by a genome's sub-network (weight-copy extraction).
  std::set<std::string> touched_params(const arch::Genome& genome) const;

  std::vector<double> train(const harness::Dataset& data,
                            const TrainConfig& cfg);
  const std::vector<double>& train_losses() const { return train_losses_; }

  void save(const std::filesystem::path& path, std::uint64_t config_hash) const;
  static Supernet load(const std::filesystem::path& path,
                       std::uint64_t* config_hash = nullptr);

 private:
  NetworkConfig cfg_;
  ParamStore store_;
  std::vector<double> train_losses_;
};

// Spec-level entry points.
Supernet train_supernet(const harness::Dataset& data, const NetworkConfig& net,
                        const TrainConfig& train);
Tensor extract_and_infer(const Supernet& net, const arch::Genome& genome,
                         const Tensor& batch);

// Standalone network for a fixed genome (the `retrain` target).
class CellNetwork {
 public:
  CellNetwork(NetworkConfig cfg, arch::Genome genome, std::uint64_t init_seed);
  static CellNetwork from_supernet(const Supernet& net,
                                   const arch::Genome& genome);

  const NetworkConfig& config() const { return cfg_; }
  const arch::Genome& genome() const { return genome_; }
  ModelFn model() const;
  Tensor infer(const Tensor& batch) const;
  std::vector<double> train(const harness::Dataset& data,
                            const TrainConfig& cfg);

 private:
  NetworkConfig cfg_;
  arch::Genome genome_;
  ParamStore store_;
};

// Fraction of correctly classified samples under no attack.
double clean_accuracy(const ModelFn& model, const harness::Dataset& data,
                      std::size_t sample_count, int batch_size);

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace crna::net
