#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crna/network.hpp"
#include "crna/rng.hpp"
#include "crna/tensor.hpp"

namespace crna::attack {

using net::ModelFn;

enum class AttackKind {
  Clean,
  Hue,
  Saturation,
  Rotation,
  Brightness,
  Contrast,
  Composite,
  FgsmLinf,
  PgdLinf,
  MiLinf,
  PgdL2,
  MiL2,
};

inline constexpr int kSuiteSize = 12;

const char* attack_kind_name(AttackKind kind);
AttackKind attack_kind_from_name(const std::string& name);
bool is_semantic(AttackKind kind);
bool is_lp(AttackKind kind);

enum class LossKind { CrossEntropy, Cw };

enum class Norm { Linf, L2 };

struct AttackSpec {
  AttackKind kind = AttackKind::Clean;
  // l_p magnitude in pixel scale.
  double epsilon = 0.0;
  // Semantic perturbation interval [lo, hi]; units per kind: radians (hue),
  // degrees (rotation), multiplicative factor (saturation, contrast),
  // additive pixel offset (brightness).
  double interval_lo = 0.0;
  double interval_hi = 0.0;
  int iterations = 1;
  double step = 0.0;  // 0 selects the per-kind default rule
  LossKind loss = LossKind::CrossEntropy;
  double kappa = 0.0;
  bool random_start = false;
  double momentum = 1.0;  // momentum-iterative accumulation factor
  std::uint64_t seed = 0;
  std::vector<AttackSpec> sequence;  // composite stages

  // Settings used by the evaluation protocol for each attack kind.
  static AttackSpec table_default(AttackKind kind);
};

// The full 12-entry evaluation list: clean plus the 11 attacks, protocol
// defaults, in canonical order.
std::vector<AttackSpec> default_suite();
std::vector<std::string> suite_names();

struct AttackResult {
  Tensor adv;                         // pixels in [0,1]
  std::vector<std::uint8_t> success;  // 1 when the model is fooled
  std::vector<double> loss;           // final per-example loss
};

// max(max_{i != y} F_i - F_y, -kappa) per example.
std::vector<double> cw_loss_values(const Tensor& logits,
                                   const std::vector<int>& labels,
                                   double kappa);

AttackResult fgsm(const ModelFn& model, const Tensor& x,
                  const std::vector<int>& y, double epsilon,
                  LossKind loss = LossKind::CrossEntropy, double kappa = 0.0);

AttackResult pgd_linf(const ModelFn& model, const Tensor& x,
                      const std::vector<int>& y, double epsilon, double alpha,
                      int iterations, bool random_start, Rng& rng,
                      LossKind loss = LossKind::CrossEntropy,
                      double kappa = 0.0);

AttackResult pgd_l2(const ModelFn& model, const Tensor& x,
                    const std::vector<int>& y, double epsilon, double alpha,
                    int iterations, Rng& rng,
                    LossKind loss = LossKind::CrossEntropy, double kappa = 0.0);

AttackResult mi_attack(const ModelFn& model, const Tensor& x,
                       const std::vector<int>& y, double epsilon, double alpha,
                       int iterations, double momentum, Norm norm, Rng& rng,
                       LossKind loss = LossKind::CrossEntropy,
                       double kappa = 0.0);

AttackResult semantic_attack(const ModelFn& model, const Tensor& x,
                             const std::vector<int>& y, AttackKind kind,
                             double lo, double hi, int iterations, double step,
                             Rng& rng, LossKind loss = LossKind::CrossEntropy,
                             double kappa = 0.0);

AttackResult composite_attack(const ModelFn& model, const Tensor& x,
                              const std::vector<int>& y,
                              const std::vector<AttackSpec>& sequence,
                              std::uint64_t seed);

// Applies the semantic transform with explicit per-image parameters, no
// optimization. delta has shape (N,).
Tensor apply_semantic(const Tensor& x, AttackKind kind, const Tensor& delta);

// Dispatcher: runs the attack described by `spec` (seeded from spec.seed).
AttackResult run_attack(const ModelFn& model, const Tensor& x,
                        const std::vector<int>& y, const AttackSpec& spec);

// Projection of candidate onto the l2 ball of radius eps around origin_x,
// then onto the pixel box. Exposed for direct verification.
void project_l2_ball(Tensor& candidate, const Tensor& origin, double eps);

// Per-example l2 distances and global linf distance between two batches.
std::vector<double> per_example_l2(const Tensor& a, const Tensor& b);
double max_linf(const Tensor& a, const Tensor& b);

}  // namespace crna::attack
