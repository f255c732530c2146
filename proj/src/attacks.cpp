#include "crna/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "crna/error.hpp"

namespace crna::attack {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

double sign_of(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

void require_pixels(const Tensor& x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x[i] < 0.0 || x[i] > 1.0) {
      throw ConfigError("attack: input pixels must lie in [0,1]");
    }
  }
}

ad::Var make_loss(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                  LossKind loss, double kappa) {
  if (loss == LossKind::Cw) return g.cw_loss(logits, y, kappa);
  return g.softmax_cross_entropy(logits, y);
}

struct EvalOut {
  std::vector<std::uint8_t> success;
  std::vector<double> loss;
};

EvalOut finish(const Tensor& logits, const Tensor& per_example_loss,
               const std::vector<int>& y) {
  EvalOut out;
  auto pred = net::argmax_rows(logits);
  out.success.resize(y.size());
  out.loss.assign(per_example_loss.data(),
                  per_example_loss.data() + per_example_loss.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    out.success[i] = pred[i] != y[i] ? 1 : 0;
  }
  return out;
}

void project_linf(Tensor& xa, const Tensor& x0, double eps) {
  for (std::size_t i = 0; i < xa.numel(); ++i) {
    double lo = std::max(0.0, x0[i] - eps);
    double hi = std::min(1.0, x0[i] + eps);
    xa[i] = std::min(hi, std::max(lo, xa[i]));
  }
}

// Shared iterative core for FGSM / PGD / MI in either norm. FGSM is the
// single-step, full-budget case and MI with zero momentum takes the same
// branch as plain PGD, which makes the spec's attack identities structural.
AttackResult iterative_lp(const ModelFn& model, const Tensor& x,
                          const std::vector<int>& y, Norm norm, double eps,
                          double alpha, int iterations, double momentum,
                          bool random_start, Rng& rng, LossKind loss,
                          double kappa) {
  if (eps < 0) throw ConfigError("attack: epsilon must be non-negative");
  if (alpha < 0) throw ConfigError("attack: step size must be non-negative");
  if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
  if (momentum < 0) throw ConfigError("attack: momentum must be >= 0");
  if (y.size() != x.dim(0)) throw ConfigError("attack: label count mismatch");
  require_pixels(x);

  const std::size_t N = x.dim(0);
  const std::size_t M = x.numel() / N;
  Tensor x0 = x;
  Tensor xa = x;
  if (random_start && eps > 0) {
    for (std::size_t i = 0; i < xa.numel(); ++i) {
      xa[i] = x0[i] + rng.uniform(-eps, eps);
    }
    if (norm == Norm::Linf) {
      project_linf(xa, x0, eps);
    } else {
      project_l2_ball(xa, x0, eps);
    }
  }

  ad::Graph g;
  ad::Var xv = g.parameter(xa, true);
  ad::Var logits = model(g, xv);
  ad::Var ploss = make_loss(g, logits, y, loss, kappa);
  ad::Var total = g.reduce_sum(ploss);

  Tensor g_acc(x.shape());
  for (int t = 0; t < iterations; ++t) {
    g.set_value(xv, xa);
    g.forward();
    g.backward(total);
    const Tensor& grad = g.grad(xv);
    if (!grad.all_finite()) {
      throw NumericError("attack: non-finite input gradient");
    }
    const Tensor* dir = &grad;
    if (momentum > 0) {
      // g <- mu * g + grad / ||grad||_1, per example
      for (std::size_t n = 0; n < N; ++n) {
        double l1 = 0;
        const double* gp = grad.data() + n * M;
        for (std::size_t i = 0; i < M; ++i) l1 += std::fabs(gp[i]);
        double* ap = g_acc.data() + n * M;
        if (l1 > 0) {
          for (std::size_t i = 0; i < M; ++i) {
            ap[i] = momentum * ap[i] + gp[i] / l1;
          }
        } else {
          for (std::size_t i = 0; i < M; ++i) ap[i] = momentum * ap[i];
        }
      }
      dir = &g_acc;
    }
    if (norm == Norm::Linf) {
      for (std::size_t i = 0; i < xa.numel(); ++i) {
        xa[i] += alpha * sign_of((*dir)[i]);
      }
      project_linf(xa, x0, eps);
    } else {
      for (std::size_t n = 0; n < N; ++n) {
        const double* dp = dir->data() + n * M;
        double l2 = 0;
        for (std::size_t i = 0; i < M; ++i) l2 += dp[i] * dp[i];
        l2 = std::sqrt(l2);
        if (l2 > 0) {
          double* xp = xa.data() + n * M;
          for (std::size_t i = 0; i < M; ++i) xp[i] += alpha * dp[i] / l2;
        }
      }
      project_l2_ball(xa, x0, eps);
    }
  }

  g.set_value(xv, xa);
  g.forward();
  EvalOut ev = finish(g.value(logits), g.value(ploss), y);
  return AttackResult{std::move(xa), std::move(ev.success), std::move(ev.loss)};
}

ad::Var apply_semantic_graph(ad::Graph& g, ad::Var x, ad::Var delta,
                             AttackKind kind) {
  switch (kind) {
    case AttackKind::Hue: {
      ad::Var hsv = g.rgb_to_hsv(x);
      ad::Var h = g.slice_channels(hsv, 0, 1);
      ad::Var s = g.slice_channels(hsv, 1, 2);
      ad::Var v = g.slice_channels(hsv, 2, 3);
      ad::Var h2 = g.clip(g.per_image_add(h, delta), 0.0, kTwoPi);
      return g.hsv_to_rgb(g.concat_channels({h2, s, v}));
    }
    case AttackKind::Saturation: {
      ad::Var hsv = g.rgb_to_hsv(x);
      ad::Var h = g.slice_channels(hsv, 0, 1);
      ad::Var s = g.slice_channels(hsv, 1, 2);
      ad::Var v = g.slice_channels(hsv, 2, 3);
      ad::Var s2 = g.clip(g.per_image_mul(s, delta), 0.0, 1.0);
      return g.hsv_to_rgb(g.concat_channels({h, s2, v}));
    }
    case AttackKind::Brightness:
      return g.clip(g.per_image_add(x, delta), 0.0, 1.0);
    case AttackKind::Contrast:
      return g.clip(g.per_image_mul(x, delta), 0.0, 1.0);
    case AttackKind::Rotation:
      return g.rotate(x, delta);
    default:
      throw ConfigError("apply_semantic: not a semantic attack kind");
  }
}

void validate_interval(AttackKind kind, double lo, double hi) {
  if (lo > hi) throw ConfigError("semantic attack: interval bounds unordered");
  switch (kind) {
    case AttackKind::Hue:
      if (lo < -kTwoPi || hi > kTwoPi) {
        throw ConfigError("hue interval must lie within [-2pi, 2pi]");
      }
      break;
    case AttackKind::Saturation:
    case AttackKind::Contrast:
      if (lo < 0) {
        throw ConfigError("multiplicative interval must be non-negative");
      }
      break;
    case AttackKind::Brightness:
      if (lo < -1 || hi > 1) {
        throw ConfigError("brightness interval must lie within [-1, 1]");
      }
      break;
    case AttackKind::Rotation:
      if (lo < -180 || hi > 180) {
        throw ConfigError("rotation interval must lie within [-180, 180]");
      }
      break;
    default:
      throw ConfigError("validate_interval: not a semantic attack kind");
  }
}

}  // namespace

const char* attack_kind_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::Clean: return "clean";
    case AttackKind::Hue: return "hue";
    case AttackKind::Saturation: return "saturation";
    case AttackKind::Rotation: return "rotation";
    case AttackKind::Brightness: return "brightness";
    case AttackKind::Contrast: return "contrast";
    case AttackKind::Composite: return "caa";
    case AttackKind::FgsmLinf: return "fgsm_linf";
    case AttackKind::PgdLinf: return "pgd_linf";
    case AttackKind::MiLinf: return "mi_linf";
    case AttackKind::PgdL2: return "pgd_l2";
    case AttackKind::MiL2: return "mi_l2";
  }
  return "?";
}

AttackKind attack_kind_from_name(const std::string& name) {
  for (int k = 0; k < kSuiteSize; ++k) {
    AttackKind kind = static_cast<AttackKind>(k);
    if (name == attack_kind_name(kind)) return kind;
  }
  throw ConfigError("unknown attack kind '" + name + "'");
}

bool is_semantic(AttackKind kind) {
  switch (kind) {
    case AttackKind::Hue:
    case AttackKind::Saturation:
    case AttackKind::Rotation:
    case AttackKind::Brightness:
    case AttackKind::Contrast:
      return true;
    default:
      return false;
  }
}

bool is_lp(AttackKind kind) {
  switch (kind) {
    case AttackKind::FgsmLinf:
    case AttackKind::PgdLinf:
    case AttackKind::MiLinf:
    case AttackKind::PgdL2:
    case AttackKind::MiL2:
      return true;
    default:
      return false;
  }
}

AttackSpec AttackSpec::table_default(AttackKind kind) {
  AttackSpec s;
  s.kind = kind;
  switch (kind) {
    case AttackKind::Clean:
      break;
    case AttackKind::Hue:
      s.interval_lo = -M_PI;
      s.interval_hi = M_PI;
      s.iterations = 1;
      break;
    case AttackKind::Saturation:
      s.interval_lo = 0.7;
      s.interval_hi = 1.3;
      s.iterations = 1;
      break;
    case AttackKind::Rotation:
      s.interval_lo = -10.0;
      s.interval_hi = 10.0;
      s.iterations = 1;
      break;
    case AttackKind::Brightness:
      s.interval_lo = -0.2;
      s.interval_hi = 0.2;
      s.iterations = 1;
      break;
    case AttackKind::Contrast:
      s.interval_lo = 0.7;
      s.interval_hi = 1.3;
      s.iterations = 1;
      break;
    case AttackKind::Composite: {
      // Five semantic stages followed by the l-inf PGD stage; each stage
      // runs at the composite row's single-iteration budget.
      s.iterations = 1;
      for (AttackKind stage :
           {AttackKind::Hue, AttackKind::Saturation, AttackKind::Rotation,
            AttackKind::Brightness, AttackKind::Contrast}) {
        s.sequence.push_back(table_default(stage));
      }
      AttackSpec pgd = table_default(AttackKind::PgdLinf);
      pgd.iterations = 1;
      s.sequence.push_back(pgd);
      break;
    }
    case AttackKind::FgsmLinf:
      s.epsilon = 1.0 / 255.0;
      s.iterations = 1;  // single-step by definition
      break;
    case AttackKind::PgdLinf:
    case AttackKind::MiLinf:
    case AttackKind::PgdL2:
    case AttackKind::MiL2:
      s.epsilon = 1.0 / 255.0;
      s.iterations = 7;
      break;
  }
  return s;
}

std::vector<AttackSpec> default_suite() {
  std::vector<AttackSpec> suite;
  for (int k = 0; k < kSuiteSize; ++k) {
    suite.push_back(AttackSpec::table_default(static_cast<AttackKind>(k)));
  }
  return suite;
}

std::vector<std::string> suite_names() {
  std::vector<std::string> names;
  for (int k = 0; k < kSuiteSize; ++k) {
    names.emplace_back(attack_kind_name(static_cast<AttackKind>(k)));
  }
  return names;
}

std::vector<double> cw_loss_values(const Tensor& logits,
                                   const std::vector<int>& labels,
                                   double kappa) {
  if (logits.ndim() != 2) throw ShapeError("cw_loss: logits must be (N,C)");
  if (logits.dim(1) < 2) {
    throw ConfigError("cw_loss: needs at least two classes");
  }
  std::vector<double> out(labels.size());
  const std::size_t C = logits.dim(1);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const double* row = logits.data() + n * C;
    std::size_t y = static_cast<std::size_t>(labels[n]);
    double best = -1e300;
    for (std::size_t c = 0; c < C; ++c) {
      if (c != y) best = std::max(best, row[c]);
    }
    out[n] = std::max(best - row[y], -kappa);
  }
  return out;
}

void project_l2_ball(Tensor& candidate, const Tensor& origin, double eps) {
  const std::size_t N = candidate.dim(0);
  const std::size_t M = candidate.numel() / N;
  for (std::size_t n = 0; n < N; ++n) {
    double* cp = candidate.data() + n * M;
    const double* op = origin.data() + n * M;
    double norm2 = 0;
    for (std::size_t i = 0; i < M; ++i) {
      double d = cp[i] - op[i];
      norm2 += d * d;
    }
    double norm = std::sqrt(norm2);
    if (norm > eps) {
      double scale = eps / norm;
      for (std::size_t i = 0; i < M; ++i) {
        cp[i] = op[i] + (cp[i] - op[i]) * scale;
      }
    }
    for (std::size_t i = 0; i < M; ++i) {
      cp[i] = std::min(1.0, std::max(0.0, cp[i]));
    }
  }
}

std::vector<double> per_example_l2(const Tensor& a, const Tensor& b) {
  const std::size_t N = a.dim(0);
  const std::size_t M = a.numel() / N;
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i) {
      double d = a[n * M + i] - b[n * M + i];
      acc += d * d;
    }
    out[n] = std::sqrt(acc);
  }
  return out;
}

double max_linf(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::fabs(a[i] - b[i]));
  }
  return worst;
}

AttackResult fgsm(const ModelFn& model, const Tensor& x,
                  const std::vector<int>& y, double epsilon, LossKind loss,
                  double kappa) {
  Rng rng(0);  // unused: no random start
  return iterative_lp(model, x, y, Norm::Linf, epsilon, epsilon, 1, 0.0, false,
                      rng, loss, kappa);
}

AttackResult pgd_linf(const ModelFn& model, const Tensor& x,
                      const std::vector<int>& y, double epsilon, double alpha,
                      int iterations, bool random_start, Rng& rng,
                      LossKind loss, double kappa) {
  if (alpha <= 0 && epsilon > 0) {
    throw ConfigError("pgd: step size must be positive");
  }
  return iterative_lp(model, x, y, Norm::Linf, epsilon, alpha, iterations, 0.0,
                      random_start, rng, loss, kappa);
}

AttackResult pgd_l2(const ModelFn& model, const Tensor& x,
                    const std::vector<int>& y, double epsilon, double alpha,
                    int iterations, Rng& rng, LossKind loss, double kappa) {
  if (alpha <= 0 && epsilon > 0) {
    throw ConfigError("pgd: step size must be positive");
  }
  return iterative_lp(model, x, y, Norm::L2, epsilon, alpha, iterations, 0.0,
                      false, rng, loss, kappa);
}

AttackResult mi_attack(const ModelFn& model, const Tensor& x,
                       const std::vector<int>& y, double epsilon, double alpha,
                       int iterations, double momentum, Norm norm, Rng& rng,
                       LossKind loss, double kappa) {
  return iterative_lp(model, x, y, norm, epsilon, alpha, iterations, momentum,
                      false, rng, loss, kappa);
}

AttackResult semantic_attack(const ModelFn& model, const Tensor& x,
                             const std::vector<int>& y, AttackKind kind,
                             double lo, double hi, int iterations, double step,
                             Rng& rng, LossKind loss, double kappa) {
  validate_interval(kind, lo, hi);
  if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
  if (y.size() != x.dim(0)) throw ConfigError("attack: label count mismatch");
  require_pixels(x);
  if (step <= 0) {
    step = (hi - lo) / (2.0 * iterations);
  }

  const std::size_t N = x.dim(0);
  Tensor delta({N});
  for (std::size_t n = 0; n < N; ++n) delta[n] = rng.uniform(lo, hi);

  ad::Graph g;
  ad::Var dv = g.parameter(delta, true);
  ad::Var xc = g.constant(x);
  ad::Var xt = apply_semantic_graph(g, xc, dv, kind);
  ad::Var logits = model(g, xt);
  ad::Var ploss = make_loss(g, logits, y, loss, kappa);
  ad::Var total = g.reduce_sum(ploss);

  for (int t = 0; t < iterations; ++t) {
    g.set_value(dv, delta);
    g.forward();
    g.backward(total);
    const Tensor& grad = g.grad(dv);
    if (!grad.all_finite()) {
      throw NumericError("attack: non-finite parameter gradient");
    }
    for (std::size_t n = 0; n < N; ++n) {
      delta[n] =
          std::min(hi, std::max(lo, delta[n] + step * sign_of(grad[n])));
    }
  }
  g.set_value(dv, delta);
  g.forward();
  EvalOut ev = finish(g.value(logits), g.value(ploss), y);
  return AttackResult{g.value(xt), std::move(ev.success), std::move(ev.loss)};
}

AttackResult composite_attack(const ModelFn& model, const Tensor& x,
                              const std::vector<int>& y,
                              const std::vector<AttackSpec>& sequence,
                              std::uint64_t seed) {
  if (sequence.empty()) {
    throw ConfigError("composite attack: empty attack sequence");
  }
  Tensor current = x;
  AttackResult last;
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    AttackSpec stage = sequence[i];
    stage.seed = derive_seed(seed, {i});
    last = run_attack(model, current, y, stage);
    current = last.adv;
  }
  last.adv = std::move(current);
  return last;
}

Tensor apply_semantic(const Tensor& x, AttackKind kind, const Tensor& delta) {
  ad::Graph g;
  ad::Var xt = apply_semantic_graph(g, g.constant(x), g.constant(delta), kind);
  g.forward();
  return g.value(xt);
}

AttackResult run_attack(const ModelFn& model, const Tensor& x,
                        const std::vector<int>& y, const AttackSpec& spec) {
  Rng rng(spec.seed);
  switch (spec.kind) {
    case AttackKind::Clean: {
      ad::Graph g;
      ad::Var xv = g.constant(x);
      ad::Var logits = model(g, xv);
      ad::Var ploss = make_loss(g, logits, y, spec.loss, spec.kappa);
      g.forward();
      EvalOut ev = finish(g.value(logits), g.value(ploss), y);
      return AttackResult{x, std::move(ev.success), std::move(ev.loss)};
    }
    case AttackKind::Hue:
    case AttackKind::Saturation:
    case AttackKind::Rotation:
    case AttackKind::Brightness:
    case AttackKind::Contrast:
      return semantic_attack(model, x, y, spec.kind, spec.interval_lo,
                             spec.interval_hi, spec.iterations, spec.step, rng,
                             spec.loss, spec.kappa);
    case AttackKind::Composite: {
      const std::vector<AttackSpec>& seq =
          spec.sequence.empty()
              ? AttackSpec::table_default(AttackKind::Composite).sequence
              : spec.sequence;
      return composite_attack(model, x, y, seq, spec.seed);
    }
    case AttackKind::FgsmLinf:
      return fgsm(model, x, y, spec.epsilon, spec.loss, spec.kappa);
    case AttackKind::PgdLinf:
    case AttackKind::MiLinf:
    case AttackKind::PgdL2:
    case AttackKind::MiL2: {
      double alpha = spec.step > 0 ? spec.step : spec.epsilon / 4.0;
      Norm norm = (spec.kind == AttackKind::PgdL2 ||
                   spec.kind == AttackKind::MiL2)
                      ? Norm::L2
                      : Norm::Linf;
      bool mi = spec.kind == AttackKind::MiLinf || spec.kind == AttackKind::MiL2;
      return iterative_lp(model, x, y, norm, spec.epsilon, alpha,
                          spec.iterations, mi ? spec.momentum : 0.0,
                          spec.random_start, rng, spec.loss, spec.kappa);
    }
  }
  throw ConfigError("run_attack: unknown attack kind");
}

}  // namespace crna::attack
