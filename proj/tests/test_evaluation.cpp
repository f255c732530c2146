#include "crna/evaluation.hpp"

#include <cmath>

#include "crna/error.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace crna;
using namespace crna::eval;

namespace {

// Constant-logits model: always predicts the same class. Keeps a zeroed
// dependency on x so attack gradients exist.
net::ModelFn constant_model(int classes, int winner) {
  return [classes, winner](ad::Graph& g, ad::Var x) {
    const Shape s = g.shape(x);
    const std::size_t flat = shape_numel(s) / s[0];
    const std::size_t c = static_cast<std::size_t>(classes);
    Tensor logits({s[0], c});
    for (std::size_t n = 0; n < s[0]; ++n) {
      logits.at2(n, static_cast<std::size_t>(winner)) = 5.0;
    }
    Tensor w({c, flat});  // all-zero weights
    ad::Var dep = g.affine(g.reshape(x, {s[0], flat}), g.constant(w), ad::Var{});
    return g.add(g.constant(logits), dep);
  };
}

harness::Dataset labeled_dataset(const std::vector<int>& labels, int classes) {
  harness::Dataset d;
  d.classes = classes;
  d.labels = labels;
  d.images = Tensor({labels.size(), 3, 4, 4});
  for (std::size_t i = 0; i < d.images.numel(); ++i) {
    d.images[i] = 0.5;
  }
  return d;
}

// Table 4 consistent-subset pair values with the l-p pair mapped onto
// (PGD-linf, MI-linf) per the merged-groups table.
CorrelationResult paper_correlation_fixture() {
  CorrelationResult corr;
  corr.n = 12;
  corr.matrix.assign(144, 0.3);
  corr.defined.assign(144, 1);
  auto set = [&](std::size_t i, std::size_t j, double v) {
    corr.matrix[i * 12 + j] = v;
    corr.matrix[j * 12 + i] = v;
  };
  for (std::size_t i = 0; i < 12; ++i) corr.matrix[i * 12 + i] = 1.0;
  set(0, 3, 1.0);
  set(0, 2, 0.8);
  set(2, 3, 0.8);
  set(1, 5, 0.95);
  set(8, 9, 0.74);
  return corr;
}

}  // namespace

TEST_CASE("pearson basics") {
  std::vector<double> a = {0.1, 0.4, 0.3, 0.9};
  bool def = false;
  CHECK(pearson(a, a, &def) == doctest::Approx(1.0));
  CHECK(def);
  std::vector<double> na;
  for (double v : a) na.push_back(-v);
  CHECK(pearson(a, na, &def) == doctest::Approx(-1.0));
  std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
  double c = pearson(a, flat, &def);
  CHECK(!def);
  CHECK(std::isnan(c));
}

TEST_CASE("kendall tau basics") {
  CHECK(kendall_tau({1, 2, 3}, {10, 20, 30}) == doctest::Approx(1.0));
  CHECK(kendall_tau({1, 2, 3}, {30, 20, 10}) == doctest::Approx(-1.0));
  // tie-corrected value cross-checked by hand: C=5, D=0, Tx=1, Ty=0
  CHECK(kendall_tau({1, 2, 2, 3}, {1, 2, 3, 4}) ==
        doctest::Approx(5.0 / std::sqrt(30.0)));
}

TEST_CASE("robust accuracy upper bound: always-correct model") {
  auto data = labeled_dataset(std::vector<int>(20, 0), 2);
  attack::AttackSpec clean;  // kind Clean
  double ra = robust_accuracy(constant_model(2, 0), clean, data, 20, 8, 1);
  CHECK(ra == doctest::Approx(1.0));
}

TEST_CASE("robust accuracy chance level: constant model on balanced data") {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 10);
  auto data = labeled_dataset(labels, 10);
  attack::AttackSpec clean;
  double ra = robust_accuracy(constant_model(10, 3), clean, data, 100, 32, 1);
  CHECK(ra == doctest::Approx(0.1));
}

TEST_CASE("robust accuracy is a plain ratio: 262 of 500") {
  std::vector<int> labels(500, 1);
  for (int i = 0; i < 262; ++i) labels[static_cast<std::size_t>(i)] = 0;
  auto data = labeled_dataset(labels, 2);
  attack::AttackSpec clean;
  double ra = robust_accuracy(constant_model(2, 0), clean, data, 500, 64, 1);
  CHECK(ra == doctest::Approx(0.524));
}

TEST_CASE("robust accuracy preconditions") {
  auto data = labeled_dataset({0, 1}, 2);
  attack::AttackSpec clean;
  CHECK_THROWS_AS(
      robust_accuracy(constant_model(2, 0), clean, data, 5, 8, 1),
      ConfigError);
  harness::Dataset empty;
  CHECK_THROWS_AS(
      robust_accuracy(constant_model(2, 0), clean, empty, 1, 8, 1),
      ConfigError);
}

TEST_CASE("correlation of crafted columns reproduces target pair values") {
  // Build 5-sample columns in the 4-dimensional mean-zero space so that
  // corr(0,3)=1.0, corr(1,5)=0.95, corr(8,11)=0.74 exactly; remaining
  // columns are constant and therefore flagged undefined.
  std::vector<double> z = {-2, -1, 0, 1, 2};
  std::vector<double> w = {1, -2, 0, 2, -1};
  std::vector<double> u = {2, -1, -2, -1, 2};
  // v: orthogonal to z, w, u in the mean-zero space (Gram-Schmidt from seed)
  std::vector<double> seed = {1, 1, -1, -1, 0};
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  std::vector<double> v = seed;
  for (const auto& basis : {z, w, u}) {
    double coef = dot(v, basis) / dot(basis, basis);
    for (std::size_t i = 0; i < 5; ++i) v[i] -= coef * basis[i];
  }
  double mean_v = (v[0] + v[1] + v[2] + v[3] + v[4]) / 5;
  for (double& x : v) x -= mean_v;
  REQUIRE(dot(v, v) > 1e-12);

  auto mix = [&](const std::vector<double>& a, const std::vector<double>& b,
                 double rho) {
    // rho*a + beta*b with beta chosen so corr(a, result) == rho
    double beta = std::sqrt((1 - rho * rho) * dot(a, a) / dot(b, b));
    std::vector<double> out(5);
    for (std::size_t i = 0; i < 5; ++i) out[i] = rho * a[i] + beta * b[i];
    return out;
  };
  std::vector<double> c5 = mix(w, v, 0.95);
  std::vector<double> c11 = mix(u, v, 0.74);

  std::vector<std::vector<double>> rows(5, std::vector<double>(12, 0.5));
  for (std::size_t s = 0; s < 5; ++s) {
    rows[s][0] = 0.5 + 0.05 * z[s];
    rows[s][3] = 0.4 + 0.02 * z[s];
    rows[s][1] = 0.5 + 0.05 * w[s];
    rows[s][5] = 0.5 + 0.05 * c5[s];
    rows[s][8] = 0.5 + 0.05 * u[s];
    rows[s][11] = 0.5 + 0.05 * c11[s];
  }
  CorrelationResult corr = correlate_rows(rows);
  CHECK(corr.at(0, 3) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(corr.at(1, 5) == doctest::Approx(0.95).epsilon(1e-9));
  CHECK(corr.at(8, 11) == doctest::Approx(0.74).epsilon(1e-9));
  // constant columns are flagged, never silently zero
  CHECK(!corr.is_defined(2, 6));
  CHECK(corr.is_defined(0, 3));
  // matrix is symmetric with unit diagonal
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(corr.at(i, i) == doctest::Approx(1.0));
    for (std::size_t j = 0; j < 12; ++j) {
      if (corr.is_defined(i, j)) {
        CHECK(corr.at(i, j) == doctest::Approx(corr.at(j, i)));
        CHECK(corr.at(i, j) >= -1.0 - 1e-12);
        CHECK(corr.at(i, j) <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("merge plan replays the protocol grouping: 12 -> 8") {
  CorrelationResult corr = paper_correlation_fixture();
  MergePlan plan = build_merge_plan(corr, 0.7);
  REQUIRE(plan.groups.size() == 8);
  CHECK(plan.groups[0].members == std::vector<int>{0, 2, 3});
  CHECK(plan.groups[0].representative == 0);
  CHECK(plan.groups[1].members == std::vector<int>{1, 5});
  CHECK(plan.groups[1].representative == 1);
  std::vector<int> reps = plan.representatives();
  CHECK(reps == std::vector<int>{0, 1, 4, 6, 7, 8, 10, 11});
  for (const auto& g : plan.groups) {
    if (g.representative == 8) {
      CHECK(g.members == std::vector<int>{8, 9});
    }
  }
}

TEST_CASE("merge plan: no pair above threshold gives the identity plan") {
  std::vector<std::vector<double>> rows = {
      {0.1, 0.9, 0.4}, {0.2, 0.3, 0.8}, {0.5, 0.4, 0.1}, {0.3, 0.8, 0.2}};
  CorrelationResult corr = correlate_rows(rows);
  MergePlan plan = build_merge_plan(corr, 0.999);
  CHECK(plan.is_identity());
  for (const auto& g : plan.groups) {
    CHECK(g.coefficient == doctest::Approx(1.0));
    CHECK(g.members.size() == 1);
  }
}

TEST_CASE("merge coefficient follows the accuracy-sum rule") {
  // one group of three with accuracies (0.9, 0.6, 0.3): k = 1.8/0.9 = 2.0
  CorrelationResult corr;
  corr.n = 3;
  corr.matrix.assign(9, 0.95);
  corr.defined.assign(9, 1);
  corr.accuracy_rows = {{0.9, 0.6, 0.3}};
  MergePlan plan = build_merge_plan(corr, 0.7);
  REQUIRE(plan.groups.size() == 1);
  CHECK(plan.groups[0].coefficient == doctest::Approx(2.0));
}

TEST_CASE("protocol coefficient rows average to published values") {
  std::vector<std::vector<double>> table6 = {{3.37, 1.84, 1.34},
                                             {3.37, 1.98, 1.71},
                                             {3.37, 2.12, 1.52},
                                             {3.51, 2.03, 1.59},
                                             {3.54, 2.10, 1.54}};
  auto avg = average_rows(table6);
  CHECK(std::fabs(avg[0] - 3.43) < 0.005);
  CHECK(std::fabs(avg[1] - 2.01) < 0.005);
  CHECK(std::fabs(avg[2] - 1.54) < 0.005);
}

TEST_CASE("comprehensive RA: identity plan is the arithmetic mean") {
  MergePlan plan = MergePlan::identity(4);
  std::vector<double> accs = {0.2, 0.4, 0.6, 0.8};
  CHECK(comprehensive_ra(accs, plan, 4) == doctest::Approx(0.5));
}

TEST_CASE("comprehensive RA: full merge case") {
  MergePlan plan;
  plan.total_evals = 6;
  plan.groups = {{0, {0, 1, 2, 3, 4, 5}, 4.2}};
  CHECK(comprehensive_ra({0.5}, plan, 6) == doctest::Approx(4.2 * 0.5 / 6.0));
  CHECK_THROWS_AS(comprehensive_ra({0.5, 0.1}, plan, 6), ConfigError);
}

TEST_CASE("comprehensive RA with consistent coefficients matches the "
          "full-suite mean") {
  MergePlan plan;
  plan.total_evals = 12;
  plan.groups = {{0, {0, 2, 3}, 3.43}, {1, {1, 5}, 2.01}, {4, {4}, 1.0},
                 {6, {6}, 1.0},        {7, {7}, 1.0},     {8, {8, 9}, 1.54},
                 {10, {10}, 1.0},      {11, {11}, 1.0}};
  plan.check_partition();
  // full accuracy vector constructed so group sums equal k * representative
  std::vector<double> full = {0.35, 0.40, 0.43, 0.4205, 0.6,  0.404,
                              0.1,  0.55, 0.50, 0.27,   0.70, 0.68};
  std::vector<double> merged = {full[0], full[1], full[4], full[6],
                                full[7], full[8], full[10], full[11]};
  double oracle = 0;  // independent full-suite mean
  for (double f : full) oracle += f;
  oracle /= 12.0;
  CHECK(std::fabs(comprehensive_ra(merged, plan, 12) - oracle) < 0.02);
}

TEST_CASE("merge plan text form round-trips") {
  CorrelationResult corr = paper_correlation_fixture();
  corr.accuracy_rows = {{0.9, 0.5, 0.6, 0.85, 0.7, 0.45, 0.1, 0.5, 0.4, 0.35,
                         0.6, 0.55},
                        {0.8, 0.4, 0.5, 0.75, 0.6, 0.35, 0.2, 0.4, 0.3, 0.25,
                         0.5, 0.45}};
  MergePlan plan = build_merge_plan(corr, 0.7);
  std::string text = plan.to_text(0xdeadbeef);
  std::uint64_t hash = 0;
  MergePlan loaded = MergePlan::from_text(text, &hash);
  CHECK(hash == 0xdeadbeef);
  REQUIRE(loaded.groups.size() == plan.groups.size());
  for (std::size_t i = 0; i < plan.groups.size(); ++i) {
    CHECK(loaded.groups[i].representative == plan.groups[i].representative);
    CHECK(loaded.groups[i].members == plan.groups[i].members);
    CHECK(loaded.groups[i].coefficient ==
          doctest::Approx(plan.groups[i].coefficient).epsilon(1e-15));
  }
  CHECK(loaded.tau == doctest::Approx(0.7));
}

TEST_CASE("tau outside (0,1] is rejected") {
  CorrelationResult corr = paper_correlation_fixture();
  CHECK_THROWS_AS(build_merge_plan(corr, 0.0), ConfigError);
  CHECK_THROWS_AS(build_merge_plan(corr, 1.5), ConfigError);
}

TEST_CASE("evaluate_suite runs only representative evaluations") {
  net::NetworkConfig cfg;
  cfg.cells = 3;
  cfg.channels = 4;
  cfg.classes = 3;
  cfg.image_size = 12;
  net::Supernet net(cfg, 77);
  auto data = harness::synthetic_dataset(5, 3, 24, 12, "test");
  Rng rng(8);
  arch::Genome g = arch::random_genome(rng);
  auto suite = attack::default_suite();
  FidelityLevel fid{"low", 12};

  MergePlan full = MergePlan::identity(12);
  EvaluationReport r_full =
      evaluate_suite(net, g, suite, full, data, fid, 12, 3);
  CHECK(r_full.accuracies.size() == 12);
  CHECK(r_full.wall_seconds.size() == 12);

  MergePlan merged = build_merge_plan(paper_correlation_fixture(), 0.7);
  EvaluationReport r_merged =
      evaluate_suite(net, g, suite, merged, data, fid, 12, 3);
  CHECK(r_merged.accuracies.size() == 8);

  // determinism and per-evaluation seed stability across plans
  EvaluationReport r_full2 =
      evaluate_suite(net, g, suite, full, data, fid, 12, 3);
  CHECK(r_full.accuracies == r_full2.accuracies);
  for (std::size_t i = 0; i < r_merged.eval_indices.size(); ++i) {
    int idx = r_merged.eval_indices[i];
    CHECK(r_merged.accuracies[i] ==
          r_full.accuracies[static_cast<std::size_t>(idx)]);
  }
  for (double acc : r_full.accuracies) {
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }
}
