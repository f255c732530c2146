#include "crna/surrogate.hpp"

#include <cmath>
#include <set>

#include "crna/error.hpp"
#include "crna/evaluation.hpp"
#include "doctest.h"

using namespace crna;
using namespace crna::surrogate;

namespace {

std::vector<arch::Genome> random_genomes(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<arch::Genome> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(arch::random_genome(rng));
  return out;
}

// Linear ground truth over one-hot features, values inside [0,1].
double linear_target(const arch::Genome& g, std::uint64_t seed) {
  auto f = SurrogateModel::encode(g);
  Rng rng(seed);
  double acc = 0.5;
  for (double v : f) acc += v * rng.uniform(-0.01, 0.01);
  return acc;
}

SurrogateConfig small_cfg() {
  SurrogateConfig cfg;
  cfg.hidden = {32, 32};
  return cfg;
}

}  // namespace

TEST_CASE("feature encoding is one-hot and injective") {
  CHECK(SurrogateModel::feature_dim() == 184);
  auto genomes = random_genomes(500, 1);
  std::set<std::vector<double>> encodings;
  std::set<arch::Genome> unique;
  for (const auto& g : genomes) {
    auto e = SurrogateModel::encode(g);
    double sum = 0;
    for (double v : e) sum += v;
    CHECK(sum == doctest::Approx(32.0));  // one active feature per gene
    encodings.insert(std::move(e));
    unique.insert(g);
  }
  CHECK(encodings.size() == unique.size());
}

TEST_CASE("constant targets are reproduced") {
  auto genomes = random_genomes(20, 2);
  std::vector<Pair> pairs;
  for (const auto& g : genomes) pairs.push_back({g, 0.37});
  SurrogateModel model = fit_low_fidelity(pairs, 300, 5e-3, 7, small_cfg());
  for (const auto& g : genomes) {
    CHECK(std::fabs(model.predict(g) - 0.37) < 1e-3);
  }
}

TEST_CASE("linear synthetic target reaches mse < 1e-3 within 500 epochs") {
  auto genomes = random_genomes(100, 3);
  std::vector<Pair> pairs;
  for (const auto& g : genomes) pairs.push_back({g, linear_target(g, 11)});
  SurrogateModel model = fit_low_fidelity(pairs, 500, 5e-3, 8);
  CHECK(model.last_mse() < 1e-3);
}

namespace {

// Linear target driven by a handful of influential genes; the rest are
// irrelevant. Values stay inside [0,1].
double sparse_linear_target(const arch::Genome& g, std::uint64_t seed) {
  Rng rng(seed);
  double acc = 0.5;
  for (int pos = 0; pos < arch::kGenomeLength; pos += 4) {
    double unit = rng.uniform(-0.008, 0.008);
    acc += unit * g.genes[static_cast<std::size_t>(pos)];
  }
  return acc;
}

}  // namespace

TEST_CASE("prediction ranking agrees with the ground truth") {
  auto train = random_genomes(400, 4);
  std::vector<Pair> pairs;
  for (const auto& g : train) pairs.push_back({g, sparse_linear_target(g, 12)});
  SurrogateModel model = fit_low_fidelity(pairs, 500, 5e-3, 9);
  auto probe = random_genomes(50, 5);
  std::vector<double> predicted, truth;
  for (const auto& g : probe) {
    predicted.push_back(model.predict(g));
    truth.push_back(sparse_linear_target(g, 12));
  }
  CHECK(eval::kendall_tau(predicted, truth) >= 0.9);
}

TEST_CASE("fit preconditions and degenerate warning") {
  SurrogateModel model(small_cfg());
  CHECK_THROWS_AS(model.fit_low_fidelity({}, 10, 1e-3, 0), ConfigError);
  auto g = random_genomes(1, 6)[0];
  CHECK_THROWS_AS(
      model.fit_low_fidelity({{g, 0.5}, {g, 1.7}}, 10, 1e-3, 0), ConfigError);
  // identical features, distinct targets: warning, not failure
  model.fit_low_fidelity({{g, 0.3}, {g, 0.7}}, 10, 1e-3, 0);
  CHECK(!model.last_warning().empty());
  // healthy data clears the warning
  auto gs = random_genomes(4, 7);
  model.fit_low_fidelity(
      {{gs[0], 0.3}, {gs[1], 0.7}, {gs[2], 0.5}, {gs[3], 0.4}}, 10, 1e-3, 0);
  CHECK(model.last_warning().empty());
}

TEST_CASE("empty fine-tune list leaves the model unchanged") {
  auto genomes = random_genomes(10, 8);
  std::vector<Pair> pairs;
  for (const auto& g : genomes) pairs.push_back({g, linear_target(g, 13)});
  SurrogateModel model = fit_low_fidelity(pairs, 100, 5e-3, 10, small_cfg());
  std::vector<double> before;
  for (const auto& g : genomes) before.push_back(model.predict(g));
  finetune_high_fidelity(model, {}, 100, 5e-3);
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    CHECK(model.predict(genomes[i]) == before[i]);
  }
}

TEST_CASE("fine-tuning on the same distribution keeps held-out mse stable") {
  auto genomes = random_genomes(160, 9);
  std::vector<Pair> low, high, held;
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    Pair p{genomes[i], linear_target(genomes[i], 14)};
    if (i < 100) {
      low.push_back(p);
    } else if (i < 130) {
      high.push_back(p);
    } else {
      held.push_back(p);
    }
  }
  SurrogateModel model = fit_low_fidelity(low, 400, 5e-3, 11);
  auto held_mse = [&](const SurrogateModel& m) {
    double acc = 0;
    for (const auto& [g, t] : held) {
      double d = m.predict(g) - t;
      acc += d * d;
    }
    return acc / static_cast<double>(held.size());
  };
  double before = held_mse(model);
  model.finetune_high_fidelity(high, 60, 5e-4);
  double after = held_mse(model);
  CHECK(after <= before * 1.10 + 1e-6);
}

TEST_CASE("fine-tuning with shifted targets moves predictions toward them") {
  auto genomes = random_genomes(120, 10);
  std::vector<Pair> low, high;
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    double base = linear_target(genomes[i], 15) - 0.05;
    if (i < 80) {
      low.push_back({genomes[i], base});
    } else {
      high.push_back({genomes[i], std::min(1.0, base + 0.1)});
    }
  }
  SurrogateModel model = fit_low_fidelity(low, 400, 5e-3, 12);
  double before = 0, after = 0;
  for (const auto& [g, t] : high) before += model.predict(g);
  model.finetune_high_fidelity(high, 200, 1e-3);
  for (const auto& [g, t] : high) after += model.predict(g);
  CHECK(after - before > 0.05 * static_cast<double>(high.size()) * 0.5);
  CHECK(model.high_fidelity_count() == high.size());
}

TEST_CASE("prediction is deterministic and requires a fitted model") {
  SurrogateModel unfitted;
  auto g = random_genomes(1, 11)[0];
  CHECK_THROWS_AS(unfitted.predict(g), StateError);
  auto genomes = random_genomes(10, 12);
  std::vector<Pair> pairs;
  for (const auto& gg : genomes) pairs.push_back({gg, 0.5});
  SurrogateModel a = fit_low_fidelity(pairs, 50, 5e-3, 13, small_cfg());
  SurrogateModel b = fit_low_fidelity(pairs, 50, 5e-3, 13, small_cfg());
  CHECK(a.predict(g) == b.predict(g));
  CHECK(a.predict(g) == a.predict(g));
}

TEST_CASE("training stays finite under aggressive learning rates") {
  auto genomes = random_genomes(30, 13);
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    pairs.push_back({genomes[i], i % 2 == 0 ? 0.0 : 1.0});
  }
  // The global-norm clip keeps weights finite even at an oversized rate.
  CHECK_NOTHROW(fit_low_fidelity(pairs, 200, 1.0, 14, small_cfg()));
}

TEST_CASE("surrogate checkpoint round trip") {
  auto dir = std::filesystem::temp_directory_path() / "crna_surrogate_ckpt";
  std::filesystem::create_directories(dir);
  auto path = dir / "surrogate.ckpt";
  auto genomes = random_genomes(20, 14);
  std::vector<Pair> pairs;
  for (const auto& g : genomes) pairs.push_back({g, linear_target(g, 16)});
  SurrogateModel model = fit_low_fidelity(pairs, 200, 5e-3, 15, small_cfg());
  model.save(path, 0x1234);
  std::uint64_t hash = 0;
  SurrogateModel loaded = SurrogateModel::load(path, &hash);
  CHECK(hash == 0x1234);
  CHECK(loaded.fitted());
  for (const auto& g : genomes) {
    CHECK(std::fabs(loaded.predict(g) - model.predict(g)) < 1e-4);
  }
  CHECK(loaded.history().size() == model.history().size());
  std::filesystem::remove_all(dir);
}
