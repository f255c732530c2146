#include "crna/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "crna/error.hpp"
#include "crna/rng.hpp"

namespace crna::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      x = parent[static_cast<std::size_t>(x)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    // keep the smaller index as the root so representatives are canonical
    if (a > b) std::swap(a, b);
    parent[static_cast<std::size_t>(b)] = a;
  }
};

std::vector<double> ranks_of(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double mean(const std::vector<double>& v) {
  if (v.empty()) throw ConfigError("mean: empty vector");
  return std::accumulate(v.begin(), v.end(), 0.0) /
         static_cast<double>(v.size());
}

double pearson(const std::vector<double>& a, const std::vector<double>& b,
               bool* defined) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ConfigError("pearson: need two same-length vectors of size >= 2");
  }
  double ma = mean(a), mb = mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    if (defined) *defined = false;
    return kNaN;
  }
  if (defined) *defined = true;
  return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b,
                bool* defined) {
  return pearson(ranks_of(a), ranks_of(b), defined);
}

double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ConfigError("kendall_tau: need two same-length vectors of size >= 2");
  }
  long long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0 && db == 0) continue;
      if (da == 0) {
        ++ties_a;
      } else if (db == 0) {
        ++ties_b;
      } else if ((da > 0) == (db > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  double n0 = static_cast<double>(concordant + discordant);
  double denom = std::sqrt((n0 + static_cast<double>(ties_a)) *
                           (n0 + static_cast<double>(ties_b)));
  if (denom == 0.0) return 0.0;
  return (static_cast<double>(concordant) - static_cast<double>(discordant)) /
         denom;
}

MergePlan MergePlan::identity(int n) {
  MergePlan plan;
  plan.total_evals = n;
  plan.tau = 1.0;
  for (int i = 0; i < n; ++i) {
    plan.groups.push_back({i, {i}, 1.0});
  }
  return plan;
}

std::vector<int> MergePlan::representatives() const {
  std::vector<int> out;
  for (const auto& g : groups) out.push_back(g.representative);
  return out;
}

bool MergePlan::is_identity() const {
  return static_cast<int>(groups.size()) == total_evals;
}

void MergePlan::check_partition() const {
  std::vector<int> seen(static_cast<std::size_t>(total_evals), 0);
  for (const auto& g : groups) {
    bool rep_in_group = false;
    for (int m : g.members) {
      if (m < 0 || m >= total_evals) {
        throw ConfigError("merge plan: member index out of range");
      }
      seen[static_cast<std::size_t>(m)]++;
      rep_in_group = rep_in_group || m == g.representative;
    }
    if (!rep_in_group) {
      throw ConfigError("merge plan: representative not inside its group");
    }
    if (g.coefficient < 1.0 - 1e-12) {
      throw ConfigError("merge plan: coefficient below 1");
    }
  }
  for (int c : seen) {
    if (c != 1) throw ConfigError("merge plan: groups do not partition evals");
  }
}

std::string MergePlan::to_text(std::uint64_t config_hash) const {
  std::ostringstream os;
  os << "crna-merge-plan v1\n";
  os << "config_hash " << std::hex << config_hash << std::dec << "\n";
  os << "tau " << format_double(tau) << "\n";
  os << "evals " << total_evals << "\n";
  for (const auto& g : groups) {
    os << "group " << g.representative << " members ";
    for (std::size_t i = 0; i < g.members.size(); ++i) {
      if (i) os << ",";
      os << g.members[i];
    }
    os << " coeff " << format_double(g.coefficient) << "\n";
  }
  return os.str();
}

MergePlan MergePlan::from_text(const std::string& text,
                               std::uint64_t* config_hash) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "crna-merge-plan v1") {
    throw IoError("merge plan: bad header");
  }
  MergePlan plan;
  plan.groups.clear();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "config_hash") {
      std::uint64_t h;
      ls >> std::hex >> h >> std::dec;
      if (config_hash) *config_hash = h;
    } else if (key == "tau") {
      ls >> plan.tau;
    } else if (key == "evals") {
      ls >> plan.total_evals;
    } else if (key == "group") {
      MergeGroup g;
      std::string members_kw, coeff_kw, members;
      ls >> g.representative >> members_kw >> members >> coeff_kw >>
          g.coefficient;
      if (members_kw != "members" || coeff_kw != "coeff" || !ls) {
        throw IoError("merge plan: bad group line: " + line);
      }
      std::istringstream ms(members);
      std::string tok;
      while (std::getline(ms, tok, ',')) g.members.push_back(std::stoi(tok));
      plan.groups.push_back(std::move(g));
    } else {
      throw IoError("merge plan: unknown key '" + key + "'");
    }
  }
  plan.check_partition();
  return plan;
}

void MergePlan::save(const std::filesystem::path& path,
                     std::uint64_t config_hash) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_text(config_hash);
}

MergePlan MergePlan::load(const std::filesystem::path& path,
                          std::uint64_t* config_hash) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return from_text(buf.str(), config_hash);
}

std::string CorrelationResult::matrix_csv(
    const std::vector<std::string>& names) const {
  std::ostringstream os;
  os << "eval";
  for (std::size_t j = 0; j < n; ++j) {
    os << "," << (j < names.size() ? names[j] : "e" + std::to_string(j));
  }
  os << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    os << (i < names.size() ? names[i] : "e" + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      os << ",";
      if (is_defined(i, j)) {
        os << format_double(at(i, j));
      } else {
        os << "nan";
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string CorrelationResult::samples_csv(
    const std::vector<std::string>& names) const {
  std::ostringstream os;
  os << "genome";
  for (std::size_t j = 0; j < n; ++j) {
    os << "," << (j < names.size() ? names[j] : "e" + std::to_string(j));
  }
  os << "\n";
  for (std::size_t i = 0; i < accuracy_rows.size(); ++i) {
    os << (i < genomes.size() ? genomes[i].to_string() : std::to_string(i));
    for (double v : accuracy_rows[i]) os << "," << format_double(v);
    os << "\n";
  }
  return os.str();
}

double robust_accuracy(const net::ModelFn& model,
                       const attack::AttackSpec& spec,
                       const harness::Dataset& data, std::size_t sample_count,
                       int batch_size, std::uint64_t seed) {
  if (data.size() == 0) throw ConfigError("robust_accuracy: empty data");
  if (sample_count < 1) throw ConfigError("robust_accuracy: zero samples");
  if (sample_count > data.size()) {
    throw ConfigError("robust_accuracy: fidelity sample count exceeds dataset");
  }
  if (batch_size < 1) throw ConfigError("robust_accuracy: bad batch size");
  std::size_t correct = 0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < sample_count;
       start += static_cast<std::size_t>(batch_size), ++batch_index) {
    std::size_t count =
        std::min<std::size_t>(batch_size, sample_count - start);
    auto [x, y] = data.batch(start, count);
    attack::AttackSpec batch_spec = spec;
    batch_spec.seed = derive_seed(seed, {batch_index});
    attack::AttackResult r = attack::run_attack(model, x, y, batch_spec);
    for (std::uint8_t fooled : r.success) {
      if (!fooled) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(sample_count);
}

CorrelationResult correlate_rows(const std::vector<std::vector<double>>& rows,
                                 const std::string& metric) {
  if (rows.size() < 2) {
    throw ConfigError("correlate: need at least two sampled architectures");
  }
  const std::size_t n = rows[0].size();
  for (const auto& r : rows) {
    if (r.size() != n) throw ConfigError("correlate: ragged accuracy rows");
  }
  auto corr_fn = metric == "spearman" ? spearman : pearson;
  if (metric != "pearson" && metric != "spearman") {
    throw ConfigError("correlate: unknown metric '" + metric + "'");
  }
  CorrelationResult out;
  out.n = n;
  out.matrix.assign(n * n, kNaN);
  out.defined.assign(n * n, 0);
  out.accuracy_rows = rows;
  std::vector<std::vector<double>> cols(n, std::vector<double>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < n; ++j) cols[j][i] = rows[i][j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.matrix[i * n + i] = 1.0;
    out.defined[i * n + i] = 1;
    for (std::size_t j = i + 1; j < n; ++j) {
      bool def = false;
      double c = corr_fn(cols[i], cols[j], &def);
      out.matrix[i * n + j] = out.matrix[j * n + i] = c;
      out.defined[i * n + j] = out.defined[j * n + i] = def ? 1 : 0;
    }
  }
  return out;
}

CorrelationResult sample_and_correlate(const net::Supernet& net,
                                       std::size_t count,
                                       const std::vector<attack::AttackSpec>& suite,
                                       const harness::Dataset& data,
                                       std::size_t fidelity_samples,
                                       int batch_size, std::uint64_t seed,
                                       const std::string& metric) {
  if (count < 2) {
    throw ConfigError("sample_and_correlate: need at least two architectures");
  }
  Rng rng(derive_seed(seed, {0xa}));
  std::vector<arch::Genome> genomes;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < count; ++i) {
    arch::Genome g = arch::random_genome(rng);
    net::ModelFn model = net.subnet(g);
    std::vector<double> row(suite.size());
    for (std::size_t j = 0; j < suite.size(); ++j) {
      row[j] = robust_accuracy(model, suite[j], data, fidelity_samples,
                               batch_size, derive_seed(seed, {i, j}));
    }
    genomes.push_back(g);
    rows.push_back(std::move(row));
  }
  CorrelationResult out = correlate_rows(rows, metric);
  out.genomes = std::move(genomes);
  return out;
}

MergePlan build_merge_plan(const CorrelationResult& corr, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw ConfigError("build_merge_plan: tau must lie in (0, 1]");
  }
  const std::size_t n = corr.n;
  UnionFind uf(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      // zero-variance (undefined) correlations never merge
      if (corr.is_defined(i, j) && corr.at(i, j) >= tau) {
        uf.unite(static_cast<int>(i), static_cast<int>(j));
      }
    }
  }
  std::vector<std::vector<int>> members(n);
  for (std::size_t i = 0; i < n; ++i) {
    members[static_cast<std::size_t>(uf.find(static_cast<int>(i)))].push_back(
        static_cast<int>(i));
  }
  MergePlan plan;
  plan.tau = tau;
  plan.total_evals = static_cast<int>(n);
  for (std::size_t root = 0; root < n; ++root) {
    if (members[root].empty()) continue;
    MergeGroup g;
    g.representative = members[root].front();
    g.members = members[root];
    if (g.members.size() > 1 && !corr.accuracy_rows.empty()) {
      // coefficient per sampled architecture, then averaged (protocol rule)
      std::vector<double> ks;
      for (const auto& row : corr.accuracy_rows) {
        double rep = row[static_cast<std::size_t>(g.representative)];
        if (rep <= 0.0) continue;
        double sum = 0;
        for (int m : g.members) sum += row[static_cast<std::size_t>(m)];
        ks.push_back(sum / rep);
      }
      g.coefficient =
          ks.empty() ? static_cast<double>(g.members.size()) : mean(ks);
    }
    plan.groups.push_back(std::move(g));
  }
  plan.check_partition();
  return plan;
}

std::vector<double> average_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ConfigError("average_rows: no rows");
  std::vector<double> out(rows[0].size(), 0.0);
  for (const auto& r : rows) {
    if (r.size() != out.size()) throw ConfigError("average_rows: ragged rows");
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v /= static_cast<double>(rows.size());
  return out;
}

double comprehensive_ra(const std::vector<double>& merged_accuracies,
                        const MergePlan& plan, int total_evals) {
  if (merged_accuracies.size() != plan.groups.size()) {
    throw ConfigError(
        "comprehensive_ra: accuracy count does not match plan group count");
  }
  double acc = 0;
  for (std::size_t i = 0; i < plan.groups.size(); ++i) {
    acc += plan.groups[i].coefficient * merged_accuracies[i];
  }
  return acc / static_cast<double>(total_evals);
}

EvaluationReport evaluate_suite(const net::Supernet& net,
                                const arch::Genome& genome,
                                const std::vector<attack::AttackSpec>& suite,
                                const MergePlan& plan,
                                const harness::Dataset& data,
                                const FidelityLevel& fidelity, int batch_size,
                                std::uint64_t seed) {
  if (plan.total_evals != static_cast<int>(suite.size())) {
    throw ConfigError("evaluate_suite: plan size does not match suite");
  }
  plan.check_partition();
  EvaluationReport report;
  report.genome = genome;
  report.fidelity_label = fidelity.label;
  net::ModelFn model = net.subnet(genome);
  for (int idx : plan.representatives()) {
    auto t0 = std::chrono::steady_clock::now();
    double acc = robust_accuracy(model, suite[static_cast<std::size_t>(idx)],
                                 data, fidelity.samples, batch_size,
                                 derive_seed(seed, {static_cast<std::uint64_t>(idx)}));
    auto t1 = std::chrono::steady_clock::now();
    report.eval_indices.push_back(idx);
    report.accuracies.push_back(acc);
    report.wall_seconds.push_back(
        std::chrono::duration<double>(t1 - t0).count());
  }
  return report;
}

double comprehensive_ra_of(const EvaluationReport& report,
                           const MergePlan& plan) {
  return comprehensive_ra(report.accuracies, plan, plan.total_evals);
}

}  // namespace crna::eval
