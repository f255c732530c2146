#include "crna/surrogate.hpp"

#include <algorithm>
#include <cmath>

#include "crna/checkpoint.hpp"
#include "crna/error.hpp"
#include "crna/graph.hpp"
#include "crna/rng.hpp"
#include "json.hpp"

namespace crna::surrogate {

namespace {

struct Adam {
  std::vector<Tensor> m, v;
  int t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit Adam(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
  }

  void step(std::vector<Tensor>& params,
            const std::vector<const Tensor*>& grads, double lr) {
    ++t;
    double c1 = 1.0 - std::pow(beta1, t);
    double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k];
      const Tensor& g = *grads[k];
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[k][i] = beta1 * m[k][i] + (1 - beta1) * g[i];
        v[k][i] = beta2 * v[k][i] + (1 - beta2) * g[i] * g[i];
        double mhat = m[k][i] / c1;
        double vhat = v[k][i] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

}  // namespace

SurrogateModel::SurrogateModel(SurrogateConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.hidden.empty()) {
    throw ConfigError("surrogate: need at least one hidden layer");
  }
}

int SurrogateModel::feature_dim() {
  int dim = 0;
  for (int i = 0; i < arch::kGenomeLength; ++i) dim += arch::gene_cardinality(i);
  return dim;
}

std::vector<double> SurrogateModel::encode(const arch::Genome& g) {
  auto violations = arch::validate(g);
  if (!violations.empty()) {
    throw arch::GenomeError("surrogate encode: invalid genome",
                            std::move(violations));
  }
  std::vector<double> out(static_cast<std::size_t>(feature_dim()), 0.0);
  std::size_t offset = 0;
  for (int i = 0; i < arch::kGenomeLength; ++i) {
    out[offset + static_cast<std::size_t>(g.genes[static_cast<std::size_t>(i)])] = 1.0;
    offset += static_cast<std::size_t>(arch::gene_cardinality(i));
  }
  return out;
}

void SurrogateModel::init_weights(std::uint64_t seed) {
  Rng rng(seed);
  weights_.clear();
  std::size_t in = static_cast<std::size_t>(feature_dim());
  std::vector<std::size_t> dims;
  for (int h : cfg_.hidden) dims.push_back(static_cast<std::size_t>(h));
  dims.push_back(1);
  for (std::size_t layer = 0; layer < dims.size(); ++layer) {
    std::size_t out = dims[layer];
    Tensor w({out, in});
    double std = std::sqrt(2.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0, std);
    weights_.push_back(std::move(w));
    weights_.emplace_back(Shape{out});  // zero bias
    in = out;
  }
}

void SurrogateModel::train_batch(
    const std::vector<std::vector<double>>& features,
    const std::vector<double>& targets, int epochs, double lr,
    const std::string& phase) {
  if (epochs < 1) throw ConfigError("surrogate: epochs must be >= 1");
  if (lr <= 0) throw ConfigError("surrogate: learning rate must be positive");
  const std::size_t B = features.size();
  const std::size_t F = static_cast<std::size_t>(feature_dim());

  Tensor x({B, F});
  for (std::size_t i = 0; i < B; ++i) {
    std::copy(features[i].begin(), features[i].end(), x.data() + i * F);
  }
  // standardized targets; predictions fold the statistics back in
  target_mean_ = 0.0;
  for (double t : targets) target_mean_ += t;
  target_mean_ /= static_cast<double>(B);
  target_std_ = 0.0;
  for (double t : targets) {
    target_std_ += (t - target_mean_) * (t - target_mean_);
  }
  target_std_ = std::sqrt(target_std_ / static_cast<double>(B));
  if (target_std_ < 1e-9) target_std_ = 1.0;
  Tensor y({B, 1});
  for (std::size_t i = 0; i < B; ++i) {
    y[i] = (targets[i] - target_mean_) / target_std_;
  }

  // Build the tape once; per epoch only the parameter leaves are rebound.
  ad::Graph g;
  ad::Var xv = g.constant(x);
  std::vector<ad::Var> wvars;
  ad::Var h = xv;
  for (std::size_t layer = 0; layer + 1 < weights_.size(); layer += 2) {
    ad::Var w = g.parameter(weights_[layer], true);
    ad::Var b = g.parameter(weights_[layer + 1], true);
    wvars.push_back(w);
    wvars.push_back(b);
    h = g.affine(h, w, b);
    if (layer + 2 < weights_.size()) h = g.relu(h);
  }
  ad::Var diff = g.sub(h, g.constant(y));
  ad::Var loss = g.reduce_mean(g.mul(diff, diff));

  Adam adam(weights_);
  TrainingRecord record;
  record.phase = phase;
  record.sample_count = B;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      g.set_value(wvars[k], weights_[k]);
    }
    g.forward();
    g.backward(loss);
    record.epoch_mse.push_back(g.value(loss)[0] * target_std_ * target_std_);

    std::vector<Tensor> grads;
    grads.reserve(wvars.size());
    double norm2 = 0;
    for (std::size_t k = 0; k < wvars.size(); ++k) {
      Tensor gw = g.grad(wvars[k]);
      for (std::size_t i = 0; i < gw.numel(); ++i) {
        gw[i] += cfg_.weight_decay * weights_[k][i];
        norm2 += gw[i] * gw[i];
      }
      grads.push_back(std::move(gw));
    }
    double norm = std::sqrt(norm2);
    // global-norm gradient clipping keeps weights finite
    if (norm > cfg_.grad_clip) {
      double scale = cfg_.grad_clip / norm;
      for (Tensor& t : grads) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= scale;
      }
    }
    std::vector<const Tensor*> grad_ptrs;
    for (const Tensor& t : grads) grad_ptrs.push_back(&t);
    adam.step(weights_, grad_ptrs, lr);
    for (const Tensor& w : weights_) {
      if (!w.all_finite()) {
        throw NumericError("surrogate: non-finite weights during training");
      }
    }
  }
  history_.push_back(std::move(record));
}

void SurrogateModel::fit_low_fidelity(const std::vector<Pair>& pairs,
                                      int epochs, double lr,
                                      std::uint64_t seed) {
  if (pairs.size() < 2) {
    throw ConfigError("fit_low_fidelity: need at least two pairs");
  }
  std::vector<std::vector<double>> feats;
  std::vector<double> targets;
  for (const auto& [g, ra] : pairs) {
    if (ra < -1e-9 || ra > 1 + 1e-9) {
      throw ConfigError("fit_low_fidelity: robust accuracy outside [0,1]");
    }
    feats.push_back(encode(g));
    targets.push_back(ra);
  }
  warning_.clear();
  bool all_same_features = true;
  bool all_same_targets = true;
  for (std::size_t i = 1; i < feats.size(); ++i) {
    all_same_features = all_same_features && feats[i] == feats[0];
    all_same_targets = all_same_targets && targets[i] == targets[0];
  }
  if (all_same_features && !all_same_targets) {
    warning_ =
        "degenerate training set: identical features with distinct targets";
  }
  init_weights(seed);
  high_fidelity_.clear();
  history_.clear();
  train_batch(feats, targets, epochs, lr, "low_fidelity");
  fitted_ = true;
}

void SurrogateModel::finetune_high_fidelity(const std::vector<Pair>& new_pairs,
                                            int epochs, double lr) {
  if (!fitted_) {
    throw StateError("finetune_high_fidelity: model has not been fitted");
  }
  if (new_pairs.empty()) return;
  for (const auto& [g, ra] : new_pairs) {
    if (ra < -1e-9 || ra > 1 + 1e-9) {
      throw ConfigError("finetune_high_fidelity: accuracy outside [0,1]");
    }
    high_fidelity_.push_back({g, ra});
  }
  // replay the whole high-fidelity archive
  std::vector<std::vector<double>> feats;
  std::vector<double> targets;
  for (const auto& [g, ra] : high_fidelity_) {
    feats.push_back(encode(g));
    targets.push_back(ra);
  }
  train_batch(feats, targets, epochs, lr, "high_fidelity");
}

double SurrogateModel::predict(const arch::Genome& g) const {
  if (!fitted_) throw StateError("predict: model has not been fitted");
  std::vector<double> h = encode(g);
  for (std::size_t layer = 0; layer < weights_.size(); layer += 2) {
    const Tensor& w = weights_[layer];
    const Tensor& b = weights_[layer + 1];
    std::vector<double> out(w.dim(0));
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double acc = b[o];
      const double* wr = w.data() + o * w.dim(1);
      for (std::size_t i = 0; i < h.size(); ++i) acc += wr[i] * h[i];
      out[o] = acc;
    }
    if (layer + 2 < weights_.size()) {
      for (double& v : out) v = v > 0 ? v : 0;
    }
    h = std::move(out);
  }
  double value = target_mean_ + target_std_ * h[0];
  if (!std::isfinite(value)) throw NumericError("predict: non-finite output");
  return value;
}

double SurrogateModel::last_mse() const {
  if (history_.empty() || history_.back().epoch_mse.empty()) {
    throw StateError("last_mse: no training history");
  }
  return history_.back().epoch_mse.back();
}

void SurrogateModel::save(const std::filesystem::path& path,
                          std::uint64_t config_hash) const {
  io::Container c;
  c.magic = "CRNS";
  c.config_hash = config_hash;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : history_) {
    hist.push_back({{"phase", r.phase},
                    {"samples", r.sample_count},
                    {"epoch_mse", r.epoch_mse}});
  }
  nlohmann::json meta = {{"kind", "surrogate"},
                         {"hidden", cfg_.hidden},
                         {"grad_clip", cfg_.grad_clip},
                         {"weight_decay", cfg_.weight_decay},
                         {"target_mean", target_mean_},
                         {"target_std", target_std_},
                         {"fitted", fitted_},
                         {"history", hist}};
  c.meta_json = meta.dump();
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    c.arrays.push_back(io::to_f32("w" + std::to_string(i), weights_[i]));
  }
  io::save_container(path, c);
}

SurrogateModel SurrogateModel::load(const std::filesystem::path& path,
                                    std::uint64_t* config_hash) {
  io::Container c = io::load_container(path, "CRNS");
  nlohmann::json meta = nlohmann::json::parse(c.meta_json);
  SurrogateConfig cfg;
  cfg.hidden = meta.at("hidden").get<std::vector<int>>();
  cfg.grad_clip = meta.at("grad_clip").get<double>();
  cfg.weight_decay = meta.at("weight_decay").get<double>();
  SurrogateModel model(cfg);
  model.target_mean_ = meta.at("target_mean").get<double>();
  model.target_std_ = meta.at("target_std").get<double>();
  model.weights_.resize(c.arrays.size());
  for (const auto& a : c.arrays) {
    if (a.name.size() < 2 || a.name[0] != 'w') {
      throw IoError("surrogate checkpoint: unknown array '" + a.name + "'");
    }
    std::size_t idx = static_cast<std::size_t>(std::stoi(a.name.substr(1)));
    if (idx >= model.weights_.size()) {
      throw IoError("surrogate checkpoint: array index out of range");
    }
    model.weights_[idx] = io::to_tensor(a);
  }
  model.fitted_ = meta.at("fitted").get<bool>();
  if (meta.contains("history")) {
    for (const auto& r : meta.at("history")) {
      TrainingRecord rec;
      rec.phase = r.at("phase").get<std::string>();
      rec.sample_count = r.at("samples").get<std::size_t>();
      rec.epoch_mse = r.at("epoch_mse").get<std::vector<double>>();
      model.history_.push_back(std::move(rec));
    }
  }
  if (config_hash) *config_hash = c.config_hash;
  return model;
}

SurrogateModel fit_low_fidelity(const std::vector<Pair>& pairs, int epochs,
                                double lr, std::uint64_t seed,
                                SurrogateConfig cfg) {
  SurrogateModel model(std::move(cfg));
  model.fit_low_fidelity(pairs, epochs, lr, seed);
  return model;
}

void finetune_high_fidelity(SurrogateModel& model,
                            const std::vector<Pair>& new_pairs, int epochs,
                            double lr) {
  model.finetune_high_fidelity(new_pairs, epochs, lr);
}

double predict(const SurrogateModel& model, const arch::Genome& g) {
  return model.predict(g);
}

}  // namespace crna::surrogate
