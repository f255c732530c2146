#include "crna/network.hpp"

#include <algorithm>
#include <cmath>

#include "crna/checkpoint.hpp"
#include "crna/error.hpp"
#include "crna/rng.hpp"
#include "json.hpp"

namespace crna::net {

namespace {

using arch::Genome;
using arch::OpType;

struct LayerBuilder {
  BuildContext& ctx;
  int channels;

  ad::Graph& g() { return ctx.graph; }

  ad::Var weight(const std::string& name) {
    if (ctx.touched) ctx.touched->insert(name);
    const Tensor& t = ctx.store->param(name);
    if (ctx.training) {
      ad::Var v = g().parameter(t, true);
      if (ctx.trainable) ctx.trainable->push_back({name, v});
      return v;
    }
    return g().constant(t);
  }

  ad::BatchNormState* state(const std::string& name) {
    if (ctx.touched) ctx.touched->insert("bn@" + name);
    // Eval-mode forward only reads the state; training is single-writer.
    return &const_cast<ParamStore*>(ctx.store)->bn_state(name);
  }

  ad::Var bn(ad::Var x, const std::string& prefix) {
    return g().batch_norm(x, weight(prefix + "/bn_g"),
                          weight(prefix + "/bn_b"), state(prefix + "/bn"),
                          ctx.training);
  }

  // relu -> 1x1 conv -> bn; adapts channels and resolution at cell inputs.
  ad::Var preprocess(ad::Var x, const std::string& prefix, int stride) {
    ad::Var h = g().relu(x);
    h = g().conv2d(h, weight(prefix + "/w"), ad::Var{}, {.stride = stride});
    return bn(h, prefix);
  }

  // relu -> depthwise conv -> pointwise conv -> bn
  ad::Var sep(ad::Var x, int stride, int dilation, const std::string& prefix) {
    ad::Var h = g().relu(x);
    int k = static_cast<int>(ctx.store->param(prefix + "/dw").dim(2));
    int pad = dilation == 1 ? (k - 1) / 2 : (k - 1);
    h = g().conv2d(h, weight(prefix + "/dw"), ad::Var{},
                   {.stride = stride, .pad = pad, .dilation = dilation,
                    .groups = channels});
    h = g().conv2d(h, weight(prefix + "/pw"), ad::Var{}, {});
    return bn(h, prefix);
  }

  ad::Var edge_op(ad::Var input, OpType op, int stride,
                  const std::string& prefix) {
    switch (op) {
      case OpType::None:
        return g().zero_strided(input, stride);
      case OpType::MaxPool3x3:
        return g().max_pool(input, 3, stride, 1);
      case OpType::AvgPool3x3:
        return g().avg_pool(input, 3, stride, 1);
      case OpType::SkipConnect:
        if (stride == 1) return input;
        return bn(g().conv2d(g().relu(input), weight(prefix + "/skip/w"),
                             ad::Var{}, {.stride = stride}),
                  prefix + "/skip");
      case OpType::SepConv3x3:
        return sep(input, stride, 1, prefix + "/sep3");
      case OpType::SepConv5x5:
        return sep(input, stride, 1, prefix + "/sep5");
      case OpType::DilConv3x3:
        return sep(input, stride, 2, prefix + "/dil3");
      case OpType::DilConv5x5:
        return sep(input, stride, 2, prefix + "/dil5");
    }
    throw ConfigError("edge_op: unknown op");
  }

  ad::Var cell(ad::Var prev_prev, ad::Var prev, int index, bool reduction,
               int pre0_stride, const Genome& genome) {
    std::string cp = "c" + std::to_string(index);
    std::vector<ad::Var> states;
    states.push_back(preprocess(prev_prev, cp + "/pre0", pre0_stride));
    states.push_back(preprocess(prev, cp + "/pre1", 1));
    int half = reduction ? 1 : 0;
    for (int t = 0; t < arch::kNodesPerCell; ++t) {
      ad::Var parts[2];
      for (int slot = 0; slot < 2; ++slot) {
        int src = genome.src(half, t, slot);
        OpType op = static_cast<OpType>(genome.op(half, t, slot));
        int stride = (reduction && src < 2) ? 2 : 1;
        std::string prefix =
            cp + "/n" + std::to_string(t) + "/e" + std::to_string(slot);
        parts[slot] = edge_op(states[static_cast<std::size_t>(src)], op,
                              stride, prefix);
      }
      states.push_back(g().add(parts[0], parts[1]));
    }
    return g().concat_channels({states[2], states[3], states[4], states[5]});
  }
};

constexpr const char* kOpPrefixes[4] = {"sep3", "sep5", "dil3", "dil5"};
constexpr int kOpKernel[4] = {3, 5, 3, 5};

}  // namespace

Tensor& ParamStore::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw StateError("missing parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw StateError("missing parameter '" + name + "'");
  return it->second;
}

ad::BatchNormState& ParamStore::bn_state(const std::string& name) {
  auto it = bn.find(name);
  if (it == bn.end()) throw StateError("missing bn state '" + name + "'");
  return it->second;
}

ad::Var build_cell_network(BuildContext& ctx, const NetworkConfig& cfg,
                           const arch::Genome& genome, ad::Var x) {
  auto violations = arch::validate(genome);
  if (!violations.empty()) {
    throw arch::GenomeError("build_cell_network: invalid genome",
                            std::move(violations));
  }
  LayerBuilder lb{ctx, cfg.channels};
  ad::Graph& g = ctx.graph;
  ad::Var stem = g.conv2d(x, lb.weight("stem/w"), ad::Var{}, {.pad = 1});
  stem = lb.bn(stem, "stem");
  ad::Var prev_prev = stem, prev = stem;
  for (int i = 0; i < cfg.cells; ++i) {
    bool reduction = cfg.is_reduction_cell(i);
    int pre0_stride = static_cast<int>(g.shape(prev_prev)[2] / g.shape(prev)[2]);
    ad::Var out = lb.cell(prev_prev, prev, i, reduction, pre0_stride, genome);
    prev_prev = prev;
    prev = out;
  }
  ad::Var pooled = g.global_avg_pool(prev);
  return g.affine(pooled, lb.weight("fc/w"), lb.weight("fc/b"));
}

namespace {

// Walks every bank entry in canonical order. visit(name, shape, kind) with
// kind: 0 = conv weight, 1 = bn gamma, 2 = bn beta, 3 = fc weight, 4 = bias.
template <typename Fn>
void walk_params(const NetworkConfig& cfg, Fn&& visit) {
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  auto conv_bn = [&](const std::string& prefix, Shape wshape) {
    visit(prefix + "/w", wshape, 0);
    visit(prefix + "/bn_g", Shape{wshape[0]}, 1);
    visit(prefix + "/bn_b", Shape{wshape[0]}, 2);
  };
  conv_bn("stem", {C, static_cast<std::size_t>(cfg.in_channels), 3, 3});
  std::size_t ch_pp = C, ch_p = C;
  for (int i = 0; i < cfg.cells; ++i) {
    std::string cp = "c" + std::to_string(i);
    conv_bn(cp + "/pre0", {C, ch_pp, 1, 1});
    conv_bn(cp + "/pre1", {C, ch_p, 1, 1});
    bool reduction = cfg.is_reduction_cell(i);
    for (int t = 0; t < arch::kNodesPerCell; ++t) {
      for (int s = 0; s < 2; ++s) {
        std::string ep = cp + "/n" + std::to_string(t) + "/e" + std::to_string(s);
        for (int o = 0; o < 4; ++o) {
          std::string op = ep + "/" + kOpPrefixes[o];
          std::size_t k = static_cast<std::size_t>(kOpKernel[o]);
          visit(op + "/dw", Shape{C, 1, k, k}, 0);
          visit(op + "/pw", Shape{C, C, 1, 1}, 0);
          visit(op + "/bn_g", Shape{C}, 1);
          visit(op + "/bn_b", Shape{C}, 2);
        }
        if (reduction) {
          conv_bn(ep + "/skip", {C, C, 1, 1});
        }
      }
    }
    ch_pp = ch_p;
    ch_p = 4 * C;
  }
  visit("fc/w", Shape{static_cast<std::size_t>(cfg.classes), 4 * C}, 3);
  visit("fc/b", Shape{static_cast<std::size_t>(cfg.classes)}, 4);
}

void init_store(ParamStore& store, const NetworkConfig& cfg,
                std::uint64_t seed) {
  Rng rng(seed);
  walk_params(cfg, [&](const std::string& name, const Shape& shape, int kind) {
    Tensor t(shape);
    switch (kind) {
      case 0: {  // He-normal over fan-in
        double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
        double std = std::sqrt(2.0 / fan_in);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0, std);
        break;
      }
      case 1:
        t.fill(1.0);
        break;
      case 3: {
        double std = std::sqrt(1.0 / static_cast<double>(shape[1]));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0, std);
        break;
      }
      default:
        break;  // beta and bias start at zero
    }
    store.params.emplace(name, std::move(t));
    if (kind == 1) {
      std::string prefix = name.substr(0, name.size() - 5);  // strip "/bn_g"
      store.bn.emplace(prefix + "/bn", ad::BatchNormState(shape[0]));
    }
  });
}

std::pair<Tensor, std::vector<int>> gather_batch(
    const harness::Dataset& data, const std::vector<std::size_t>& order,
    std::size_t start, std::size_t count) {
  std::size_t stride = data.images.numel() / data.size();
  Tensor x({count, data.images.dim(1), data.images.dim(2), data.images.dim(3)});
  std::vector<int> y(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t src = order[start + i];
    std::copy(data.images.data() + src * stride,
              data.images.data() + (src + 1) * stride, x.data() + i * stride);
    y[i] = data.labels[src];
  }
  return {std::move(x), std::move(y)};
}

// Shared training loop: the supernet samples a fresh path per step, a
// standalone network keeps its genome fixed.
std::vector<double> train_network(
    ParamStore& store, const NetworkConfig& cfg, const harness::Dataset& data,
    const TrainConfig& tc,
    const std::function<Genome(Rng&)>& sample_path) {
  if (tc.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (tc.batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  if (tc.path_sampling != "uniform") {
    throw ConfigError("train: unknown path sampling strategy '" +
                      tc.path_sampling + "'");
  }
  for (int label : data.labels) {
    if (label < 0 || label >= cfg.classes) {
      throw ConfigError("train: label outside class count");
    }
  }
  Rng rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> losses;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < data.size();
         start += static_cast<std::size_t>(tc.batch_size)) {
      std::size_t count =
          std::min<std::size_t>(tc.batch_size, data.size() - start);
      auto [x, y] = gather_batch(data, order, start, count);
      Genome genome = sample_path(rng);
      try {
        if (tc.adversarial) {
          // Perturb the batch with a single FGSM step against the sampled
          // path (eval mode so running statistics stay untouched).
          ad::Graph ag;
          BuildContext actx{ag, &store, false, nullptr, nullptr};
          ad::Var xv = ag.parameter(x, true);
          ad::Var logits = build_cell_network(actx, cfg, genome, xv);
          ad::Var loss = ag.reduce_sum(ag.softmax_cross_entropy(logits, y));
          ag.forward();
          ag.backward(loss);
          const Tensor& gx = ag.grad(xv);
          for (std::size_t i = 0; i < x.numel(); ++i) {
            double s = gx[i] > 0 ? 1.0 : (gx[i] < 0 ? -1.0 : 0.0);
            x[i] = std::min(1.0, std::max(0.0, x[i] + tc.adv_epsilon * s));
          }
        }
        ad::Graph g;
        std::vector<std::pair<std::string, ad::Var>> trainable;
        BuildContext ctx{g, &store, true, &trainable, nullptr};
        ad::Var xv = g.constant(x);
        ad::Var logits = build_cell_network(ctx, cfg, genome, xv);
        ad::Var loss = g.reduce_mean(g.softmax_cross_entropy(logits, y));
        g.forward();
        epoch_loss += g.value(loss)[0];
        ++batches;
        g.backward(loss);
        for (auto& [name, var] : trainable) {
          sgd_step(store.param(name), g.grad(var), tc.lr);
        }
      } catch (const NumericError& e) {
        throw NumericError("training aborted at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
    }
    losses.push_back(epoch_loss / static_cast<double>(batches));
  }
  return losses;
}

}  // namespace

std::vector<std::string> supernet_param_names(const NetworkConfig& cfg) {
  std::vector<std::string> names;
  walk_params(cfg, [&](const std::string& name, const Shape&, int) {
    names.push_back(name);
  });
  return names;
}

Supernet::Supernet(NetworkConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  init_store(store_, cfg_, init_seed);
}

ModelFn Supernet::subnet(const arch::Genome& genome) const {
  const Supernet* self = this;
  return [self, genome](ad::Graph& g, ad::Var x) {
    BuildContext ctx{g, &self->store_, false, nullptr, nullptr};
    return build_cell_network(ctx, self->cfg_, genome, x);
  };
}

Tensor Supernet::infer(const arch::Genome& genome, const Tensor& batch) const {
  ad::Graph g;
  ad::Var x = g.constant(batch);
  BuildContext ctx{g, &store_, false, nullptr, nullptr};
  ad::Var logits = build_cell_network(ctx, cfg_, genome, x);
  g.forward();
  return g.value(logits);
}

std::set<std::string> Supernet::touched_params(const arch::Genome& genome) const {
  std::set<std::string> touched;
  ad::Graph g;
  BuildContext ctx{g, &store_, false, nullptr, &touched};
  std::size_t s = static_cast<std::size_t>(cfg_.image_size);
  ad::Var x = g.constant(
      Tensor({1, static_cast<std::size_t>(cfg_.in_channels), s, s}));
  build_cell_network(ctx, cfg_, genome, x);
  return touched;
}

std::vector<double> Supernet::train(const harness::Dataset& data,
                                    const TrainConfig& tc) {
  auto losses = train_network(store_, cfg_, data, tc,
                              [](Rng& rng) { return arch::random_genome(rng); });
  train_losses_.insert(train_losses_.end(), losses.begin(), losses.end());
  return losses;
}

void Supernet::save(const std::filesystem::path& path,
                    std::uint64_t config_hash) const {
  io::Container c;
  c.magic = "CRNA";
  c.config_hash = config_hash;
  nlohmann::json meta = {
      {"kind", "supernet"},        {"cells", cfg_.cells},
      {"channels", cfg_.channels}, {"in_channels", cfg_.in_channels},
      {"classes", cfg_.classes},   {"image_size", cfg_.image_size},
      {"train_losses", train_losses_}};
  c.meta_json = meta.dump();
  for (const auto& [name, t] : store_.params) {
    c.arrays.push_back(io::to_f32("p:" + name, t));
  }
  for (const auto& [name, st] : store_.bn) {
    c.arrays.push_back(io::to_f32("bnm:" + name, st.running_mean));
    c.arrays.push_back(io::to_f32("bnv:" + name, st.running_var));
  }
  io::save_container(path, c);
}

Supernet Supernet::load(const std::filesystem::path& path,
                        std::uint64_t* config_hash) {
  io::Container c = io::load_container(path, "CRNA");
  nlohmann::json meta = nlohmann::json::parse(c.meta_json);
  NetworkConfig cfg;
  cfg.cells = meta.at("cells").get<int>();
  cfg.channels = meta.at("channels").get<int>();
  cfg.in_channels = meta.at("in_channels").get<int>();
  cfg.classes = meta.at("classes").get<int>();
  cfg.image_size = meta.at("image_size").get<int>();
  Supernet net(cfg, 0);
  if (meta.contains("train_losses")) {
    net.train_losses_ = meta.at("train_losses").get<std::vector<double>>();
  }
  std::size_t loaded = 0;
  for (const auto& a : c.arrays) {
    if (a.name.rfind("p:", 0) == 0) {
      Tensor& dst = net.store_.param(a.name.substr(2));
      if (dst.shape() != a.shape) {
        throw IoError("checkpoint: shape mismatch for " + a.name);
      }
      dst = io::to_tensor(a);
      ++loaded;
    } else if (a.name.rfind("bnm:", 0) == 0) {
      net.store_.bn_state(a.name.substr(4)).running_mean = io::to_tensor(a);
    } else if (a.name.rfind("bnv:", 0) == 0) {
      net.store_.bn_state(a.name.substr(4)).running_var = io::to_tensor(a);
    } else {
      throw IoError("checkpoint: unknown array '" + a.name + "'");
    }
  }
  if (loaded != net.store_.params.size()) {
    throw IoError("checkpoint: incomplete parameter set in " + path.string());
  }
  if (config_hash) *config_hash = c.config_hash;
  return net;
}

Supernet train_supernet(const harness::Dataset& data, const NetworkConfig& net,
                        const TrainConfig& train) {
  Supernet s(net, derive_seed(train.seed, {0x5e7}));
  s.train(data, train);
  return s;
}

Tensor extract_and_infer(const Supernet& net, const arch::Genome& genome,
                         const Tensor& batch) {
  return net.infer(genome, batch);
}

CellNetwork::CellNetwork(NetworkConfig cfg, arch::Genome genome,
                         std::uint64_t init_seed)
    : cfg_(cfg), genome_(genome) {
  // Initialize the full bank deterministically, then keep only the entries
  // this genome's sub-network uses.
  init_store(store_, cfg_, init_seed);
  std::set<std::string> touched;
  {
    ad::Graph g;
    BuildContext ctx{g, &store_, false, nullptr, &touched};
    std::size_t s = static_cast<std::size_t>(cfg_.image_size);
    ad::Var x = g.constant(
        Tensor({1, static_cast<std::size_t>(cfg_.in_channels), s, s}));
    build_cell_network(ctx, cfg_, genome_, x);
  }
  for (auto it = store_.params.begin(); it != store_.params.end();) {
    it = touched.count(it->first) ? std::next(it) : store_.params.erase(it);
  }
  for (auto it = store_.bn.begin(); it != store_.bn.end();) {
    it = touched.count("bn@" + it->first) ? std::next(it) : store_.bn.erase(it);
  }
}

CellNetwork CellNetwork::from_supernet(const Supernet& net,
                                       const arch::Genome& genome) {
  CellNetwork out(net.config(), genome, 0);
  for (auto& [name, t] : out.store_.params) {
    t = net.store().param(name);
  }
  for (auto& [name, st] : out.store_.bn) {
    auto it = net.store().bn.find(name);
    if (it == net.store().bn.end()) {
      throw StateError("from_supernet: missing bn state " + name);
    }
    st = it->second;
  }
  return out;
}

ModelFn CellNetwork::model() const {
  const CellNetwork* self = this;
  return [self](ad::Graph& g, ad::Var x) {
    BuildContext ctx{g, &self->store_, false, nullptr, nullptr};
    return build_cell_network(ctx, self->cfg_, self->genome_, x);
  };
}

Tensor CellNetwork::infer(const Tensor& batch) const {
  ad::Graph g;
  ad::Var x = g.constant(batch);
  BuildContext ctx{g, &store_, false, nullptr, nullptr};
  ad::Var logits = build_cell_network(ctx, cfg_, genome_, x);
  g.forward();
  return g.value(logits);
}

std::vector<double> CellNetwork::train(const harness::Dataset& data,
                                       const TrainConfig& tc) {
  arch::Genome fixed = genome_;
  return train_network(store_, cfg_, data, tc,
                       [fixed](Rng&) { return fixed; });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t C = logits.dim(1);
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    const double* row = logits.data() + n * C;
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

double clean_accuracy(const ModelFn& model, const harness::Dataset& data,
                      std::size_t sample_count, int batch_size) {
  sample_count = std::min(sample_count, data.size());
  if (sample_count == 0) throw ConfigError("clean_accuracy: empty data");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < sample_count;
       start += static_cast<std::size_t>(batch_size)) {
    std::size_t count =
        std::min<std::size_t>(batch_size, sample_count - start);
    auto [x, y] = data.batch(start, count);
    ad::Graph g;
    ad::Var xv = g.constant(x);
    ad::Var logits = model(g, xv);
    g.forward();
    auto pred = argmax_rows(g.value(logits));
    for (std::size_t i = 0; i < count; ++i) {
      if (pred[i] == y[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(sample_count);
}

}  // namespace crna::net
