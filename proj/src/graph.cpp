#include "crna/graph.hpp"

#include <algorithm>
#include <cmath>

#include "crna/error.hpp"

namespace crna::ad {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;
constexpr double kSixth = 3.0 / M_PI;  // radians -> hue sector scale

int conv_out_extent(int in, int kernel, int stride, int pad, int dilation) {
  int eff = (kernel - 1) * dilation + 1;
  return (in + 2 * pad - eff) / stride + 1;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Clip: return "clip";
    case Op::Relu: return "relu";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool: return "max_pool";
    case Op::AvgPool: return "avg_pool";
    case Op::GlobalAvgPool: return "global_avg_pool";
    case Op::Affine: return "affine";
    case Op::BatchNorm: return "batch_norm";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::CwLoss: return "cw_loss";
    case Op::ReduceSum: return "reduce_sum";
    case Op::ReduceMean: return "reduce_mean";
    case Op::Reshape: return "reshape";
    case Op::ConcatChannels: return "concat_channels";
    case Op::SliceChannels: return "slice_channels";
    case Op::PerImageAdd: return "per_image_add";
    case Op::PerImageMul: return "per_image_mul";
    case Op::RgbToHsv: return "rgb_to_hsv";
    case Op::HsvToRgb: return "hsv_to_rgb";
    case Op::Rotate: return "rotate";
    case Op::ZeroStrided: return "zero_strided";
  }
  return "?";
}

std::string Graph::node_label(const Node& n, int id) const {
  std::string s = std::string(op_name(n.op)) + "#" + std::to_string(id);
  if (!n.input_name.empty()) s += "(" + n.input_name + ")";
  return s;
}

Var Graph::push(Node node) {
  forward_done_ = false;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Graph::Node& Graph::at(Var v) {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw StateError("graph: invalid node handle");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Graph::Node& Graph::at(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw StateError("graph: invalid node handle");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Graph::input(const std::string& name, Shape shape, bool requires_grad) {
  Node n;
  n.op = Op::Input;
  n.input_name = name;
  n.out = Tensor(std::move(shape));
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.out = std::move(value);
  n.bound = true;
  return push(std::move(n));
}

Var Graph::parameter(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.out = std::move(value);
  n.bound = true;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

void Graph::set_value(Var v, const Tensor& value) {
  Node& n = at(v);
  if (n.op != Op::Leaf && n.op != Op::Input) {
    throw StateError("set_value: only leaves and inputs can be rebound");
  }
  require(n.out.shape() == value.shape(),
          "set_value: shape mismatch on " + node_label(n, v.id));
  n.out = value;
  n.bound = true;
  forward_done_ = false;
}

Var Graph::add(Var a, Var b) {
  Node n;
  n.op = Op::Add;
  n.in = {a.id, b.id};
  require(at(a).out.same_shape(at(b).out), "add: operand shapes differ");
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  Node n;
  n.op = Op::Sub;
  n.in = {a.id, b.id};
  require(at(a).out.same_shape(at(b).out), "sub: operand shapes differ");
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  Node n;
  n.op = Op::Mul;
  n.in = {a.id, b.id};
  require(at(a).out.same_shape(at(b).out), "mul: operand shapes differ");
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Graph::neg(Var a) {
  Node n;
  n.op = Op::Neg;
  n.in = {a.id};
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::scale(Var a, double c) {
  Node n;
  n.op = Op::Scale;
  n.in = {a.id};
  n.p.c = c;
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::add_scalar(Var a, double c) {
  Node n;
  n.op = Op::AddScalar;
  n.in = {a.id};
  n.p.c = c;
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::clip(Var a, double lo, double hi) {
  if (lo > hi) throw ConfigError("clip: lower bound exceeds upper bound");
  Node n;
  n.op = Op::Clip;
  n.in = {a.id};
  n.p.lo = lo;
  n.p.hi = hi;
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::relu(Var a) {
  Node n;
  n.op = Op::Relu;
  n.in = {a.id};
  n.out = Tensor(at(a).out.shape());
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::conv2d(Var x, Var w, Var bias, const Conv2dSpec& spec) {
  const Tensor& xt = at(x).out;
  const Tensor& wt = at(w).out;
  require(xt.ndim() == 4, "conv2d: input must be (N,C,H,W)");
  require(wt.ndim() == 4, "conv2d: weights must be (Cout,Cin/g,kh,kw)");
  std::size_t cin = xt.dim(1);
  std::size_t cout = wt.dim(0);
  require(spec.groups >= 1 && cin % spec.groups == 0 &&
              cout % spec.groups == 0,
          "conv2d: channel counts not divisible by groups");
  require(wt.dim(1) == cin / spec.groups,
          "conv2d: weight input-channel extent mismatch");
  int oh = conv_out_extent(static_cast<int>(xt.dim(2)),
                           static_cast<int>(wt.dim(2)), spec.stride, spec.pad,
                           spec.dilation);
  int ow = conv_out_extent(static_cast<int>(xt.dim(3)),
                           static_cast<int>(wt.dim(3)), spec.stride, spec.pad,
                           spec.dilation);
  require(oh > 0 && ow > 0, "conv2d: output shape is empty");
  Node n;
  n.op = Op::Conv2d;
  n.in = {x.id, w.id, bias.id};
  n.p.stride = spec.stride;
  n.p.pad = spec.pad;
  n.p.dilation = spec.dilation;
  n.p.groups = spec.groups;
  if (bias.valid()) {
    require(at(bias).out.ndim() == 1 && at(bias).out.dim(0) == cout,
            "conv2d: bias extent mismatch");
  }
  n.out = Tensor(
      Shape{xt.dim(0), cout, static_cast<std::size_t>(oh),
            static_cast<std::size_t>(ow)});
  n.requires_grad = at(x).requires_grad || at(w).requires_grad ||
                    (bias.valid() && at(bias).requires_grad);
  return push(std::move(n));
}

Var Graph::max_pool(Var x, int kernel, int stride, int pad) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4, "max_pool: input must be (N,C,H,W)");
  int oh = conv_out_extent(static_cast<int>(xt.dim(2)), kernel, stride, pad, 1);
  int ow = conv_out_extent(static_cast<int>(xt.dim(3)), kernel, stride, pad, 1);
  require(oh > 0 && ow > 0, "max_pool: output shape is empty");
  Node n;
  n.op = Op::MaxPool;
  n.in = {x.id};
  n.p.kernel = kernel;
  n.p.stride = stride;
  n.p.pad = pad;
  n.out = Tensor(Shape{xt.dim(0), xt.dim(1), static_cast<std::size_t>(oh),
                       static_cast<std::size_t>(ow)});
  n.requires_grad = at(x).requires_grad;
  return push(std::move(n));
}

Var Graph::avg_pool(Var x, int kernel, int stride, int pad) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4, "avg_pool: input must be (N,C,H,W)");
  int oh = conv_out_extent(static_cast<int>(xt.dim(2)), kernel, stride, pad, 1);
  int ow = conv_out_extent(static_cast<int>(xt.dim(3)), kernel, stride, pad, 1);
  require(oh > 0 && ow > 0, "avg_pool: output shape is empty");
  Node n;
  n.op = Op::AvgPool;
  n.in = {x.id};
  n.p.kernel = kernel;
  n.p.stride = stride;
  n.p.pad = pad;
  n.out = Tensor(Shape{xt.dim(0), xt.dim(1), static_cast<std::size_t>(oh),
                       static_cast<std::size_t>(ow)});
  n.requires_grad = at(x).requires_grad;
  return push(std::move(n));
}

Var Graph::global_avg_pool(Var x) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4, "global_avg_pool: input must be (N,C,H,W)");
  Node n;
  n.op = Op::GlobalAvgPool;
  n.in = {x.id};
  n.out = Tensor(Shape{xt.dim(0), xt.dim(1)});
  n.requires_grad = at(x).requires_grad;
  return push(std::move(n));
}

Var Graph::affine(Var x, Var w, Var bias) {
  const Tensor& xt = at(x).out;
  const Tensor& wt = at(w).out;
  require(xt.ndim() == 2, "affine: input must be (N,F)");
  require(wt.ndim() == 2 && wt.dim(1) == xt.dim(1),
          "affine: weight must be (O,F) with matching F");
  if (bias.valid()) {
    require(at(bias).out.ndim() == 1 && at(bias).out.dim(0) == wt.dim(0),
            "affine: bias extent mismatch");
  }
  Node n;
  n.op = Op::Affine;
  n.in = {x.id, w.id, bias.id};
  n.out = Tensor(Shape{xt.dim(0), wt.dim(0)});
  n.requires_grad = at(x).requires_grad || at(w).requires_grad ||
                    (bias.valid() && at(bias).requires_grad);
  return push(std::move(n));
}

Var Graph::batch_norm(Var x, Var gamma, Var beta, BatchNormState* state,
                      bool training, double momentum, double eps) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4, "batch_norm: input must be (N,C,H,W)");
  std::size_t c = xt.dim(1);
  require(at(gamma).out.ndim() == 1 && at(gamma).out.dim(0) == c,
          "batch_norm: gamma extent mismatch");
  require(at(beta).out.ndim() == 1 && at(beta).out.dim(0) == c,
          "batch_norm: beta extent mismatch");
  if (state == nullptr) throw StateError("batch_norm: missing state");
  require(state->running_mean.numel() == c && state->running_var.numel() == c,
          "batch_norm: state extent mismatch");
  Node n;
  n.op = Op::BatchNorm;
  n.in = {x.id, gamma.id, beta.id};
  n.p.bn_state = state;
  n.p.training = training;
  n.p.momentum = momentum;
  n.p.eps = eps;
  n.out = Tensor(xt.shape());
  n.requires_grad =
      at(x).requires_grad || at(gamma).requires_grad || at(beta).requires_grad;
  return push(std::move(n));
}

Var Graph::softmax_cross_entropy(Var logits, std::vector<int> labels) {
  const Tensor& zt = at(logits).out;
  require(zt.ndim() == 2, "softmax_cross_entropy: logits must be (N,C)");
  require(labels.size() == zt.dim(0),
          "softmax_cross_entropy: label count mismatch");
  for (int y : labels) {
    require(y >= 0 && static_cast<std::size_t>(y) < zt.dim(1),
            "softmax_cross_entropy: label out of range");
  }
  Node n;
  n.op = Op::SoftmaxCrossEntropy;
  n.in = {logits.id};
  n.p.labels = std::move(labels);
  n.out = Tensor(Shape{zt.dim(0)});
  n.requires_grad = at(logits).requires_grad;
  return push(std::move(n));
}

Var Graph::cw_loss(Var logits, std::vector<int> labels, double kappa) {
  const Tensor& zt = at(logits).out;
  require(zt.ndim() == 2, "cw_loss: logits must be (N,C)");
  if (zt.dim(1) < 2) throw ConfigError("cw_loss: needs at least two classes");
  if (kappa < 0) throw ConfigError("cw_loss: kappa must be non-negative");
  require(labels.size() == zt.dim(0), "cw_loss: label count mismatch");
  for (int y : labels) {
    require(y >= 0 && static_cast<std::size_t>(y) < zt.dim(1),
            "cw_loss: label out of range");
  }
  Node n;
  n.op = Op::CwLoss;
  n.in = {logits.id};
  n.p.labels = std::move(labels);
  n.p.kappa = kappa;
  n.out = Tensor(Shape{zt.dim(0)});
  n.requires_grad = at(logits).requires_grad;
  return push(std::move(n));
}

Var Graph::reduce_sum(Var a) {
  Node n;
  n.op = Op::ReduceSum;
  n.in = {a.id};
  n.out = Tensor(Shape{1});
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::reduce_mean(Var a) {
  Node n;
  n.op = Op::ReduceMean;
  n.in = {a.id};
  n.out = Tensor(Shape{1});
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::reshape(Var a, Shape shape) {
  require(shape_numel(shape) == at(a).out.numel(),
          "reshape: element count mismatch");
  Node n;
  n.op = Op::Reshape;
  n.in = {a.id};
  n.p.target_shape = shape;
  n.out = Tensor(std::move(shape));
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_channels: empty input list");
  const Tensor& first = at(parts[0]).out;
  require(first.ndim() == 4, "concat_channels: inputs must be (N,C,H,W)");
  std::size_t channels = 0;
  bool rg = false;
  for (Var v : parts) {
    const Tensor& t = at(v).out;
    require(t.ndim() == 4 && t.dim(0) == first.dim(0) &&
                t.dim(2) == first.dim(2) && t.dim(3) == first.dim(3),
            "concat_channels: incompatible part shapes");
    channels += t.dim(1);
    rg = rg || at(v).requires_grad;
  }
  Node n;
  n.op = Op::ConcatChannels;
  for (Var v : parts) n.in.push_back(v.id);
  n.out = Tensor(Shape{first.dim(0), channels, first.dim(2), first.dim(3)});
  n.requires_grad = rg;
  return push(std::move(n));
}

Var Graph::slice_channels(Var a, std::size_t c0, std::size_t c1) {
  const Tensor& xt = at(a).out;
  require(xt.ndim() == 4, "slice_channels: input must be (N,C,H,W)");
  require(c0 < c1 && c1 <= xt.dim(1), "slice_channels: bad channel range");
  Node n;
  n.op = Op::SliceChannels;
  n.in = {a.id};
  n.p.c0 = c0;
  n.p.c1 = c1;
  n.out = Tensor(Shape{xt.dim(0), c1 - c0, xt.dim(2), xt.dim(3)});
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Graph::per_image_add(Var x, Var s) {
  const Tensor& xt = at(x).out;
  const Tensor& st = at(s).out;
  require(xt.ndim() >= 1 && st.ndim() == 1 && st.dim(0) == xt.dim(0),
          "per_image_add: scalar vector must be (N,)");
  Node n;
  n.op = Op::PerImageAdd;
  n.in = {x.id, s.id};
  n.out = Tensor(xt.shape());
  n.requires_grad = at(x).requires_grad || at(s).requires_grad;
  return push(std::move(n));
}

Var Graph::per_image_mul(Var x, Var s) {
  const Tensor& xt = at(x).out;
  const Tensor& st = at(s).out;
  require(xt.ndim() >= 1 && st.ndim() == 1 && st.dim(0) == xt.dim(0),
          "per_image_mul: scalar vector must be (N,)");
  Node n;
  n.op = Op::PerImageMul;
  n.in = {x.id, s.id};
  n.out = Tensor(xt.shape());
  n.requires_grad = at(x).requires_grad || at(s).requires_grad;
  return push(std::move(n));
}

Var Graph::rgb_to_hsv(Var x) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4 && xt.dim(1) == 3, "rgb_to_hsv: input must be (N,3,H,W)");
  Node n;
  n.op = Op::RgbToHsv;
  n.in = {x.id};
  n.out = Tensor(xt.shape());
  n.requires_grad = at(x).requires_grad;
  return push(std::move(n));
}

Var Graph::hsv_to_rgb(Var x) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4 && xt.dim(1) == 3, "hsv_to_rgb: input must be (N,3,H,W)");
  Node n;
  n.op = Op::HsvToRgb;
  n.in = {x.id};
  n.out = Tensor(xt.shape());
  n.requires_grad = at(x).requires_grad;
  return push(std::move(n));
}

Var Graph::rotate(Var x, Var angle_deg) {
  const Tensor& xt = at(x).out;
  const Tensor& at_ = at(angle_deg).out;
  require(xt.ndim() == 4, "rotate: input must be (N,C,H,W)");
  require(xt.dim(2) == xt.dim(3), "rotate: images must be square");
  require(at_.ndim() == 1 && at_.dim(0) == xt.dim(0),
          "rotate: angle vector must be (N,)");
  Node n;
  n.op = Op::Rotate;
  n.in = {x.id, angle_deg.id};
  n.out = Tensor(xt.shape());
  n.requires_grad = at(x).requires_grad || at(angle_deg).requires_grad;
  return push(std::move(n));
}

Var Graph::zero_strided(Var x, int stride) {
  const Tensor& xt = at(x).out;
  require(xt.ndim() == 4, "zero_strided: input must be (N,C,H,W)");
  std::size_t oh = (xt.dim(2) + stride - 1) / static_cast<std::size_t>(stride);
  std::size_t ow = (xt.dim(3) + stride - 1) / static_cast<std::size_t>(stride);
  Node n;
  n.op = Op::ZeroStrided;
  n.out = Tensor(Shape{xt.dim(0), xt.dim(1), oh, ow});
  // Output does not depend on the input; no edge, no gradient.
  return push(std::move(n));
}

void Graph::check_finite(const Node& n, int id) const {
  if (!n.out.all_finite()) {
    throw NumericError("non-finite value produced by node " +
                       node_label(n, id));
  }
}

void Graph::forward(const std::map<std::string, Tensor>& bindings) {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::Input) {
      auto it = bindings.find(n.input_name);
      if (it != bindings.end()) {
        require(it->second.shape() == n.out.shape(),
                "forward: binding shape mismatch for input '" + n.input_name +
                    "'");
        n.out = it->second;
        n.bound = true;
      }
      if (!n.bound) {
        throw StateError("forward: unbound input '" + n.input_name + "'");
      }
    }
    n.grad_ready = false;
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::Input || n.op == Op::Leaf) {
      check_finite(n, static_cast<int>(i));
      continue;
    }
    forward_node(n, static_cast<int>(i));
    check_finite(n, static_cast<int>(i));
  }
  forward_done_ = true;
}

void Graph::ensure_grad(Node& n) {
  if (!n.grad_ready) {
    if (!n.grad.same_shape(n.out)) {
      n.grad = Tensor(n.out.shape());
    } else {
      n.grad.fill(0.0);
    }
    n.grad_ready = true;
  }
}

void Graph::backward(Var root) {
  backward(root, Tensor::full(at(root).out.shape(), 1.0));
}

void Graph::backward(Var root, const Tensor& seed) {
  if (!forward_done_) {
    throw StateError("backward: forward has not been executed on this graph");
  }
  Node& r = at(root);
  require(seed.shape() == r.out.shape(), "backward: seed shape mismatch");
  for (Node& n : nodes_) n.grad_ready = false;
  ensure_grad(r);
  r.grad = seed;
  r.grad_ready = true;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.grad_ready || !n.requires_grad) continue;
    if (n.op == Op::Input || n.op == Op::Leaf) continue;
    backward_node(n, i);
  }
}

const Tensor& Graph::value(Var v) const {
  const Node& n = at(v);
  if (!forward_done_ && n.op != Op::Leaf) {
    throw StateError("value: forward has not been executed");
  }
  return n.out;
}

const Tensor& Graph::grad(Var v) {
  Node& n = at(v);
  if (!n.requires_grad) {
    throw StateError("grad: node " + node_label(n, v.id) +
                     " does not require gradients");
  }
  ensure_grad(n);
  return n.grad;
}

Shape Graph::shape(Var v) const { return at(v).out.shape(); }

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

void Graph::forward_node(Node& n, int id) {
  (void)id;
  switch (n.op) {
    case Op::Add: {
      const Tensor& a = nodes_[n.in[0]].out;
      const Tensor& b = nodes_[n.in[1]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = a[i] + b[i];
      break;
    }
    case Op::Sub: {
      const Tensor& a = nodes_[n.in[0]].out;
      const Tensor& b = nodes_[n.in[1]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = a[i] - b[i];
      break;
    }
    case Op::Mul: {
      const Tensor& a = nodes_[n.in[0]].out;
      const Tensor& b = nodes_[n.in[1]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = a[i] * b[i];
      break;
    }
    case Op::Neg: {
      const Tensor& a = nodes_[n.in[0]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = -a[i];
      break;
    }
    case Op::Scale: {
      const Tensor& a = nodes_[n.in[0]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = n.p.c * a[i];
      break;
    }
    case Op::AddScalar: {
      const Tensor& a = nodes_[n.in[0]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = n.p.c + a[i];
      break;
    }
    case Op::Clip: {
      const Tensor& a = nodes_[n.in[0]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) {
        o[i] = std::min(n.p.hi, std::max(n.p.lo, a[i]));
      }
      break;
    }
    case Op::Relu: {
      const Tensor& a = nodes_[n.in[0]].out;
      double* o = n.out.data();
      for (std::size_t i = 0; i < a.numel(); ++i) o[i] = a[i] > 0 ? a[i] : 0.0;
      break;
    }
    case Op::Conv2d: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& w = nodes_[n.in[1]].out;
      const Tensor* b = n.in[2] >= 0 ? &nodes_[n.in[2]].out : nullptr;
      const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t Cout = w.dim(0), KH = w.dim(2), KW = w.dim(3);
      const std::size_t OH = n.out.dim(2), OW = n.out.dim(3);
      const int s = n.p.stride, p = n.p.pad, d = n.p.dilation, g = n.p.groups;
      const std::size_t cing = Cin / g, coutg = Cout / g;
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        for (std::size_t co = 0; co < Cout; ++co) {
          double* obase = o + (ni * Cout + co) * OH * OW;
          double bias = b ? (*b)[co] : 0.0;
          std::fill(obase, obase + OH * OW, bias);
          std::size_t grp = co / coutg;
          for (std::size_t cl = 0; cl < cing; ++cl) {
            std::size_t ci = grp * cing + cl;
            const double* xbase = x.data() + (ni * Cin + ci) * H * W;
            const double* wbase = w.data() + ((co * cing + cl) * KH) * KW;
            for (std::size_t kh = 0; kh < KH; ++kh) {
              for (std::size_t kw = 0; kw < KW; ++kw) {
                double wv = wbase[kh * KW + kw];
                int hoff = static_cast<int>(kh) * d - p;
                int woff = static_cast<int>(kw) * d - p;
                for (std::size_t oh = 0; oh < OH; ++oh) {
                  int ih = static_cast<int>(oh) * s + hoff;
                  if (ih < 0 || ih >= static_cast<int>(H)) continue;
                  const double* xrow = xbase + ih * static_cast<int>(W);
                  double* orow = obase + oh * OW;
                  for (std::size_t ow = 0; ow < OW; ++ow) {
                    int iw = static_cast<int>(ow) * s + woff;
                    if (iw < 0 || iw >= static_cast<int>(W)) continue;
                    orow[ow] += wv * xrow[iw];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case Op::MaxPool: {
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t OH = n.out.dim(2), OW = n.out.dim(3);
      const int k = n.p.kernel, s = n.p.stride, p = n.p.pad;
      n.scratch_i.assign(n.out.numel(), -1);
      double* o = n.out.data();
      std::size_t oi = 0;
      for (std::size_t ni = 0; ni < N; ++ni) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* xb = x.data() + (ni * C + c) * H * W;
          for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow, ++oi) {
              double best = -1e300;
              int best_idx = -1;
              for (int kh = 0; kh < k; ++kh) {
                int ih = static_cast<int>(oh) * s - p + kh;
                if (ih < 0 || ih >= static_cast<int>(H)) continue;
                for (int kw = 0; kw < k; ++kw) {
                  int iw = static_cast<int>(ow) * s - p + kw;
                  if (iw < 0 || iw >= static_cast<int>(W)) continue;
                  double v = xb[ih * static_cast<int>(W) + iw];
                  if (v > best) {
                    best = v;
                    best_idx = ih * static_cast<int>(W) + iw;
                  }
                }
              }
              // Window entirely in padding cannot happen for pad < kernel.
              o[oi] = best;
              n.scratch_i[oi] = best_idx;
            }
          }
        }
      }
      break;
    }
    case Op::AvgPool: {
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t OH = n.out.dim(2), OW = n.out.dim(3);
      const int k = n.p.kernel, s = n.p.stride, p = n.p.pad;
      const double inv = 1.0 / (k * k);
      double* o = n.out.data();
      std::size_t oi = 0;
      for (std::size_t ni = 0; ni < N; ++ni) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* xb = x.data() + (ni * C + c) * H * W;
          for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow, ++oi) {
              double acc = 0.0;
              for (int kh = 0; kh < k; ++kh) {
                int ih = static_cast<int>(oh) * s - p + kh;
                if (ih < 0 || ih >= static_cast<int>(H)) continue;
                for (int kw = 0; kw < k; ++kw) {
                  int iw = static_cast<int>(ow) * s - p + kw;
                  if (iw < 0 || iw >= static_cast<int>(W)) continue;
                  acc += xb[ih * static_cast<int>(W) + iw];
                }
              }
              o[oi] = acc * inv;
            }
          }
        }
      }
      break;
    }
    case Op::GlobalAvgPool: {
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
      const double inv = 1.0 / static_cast<double>(M);
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* xb = x.data() + (ni * C + c) * M;
          double acc = 0.0;
          for (std::size_t i = 0; i < M; ++i) acc += xb[i];
          o[ni * C + c] = acc * inv;
        }
      }
      break;
    }
    case Op::Affine: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& w = nodes_[n.in[1]].out;
      const Tensor* b = n.in[2] >= 0 ? &nodes_[n.in[2]].out : nullptr;
      const std::size_t N = x.dim(0), F = x.dim(1), O = w.dim(0);
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* xr = x.data() + ni * F;
        for (std::size_t oo = 0; oo < O; ++oo) {
          const double* wr = w.data() + oo * F;
          double acc = b ? (*b)[oo] : 0.0;
          for (std::size_t f = 0; f < F; ++f) acc += xr[f] * wr[f];
          o[ni * O + oo] = acc;
        }
      }
      break;
    }
    case Op::BatchNorm: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& gamma = nodes_[n.in[1]].out;
      const Tensor& beta = nodes_[n.in[2]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
      const std::size_t cnt = N * M;
      // scratch: per-channel mean then invstd
      n.scratch.assign(2 * C, 0.0);
      double* mean = n.scratch.data();
      double* invstd = n.scratch.data() + C;
      if (n.p.training) {
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t ni = 0; ni < N; ++ni) {
            const double* xb = x.data() + (ni * C + c) * M;
            for (std::size_t i = 0; i < M; ++i) acc += xb[i];
          }
          mean[c] = acc / static_cast<double>(cnt);
          double var = 0.0;
          for (std::size_t ni = 0; ni < N; ++ni) {
            const double* xb = x.data() + (ni * C + c) * M;
            for (std::size_t i = 0; i < M; ++i) {
              double dv = xb[i] - mean[c];
              var += dv * dv;
            }
          }
          var /= static_cast<double>(cnt);
          invstd[c] = 1.0 / std::sqrt(var + n.p.eps);
          BatchNormState* st = n.p.bn_state;
          st->running_mean[c] =
              (1.0 - n.p.momentum) * st->running_mean[c] + n.p.momentum * mean[c];
          st->running_var[c] =
              (1.0 - n.p.momentum) * st->running_var[c] + n.p.momentum * var;
        }
      } else {
        const BatchNormState* st = n.p.bn_state;
        for (std::size_t c = 0; c < C; ++c) {
          mean[c] = st->running_mean[c];
          invstd[c] = 1.0 / std::sqrt(st->running_var[c] + n.p.eps);
        }
      }
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* xb = x.data() + (ni * C + c) * M;
          double* ob = o + (ni * C + c) * M;
          double a = gamma[c] * invstd[c];
          double sh = beta[c] - a * mean[c];
          for (std::size_t i = 0; i < M; ++i) ob[i] = a * xb[i] + sh;
        }
      }
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      const Tensor& z = nodes_[n.in[0]].out;
      const std::size_t N = z.dim(0), C = z.dim(1);
      n.scratch.assign(N * C, 0.0);  // softmax probabilities
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* zr = z.data() + ni * C;
        double zmax = zr[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, zr[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) denom += std::exp(zr[c] - zmax);
        double lse = std::log(denom) + zmax;
        for (std::size_t c = 0; c < C; ++c) {
          n.scratch[ni * C + c] = std::exp(zr[c] - lse);
        }
        o[ni] = lse - zr[static_cast<std::size_t>(n.p.labels[ni])];
      }
      break;
    }
    case Op::CwLoss: {
      const Tensor& z = nodes_[n.in[0]].out;
      const std::size_t N = z.dim(0), C = z.dim(1);
      n.scratch_i.assign(N, -1);  // runner-up index, -1 when clamped at -kappa
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* zr = z.data() + ni * C;
        std::size_t y = static_cast<std::size_t>(n.p.labels[ni]);
        double best = -1e300;
        int bi = -1;
        for (std::size_t c = 0; c < C; ++c) {
          if (c == y) continue;
          if (zr[c] > best) {
            best = zr[c];
            bi = static_cast<int>(c);
          }
        }
        double margin = best - zr[y];
        if (margin > -n.p.kappa) {
          o[ni] = margin;
          n.scratch_i[ni] = bi;
        } else {
          o[ni] = -n.p.kappa;
          n.scratch_i[ni] = -1;
        }
      }
      break;
    }
    case Op::ReduceSum: {
      const Tensor& a = nodes_[n.in[0]].out;
      double acc = 0.0;
      for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
      n.out[0] = acc;
      break;
    }
    case Op::ReduceMean: {
      const Tensor& a = nodes_[n.in[0]].out;
      double acc = 0.0;
      for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
      n.out[0] = acc / static_cast<double>(a.numel());
      break;
    }
    case Op::Reshape: {
      const Tensor& a = nodes_[n.in[0]].out;
      std::copy(a.data(), a.data() + a.numel(), n.out.data());
      break;
    }
    case Op::ConcatChannels: {
      const std::size_t N = n.out.dim(0), HW = n.out.dim(2) * n.out.dim(3);
      const std::size_t Cout = n.out.dim(1);
      for (std::size_t ni = 0; ni < N; ++ni) {
        std::size_t coff = 0;
        for (int src : n.in) {
          const Tensor& part = nodes_[src].out;
          const std::size_t pc = part.dim(1);
          const double* pb = part.data() + ni * pc * HW;
          double* ob = n.out.data() + (ni * Cout + coff) * HW;
          std::copy(pb, pb + pc * HW, ob);
          coff += pc;
        }
      }
      break;
    }
    case Op::SliceChannels: {
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      const std::size_t SC = n.p.c1 - n.p.c0;
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* xb = x.data() + (ni * C + n.p.c0) * HW;
        double* ob = n.out.data() + ni * SC * HW;
        std::copy(xb, xb + SC * HW, ob);
      }
      break;
    }
    case Op::PerImageAdd: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& s = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), M = x.numel() / N;
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* xb = x.data() + ni * M;
        double sv = s[ni];
        double* ob = o + ni * M;
        for (std::size_t i = 0; i < M; ++i) ob[i] = xb[i] + sv;
      }
      break;
    }
    case Op::PerImageMul: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& s = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), M = x.numel() / N;
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* xb = x.data() + ni * M;
        double sv = s[ni];
        double* ob = o + ni * M;
        for (std::size_t i = 0; i < M; ++i) ob[i] = xb[i] * sv;
      }
      break;
    }
    case Op::RgbToHsv: {
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* rp = x.data() + (ni * 3 + 0) * HW;
        const double* gp = x.data() + (ni * 3 + 1) * HW;
        const double* bp = x.data() + (ni * 3 + 2) * HW;
        double* hp = o + (ni * 3 + 0) * HW;
        double* sp = o + (ni * 3 + 1) * HW;
        double* vp = o + (ni * 3 + 2) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          double r = rp[i], g = gp[i], b = bp[i];
          double v = std::max(r, std::max(g, b));
          double m = std::min(r, std::min(g, b));
          double c = v - m;
          double h = 0.0;
          if (c > 0.0) {
            double h6;
            if (v == r) {
              h6 = (g - b) / c;
              if (h6 < 0) h6 += 6.0;
            } else if (v == g) {
              h6 = 2.0 + (b - r) / c;
            } else {
              h6 = 4.0 + (r - g) / c;
            }
            h = h6 * (M_PI / 3.0);
            if (h >= kTwoPi) h -= kTwoPi;
          }
          hp[i] = h;
          sp[i] = v > 0.0 ? c / v : 0.0;
          vp[i] = v;
        }
      }
      break;
    }
    case Op::HsvToRgb: {
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* hp = x.data() + (ni * 3 + 0) * HW;
        const double* sp = x.data() + (ni * 3 + 1) * HW;
        const double* vp = x.data() + (ni * 3 + 2) * HW;
        double* rp = o + (ni * 3 + 0) * HW;
        double* gp = o + (ni * 3 + 1) * HW;
        double* bp = o + (ni * 3 + 2) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          double h6 = hp[i] * kSixth;
          int k = static_cast<int>(std::floor(h6));
          double f = h6 - k;
          k = ((k % 6) + 6) % 6;
          double s = sp[i], v = vp[i];
          double p = v * (1.0 - s);
          double q = v * (1.0 - s * f);
          double t = v * (1.0 - s * (1.0 - f));
          double r, g, b;
          switch (k) {
            case 0: r = v; g = t; b = p; break;
            case 1: r = q; g = v; b = p; break;
            case 2: r = p; g = v; b = t; break;
            case 3: r = p; g = q; b = v; break;
            case 4: r = t; g = p; b = v; break;
            default: r = v; g = p; b = q; break;
          }
          rp[i] = r;
          gp[i] = g;
          bp[i] = b;
        }
      }
      break;
    }
    case Op::Rotate: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& deg = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const double ctr = (static_cast<double>(H) - 1.0) / 2.0;
      double* o = n.out.data();
      for (std::size_t ni = 0; ni < N; ++ni) {
        double th = deg[ni] * (M_PI / 180.0);
        double ct = std::cos(th), st = std::sin(th);
        for (std::size_t ii = 0; ii < H; ++ii) {
          for (std::size_t jj = 0; jj < W; ++jj) {
            double di = static_cast<double>(ii) - ctr;
            double dj = static_cast<double>(jj) - ctr;
            double si = ct * di + st * dj + ctr;
            double sj = -st * di + ct * dj + ctr;
            double fi0 = std::floor(si), fj0 = std::floor(sj);
            int i0 = static_cast<int>(fi0), j0 = static_cast<int>(fj0);
            double fi = si - fi0, fj = sj - fj0;
            for (std::size_t c = 0; c < C; ++c) {
              const double* xb = x.data() + (ni * C + c) * H * W;
              auto px = [&](int a, int b2) -> double {
                if (a < 0 || a >= static_cast<int>(H) || b2 < 0 ||
                    b2 >= static_cast<int>(W))
                  return 0.0;
                return xb[a * static_cast<int>(W) + b2];
              };
              double v00 = px(i0, j0), v01 = px(i0, j0 + 1);
              double v10 = px(i0 + 1, j0), v11 = px(i0 + 1, j0 + 1);
              o[((ni * C + c) * H + ii) * W + jj] =
                  (1 - fi) * ((1 - fj) * v00 + fj * v01) +
                  fi * ((1 - fj) * v10 + fj * v11);
            }
          }
        }
      }
      break;
    }
    case Op::ZeroStrided: {
      n.out.fill(0.0);
      break;
    }
    case Op::Input:
    case Op::Leaf:
      break;
  }
}

// ---------------------------------------------------------------------------
// backward kernels
// ---------------------------------------------------------------------------

void Graph::backward_node(Node& n, int id) {
  (void)id;
  auto want = [&](int idx) {
    return idx >= 0 && nodes_[idx].requires_grad;
  };
  auto gin = [&](int idx) -> Tensor& {
    Node& m = nodes_[idx];
    ensure_grad(m);
    return m.grad;
  };
  const Tensor& go = n.grad;

  switch (n.op) {
    case Op::Add: {
      for (int k = 0; k < 2; ++k) {
        if (!want(n.in[k])) continue;
        gin(n.in[k]).add_scaled(go, 1.0);
      }
      break;
    }
    case Op::Sub: {
      if (want(n.in[0])) gin(n.in[0]).add_scaled(go, 1.0);
      if (want(n.in[1])) gin(n.in[1]).add_scaled(go, -1.0);
      break;
    }
    case Op::Mul: {
      const Tensor& a = nodes_[n.in[0]].out;
      const Tensor& b = nodes_[n.in[1]].out;
      if (want(n.in[0])) {
        Tensor& ga = gin(n.in[0]);
        for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * b[i];
      }
      if (want(n.in[1])) {
        Tensor& gb = gin(n.in[1]);
        for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * a[i];
      }
      break;
    }
    case Op::Neg: {
      if (want(n.in[0])) gin(n.in[0]).add_scaled(go, -1.0);
      break;
    }
    case Op::Scale: {
      if (want(n.in[0])) gin(n.in[0]).add_scaled(go, n.p.c);
      break;
    }
    case Op::AddScalar: {
      if (want(n.in[0])) gin(n.in[0]).add_scaled(go, 1.0);
      break;
    }
    case Op::Clip: {
      if (!want(n.in[0])) break;
      const Tensor& a = nodes_[n.in[0]].out;
      Tensor& ga = gin(n.in[0]);
      // Subgradient convention: zero at and beyond the boundary.
      for (std::size_t i = 0; i < go.numel(); ++i) {
        if (a[i] > n.p.lo && a[i] < n.p.hi) ga[i] += go[i];
      }
      break;
    }
    case Op::Relu: {
      if (!want(n.in[0])) break;
      const Tensor& a = nodes_[n.in[0]].out;
      Tensor& ga = gin(n.in[0]);
      for (std::size_t i = 0; i < go.numel(); ++i) {
        if (a[i] > 0) ga[i] += go[i];
      }
      break;
    }
    case Op::Conv2d: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& w = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t Cout = w.dim(0), KH = w.dim(2), KW = w.dim(3);
      const std::size_t OH = n.out.dim(2), OW = n.out.dim(3);
      const int s = n.p.stride, p = n.p.pad, d = n.p.dilation, g = n.p.groups;
      const std::size_t cing = Cin / g, coutg = Cout / g;
      const bool need_dx = want(n.in[0]);
      const bool need_dw = want(n.in[1]);
      const bool need_db = n.in[2] >= 0 && want(n.in[2]);
      Tensor* dx = need_dx ? &gin(n.in[0]) : nullptr;
      Tensor* dw = need_dw ? &gin(n.in[1]) : nullptr;
      Tensor* db = need_db ? &gin(n.in[2]) : nullptr;
      for (std::size_t ni = 0; ni < N; ++ni) {
        for (std::size_t co = 0; co < Cout; ++co) {
          const double* gbase = go.data() + (ni * Cout + co) * OH * OW;
          if (need_db) {
            double acc = 0.0;
            for (std::size_t i = 0; i < OH * OW; ++i) acc += gbase[i];
            (*db)[co] += acc;
          }
          if (!need_dx && !need_dw) continue;
          std::size_t grp = co / coutg;
          for (std::size_t cl = 0; cl < cing; ++cl) {
            std::size_t ci = grp * cing + cl;
            const double* xbase = x.data() + (ni * Cin + ci) * H * W;
            double* dxbase = need_dx ? dx->data() + (ni * Cin + ci) * H * W
                                     : nullptr;
            for (std::size_t kh = 0; kh < KH; ++kh) {
              for (std::size_t kw = 0; kw < KW; ++kw) {
                double wv = w.data()[((co * cing + cl) * KH + kh) * KW + kw];
                double dwacc = 0.0;
                int hoff = static_cast<int>(kh) * d - p;
                int woff = static_cast<int>(kw) * d - p;
                for (std::size_t oh = 0; oh < OH; ++oh) {
                  int ih = static_cast<int>(oh) * s + hoff;
                  if (ih < 0 || ih >= static_cast<int>(H)) continue;
                  const double* grow = gbase + oh * OW;
                  const double* xrow = xbase + ih * static_cast<int>(W);
                  double* dxrow =
                      need_dx ? dxbase + ih * static_cast<int>(W) : nullptr;
                  for (std::size_t ow = 0; ow < OW; ++ow) {
                    int iw = static_cast<int>(ow) * s + woff;
                    if (iw < 0 || iw >= static_cast<int>(W)) continue;
                    double gv = grow[ow];
                    if (need_dw) dwacc += gv * xrow[iw];
                    if (need_dx) dxrow[iw] += gv * wv;
                  }
                }
                if (need_dw) {
                  dw->data()[((co * cing + cl) * KH + kh) * KW + kw] += dwacc;
                }
              }
            }
          }
        }
      }
      break;
    }
    case Op::MaxPool: {
      if (!want(n.in[0])) break;
      Tensor& dx = gin(n.in[0]);
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
      const std::size_t OHW = n.out.dim(2) * n.out.dim(3);
      for (std::size_t nc = 0; nc < NC; ++nc) {
        double* dxb = dx.data() + nc * HW;
        const double* gb = go.data() + nc * OHW;
        const int* idx = n.scratch_i.data() + nc * OHW;
        for (std::size_t i = 0; i < OHW; ++i) {
          if (idx[i] >= 0) dxb[idx[i]] += gb[i];
        }
      }
      break;
    }
    case Op::AvgPool: {
      if (!want(n.in[0])) break;
      Tensor& dx = gin(n.in[0]);
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t NC = x.dim(0) * x.dim(1);
      const std::size_t H = x.dim(2), W = x.dim(3);
      const std::size_t OH = n.out.dim(2), OW = n.out.dim(3);
      const int k = n.p.kernel, s = n.p.stride, p = n.p.pad;
      const double inv = 1.0 / (k * k);
      for (std::size_t nc = 0; nc < NC; ++nc) {
        double* dxb = dx.data() + nc * H * W;
        const double* gb = go.data() + nc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            double gv = gb[oh * OW + ow] * inv;
            for (int kh = 0; kh < k; ++kh) {
              int ih = static_cast<int>(oh) * s - p + kh;
              if (ih < 0 || ih >= static_cast<int>(H)) continue;
              for (int kw = 0; kw < k; ++kw) {
                int iw = static_cast<int>(ow) * s - p + kw;
                if (iw < 0 || iw >= static_cast<int>(W)) continue;
                dxb[ih * static_cast<int>(W) + iw] += gv;
              }
            }
          }
        }
      }
      break;
    }
    case Op::GlobalAvgPool: {
      if (!want(n.in[0])) break;
      Tensor& dx = gin(n.in[0]);
      const Tensor& x = nodes_[n.in[0]].out;
      const std::size_t NC = x.dim(0) * x.dim(1), M = x.dim(2) * x.dim(3);
      const double inv = 1.0 / static_cast<double>(M);
      for (std::size_t nc = 0; nc < NC; ++nc) {
        double gv = go[nc] * inv;
        double* dxb = dx.data() + nc * M;
        for (std::size_t i = 0; i < M; ++i) dxb[i] += gv;
      }
      break;
    }
    case Op::Affine: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& w = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), F = x.dim(1), O = w.dim(0);
      if (want(n.in[0])) {
        Tensor& dx = gin(n.in[0]);
        for (std::size_t ni = 0; ni < N; ++ni) {
          double* dxr = dx.data() + ni * F;
          const double* gr = go.data() + ni * O;
          for (std::size_t oo = 0; oo < O; ++oo) {
            const double* wr = w.data() + oo * F;
            double gv = gr[oo];
            for (std::size_t f = 0; f < F; ++f) dxr[f] += gv * wr[f];
          }
        }
      }
      if (want(n.in[1])) {
        Tensor& dw = gin(n.in[1]);
        for (std::size_t ni = 0; ni < N; ++ni) {
          const double* xr = x.data() + ni * F;
          const double* gr = go.data() + ni * O;
          for (std::size_t oo = 0; oo < O; ++oo) {
            double gv = gr[oo];
            double* dwr = dw.data() + oo * F;
            for (std::size_t f = 0; f < F; ++f) dwr[f] += gv * xr[f];
          }
        }
      }
      if (n.in[2] >= 0 && want(n.in[2])) {
        Tensor& db = gin(n.in[2]);
        for (std::size_t ni = 0; ni < N; ++ni) {
          const double* gr = go.data() + ni * O;
          for (std::size_t oo = 0; oo < O; ++oo) db[oo] += gr[oo];
        }
      }
      break;
    }
    case Op::BatchNorm: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& gamma = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
      const std::size_t cnt = N * M;
      const double* mean = n.scratch.data();
      const double* invstd = n.scratch.data() + C;
      const bool need_dx = want(n.in[0]);
      const bool need_dg = want(n.in[1]);
      const bool need_db = want(n.in[2]);
      for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t ni = 0; ni < N; ++ni) {
          const double* gb = go.data() + (ni * C + c) * M;
          const double* xb = x.data() + (ni * C + c) * M;
          for (std::size_t i = 0; i < M; ++i) {
            double xhat = (xb[i] - mean[c]) * invstd[c];
            sum_dy += gb[i];
            sum_dy_xhat += gb[i] * xhat;
          }
        }
        if (need_db) gin(n.in[2])[c] += sum_dy;
        if (need_dg) gin(n.in[1])[c] += sum_dy_xhat;
        if (need_dx) {
          Tensor& dx = gin(n.in[0]);
          double a = gamma[c] * invstd[c];
          if (n.p.training) {
            double mean_dy = sum_dy / static_cast<double>(cnt);
            double mean_dy_xhat = sum_dy_xhat / static_cast<double>(cnt);
            for (std::size_t ni = 0; ni < N; ++ni) {
              const double* gb = go.data() + (ni * C + c) * M;
              const double* xb = x.data() + (ni * C + c) * M;
              double* dxb = dx.data() + (ni * C + c) * M;
              for (std::size_t i = 0; i < M; ++i) {
                double xhat = (xb[i] - mean[c]) * invstd[c];
                dxb[i] += a * (gb[i] - mean_dy - xhat * mean_dy_xhat);
              }
            }
          } else {
            for (std::size_t ni = 0; ni < N; ++ni) {
              const double* gb = go.data() + (ni * C + c) * M;
              double* dxb = dx.data() + (ni * C + c) * M;
              for (std::size_t i = 0; i < M; ++i) dxb[i] += a * gb[i];
            }
          }
        }
      }
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      if (!want(n.in[0])) break;
      Tensor& dz = gin(n.in[0]);
      const std::size_t N = dz.dim(0), C = dz.dim(1);
      for (std::size_t ni = 0; ni < N; ++ni) {
        double gv = go[ni];
        const double* probs = n.scratch.data() + ni * C;
        double* dzr = dz.data() + ni * C;
        std::size_t y = static_cast<std::size_t>(n.p.labels[ni]);
        for (std::size_t c = 0; c < C; ++c) {
          dzr[c] += gv * (probs[c] - (c == y ? 1.0 : 0.0));
        }
      }
      break;
    }
    case Op::CwLoss: {
      if (!want(n.in[0])) break;
      Tensor& dz = gin(n.in[0]);
      const std::size_t N = dz.dim(0), C = dz.dim(1);
      for (std::size_t ni = 0; ni < N; ++ni) {
        int bi = n.scratch_i[ni];
        if (bi < 0) continue;  // clamped at -kappa
        double gv = go[ni];
        dz.data()[ni * C + static_cast<std::size_t>(bi)] += gv;
        dz.data()[ni * C + static_cast<std::size_t>(n.p.labels[ni])] -= gv;
      }
      break;
    }
    case Op::ReduceSum: {
      if (!want(n.in[0])) break;
      Tensor& da = gin(n.in[0]);
      double gv = go[0];
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] += gv;
      break;
    }
    case Op::ReduceMean: {
      if (!want(n.in[0])) break;
      Tensor& da = gin(n.in[0]);
      double gv = go[0] / static_cast<double>(da.numel());
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] += gv;
      break;
    }
    case Op::Reshape: {
      if (!want(n.in[0])) break;
      Tensor& da = gin(n.in[0]);
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] += go[i];
      break;
    }
    case Op::ConcatChannels: {
      const std::size_t N = n.out.dim(0), HW = n.out.dim(2) * n.out.dim(3);
      const std::size_t Cout = n.out.dim(1);
      std::size_t coff = 0;
      for (int src : n.in) {
        Node& part = nodes_[src];
        const std::size_t pc = part.out.dim(1);
        if (want(src)) {
          Tensor& dp = gin(src);
          for (std::size_t ni = 0; ni < N; ++ni) {
            const double* gb = go.data() + (ni * Cout + coff) * HW;
            double* db = dp.data() + ni * pc * HW;
            for (std::size_t i = 0; i < pc * HW; ++i) db[i] += gb[i];
          }
        }
        coff += pc;
      }
      break;
    }
    case Op::SliceChannels: {
      if (!want(n.in[0])) break;
      Tensor& dx = gin(n.in[0]);
      const std::size_t N = dx.dim(0), C = dx.dim(1);
      const std::size_t HW = dx.dim(2) * dx.dim(3);
      const std::size_t SC = n.p.c1 - n.p.c0;
      for (std::size_t ni = 0; ni < N; ++ni) {
        double* dxb = dx.data() + (ni * C + n.p.c0) * HW;
        const double* gb = go.data() + ni * SC * HW;
        for (std::size_t i = 0; i < SC * HW; ++i) dxb[i] += gb[i];
      }
      break;
    }
    case Op::PerImageAdd: {
      const std::size_t N = n.out.dim(0), M = n.out.numel() / N;
      if (want(n.in[0])) gin(n.in[0]).add_scaled(go, 1.0);
      if (want(n.in[1])) {
        Tensor& ds = gin(n.in[1]);
        for (std::size_t ni = 0; ni < N; ++ni) {
          const double* gb = go.data() + ni * M;
          double acc = 0.0;
          for (std::size_t i = 0; i < M; ++i) acc += gb[i];
          ds[ni] += acc;
        }
      }
      break;
    }
    case Op::PerImageMul: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& s = nodes_[n.in[1]].out;
      const std::size_t N = n.out.dim(0), M = n.out.numel() / N;
      if (want(n.in[0])) {
        Tensor& dx = gin(n.in[0]);
        for (std::size_t ni = 0; ni < N; ++ni) {
          const double* gb = go.data() + ni * M;
          double sv = s[ni];
          double* dxb = dx.data() + ni * M;
          for (std::size_t i = 0; i < M; ++i) dxb[i] += gb[i] * sv;
        }
      }
      if (want(n.in[1])) {
        Tensor& ds = gin(n.in[1]);
        for (std::size_t ni = 0; ni < N; ++ni) {
          const double* gb = go.data() + ni * M;
          const double* xb = x.data() + ni * M;
          double acc = 0.0;
          for (std::size_t i = 0; i < M; ++i) acc += gb[i] * xb[i];
          ds[ni] += acc;
        }
      }
      break;
    }
    case Op::RgbToHsv: {
      if (!want(n.in[0])) break;
      const Tensor& x = nodes_[n.in[0]].out;
      Tensor& dx = gin(n.in[0]);
      const std::size_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* ch[3] = {x.data() + (ni * 3 + 0) * HW,
                               x.data() + (ni * 3 + 1) * HW,
                               x.data() + (ni * 3 + 2) * HW};
        double* dch[3] = {dx.data() + (ni * 3 + 0) * HW,
                          dx.data() + (ni * 3 + 1) * HW,
                          dx.data() + (ni * 3 + 2) * HW};
        const double* gh = go.data() + (ni * 3 + 0) * HW;
        const double* gs = go.data() + (ni * 3 + 1) * HW;
        const double* gv = go.data() + (ni * 3 + 2) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          double r = ch[0][i], g = ch[1][i], b = ch[2][i];
          int imax = 0, imin = 0;
          double vals[3] = {r, g, b};
          for (int k = 1; k < 3; ++k) {
            if (vals[k] > vals[imax]) imax = k;
            if (vals[k] < vals[imin]) imin = k;
          }
          double v = vals[imax], m = vals[imin];
          double c = v - m;
          // dv
          dch[imax][i] += gv[i];
          // ds: s = 1 - m/v
          if (v > 0.0) {
            dch[imax][i] += gs[i] * (m / (v * v));
            if (imin != imax) dch[imin][i] += gs[i] * (-1.0 / v);
          }
          // dh
          if (c > 0.0) {
            double scale_h = M_PI / 3.0;
            double dnum[3] = {0, 0, 0};  // d(numerator)/d(channel)
            double num;
            if (imax == 0) {
              num = g - b;
              dnum[1] = 1;
              dnum[2] = -1;
            } else if (imax == 1) {
              num = b - r;
              dnum[2] = 1;
              dnum[0] = -1;
            } else {
              num = r - g;
              dnum[0] = 1;
              dnum[1] = -1;
            }
            // h = scale_h * (num/c + const); c = x[imax] - x[imin]
            double ghv = gh[i] * scale_h;
            for (int k = 0; k < 3; ++k) {
              if (dnum[k] != 0) dch[k][i] += ghv * dnum[k] / c;
            }
            double dc_term = -num / (c * c);
            dch[imax][i] += ghv * dc_term;
            dch[imin][i] -= ghv * dc_term;
          }
        }
      }
      break;
    }
    case Op::HsvToRgb: {
      if (!want(n.in[0])) break;
      const Tensor& x = nodes_[n.in[0]].out;
      Tensor& dx = gin(n.in[0]);
      const std::size_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
      for (std::size_t ni = 0; ni < N; ++ni) {
        const double* hp = x.data() + (ni * 3 + 0) * HW;
        const double* sp = x.data() + (ni * 3 + 1) * HW;
        const double* vp = x.data() + (ni * 3 + 2) * HW;
        double* dh = dx.data() + (ni * 3 + 0) * HW;
        double* ds = dx.data() + (ni * 3 + 1) * HW;
        double* dv = dx.data() + (ni * 3 + 2) * HW;
        const double* gr = go.data() + (ni * 3 + 0) * HW;
        const double* gg = go.data() + (ni * 3 + 1) * HW;
        const double* gb = go.data() + (ni * 3 + 2) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          double h6 = hp[i] * kSixth;
          int k = static_cast<int>(std::floor(h6));
          double f = h6 - k;
          k = ((k % 6) + 6) % 6;
          double s = sp[i], v = vp[i];
          // components: v, p = v(1-s), q = v(1-s f), t = v(1-s(1-f))
          // order per sector: rgb = perm(v, t, p) etc.
          // accumulate d(out_channel)/d{h,s,v}
          double gcomp_v, gcomp_p, gcomp_q, gcomp_t;
          gcomp_v = gcomp_p = gcomp_q = gcomp_t = 0.0;
          switch (k) {
            case 0: gcomp_v = gr[i]; gcomp_t = gg[i]; gcomp_p = gb[i]; break;
            case 1: gcomp_q = gr[i]; gcomp_v = gg[i]; gcomp_p = gb[i]; break;
            case 2: gcomp_p = gr[i]; gcomp_v = gg[i]; gcomp_t = gb[i]; break;
            case 3: gcomp_p = gr[i]; gcomp_q = gg[i]; gcomp_v = gb[i]; break;
            case 4: gcomp_t = gr[i]; gcomp_p = gg[i]; gcomp_v = gb[i]; break;
            default: gcomp_v = gr[i]; gcomp_p = gg[i]; gcomp_q = gb[i]; break;
          }
          // dv
          dv[i] += gcomp_v + gcomp_p * (1.0 - s) + gcomp_q * (1.0 - s * f) +
                   gcomp_t * (1.0 - s * (1.0 - f));
          // ds
          ds[i] += gcomp_p * (-v) + gcomp_q * (-v * f) +
                   gcomp_t * (-v * (1.0 - f));
          // dh via f (df/dh = 3/pi within a sector)
          double dfd = gcomp_q * (-v * s) + gcomp_t * (v * s);
          dh[i] += dfd * kSixth;
        }
      }
      break;
    }
    case Op::Rotate: {
      const Tensor& x = nodes_[n.in[0]].out;
      const Tensor& deg = nodes_[n.in[1]].out;
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const double ctr = (static_cast<double>(H) - 1.0) / 2.0;
      const bool need_dx = want(n.in[0]);
      const bool need_da = want(n.in[1]);
      Tensor* dx = need_dx ? &gin(n.in[0]) : nullptr;
      Tensor* da = need_da ? &gin(n.in[1]) : nullptr;
      for (std::size_t ni = 0; ni < N; ++ni) {
        double th = deg[ni] * (M_PI / 180.0);
        double ct = std::cos(th), st = std::sin(th);
        double dacc = 0.0;
        for (std::size_t ii = 0; ii < H; ++ii) {
          for (std::size_t jj = 0; jj < W; ++jj) {
            double di = static_cast<double>(ii) - ctr;
            double dj = static_cast<double>(jj) - ctr;
            double si = ct * di + st * dj + ctr;
            double sj = -st * di + ct * dj + ctr;
            double fi0 = std::floor(si), fj0 = std::floor(sj);
            int i0 = static_cast<int>(fi0), j0 = static_cast<int>(fj0);
            double fi = si - fi0, fj = sj - fj0;
            double dsi_dth = -st * di + ct * dj;
            double dsj_dth = -ct * di - st * dj;
            for (std::size_t c = 0; c < C; ++c) {
              double gv = go.data()[((ni * C + c) * H + ii) * W + jj];
              if (gv == 0.0 && !need_da) continue;
              const double* xb = x.data() + (ni * C + c) * H * W;
              auto inb = [&](int a, int b2) {
                return a >= 0 && a < static_cast<int>(H) && b2 >= 0 &&
                       b2 < static_cast<int>(W);
              };
              auto px = [&](int a, int b2) -> double {
                return inb(a, b2) ? xb[a * static_cast<int>(W) + b2] : 0.0;
              };
              double v00 = px(i0, j0), v01 = px(i0, j0 + 1);
              double v10 = px(i0 + 1, j0), v11 = px(i0 + 1, j0 + 1);
              if (need_dx) {
                double* dxb = dx->data() + (ni * C + c) * H * W;
                auto addpx = [&](int a, int b2, double val) {
                  if (inb(a, b2)) dxb[a * static_cast<int>(W) + b2] += val;
                };
                addpx(i0, j0, gv * (1 - fi) * (1 - fj));
                addpx(i0, j0 + 1, gv * (1 - fi) * fj);
                addpx(i0 + 1, j0, gv * fi * (1 - fj));
                addpx(i0 + 1, j0 + 1, gv * fi * fj);
              }
              if (need_da) {
                double dval_dsi =
                    (v10 - v00) * (1 - fj) + (v11 - v01) * fj;
                double dval_dsj =
                    (v01 - v00) * (1 - fi) + (v11 - v10) * fi;
                dacc += gv * (dval_dsi * dsi_dth + dval_dsj * dsj_dth);
              }
            }
          }
        }
        if (need_da) (*da)[ni] += dacc * (M_PI / 180.0);
      }
      break;
    }
    case Op::ZeroStrided:
    case Op::Input:
    case Op::Leaf:
      break;
  }
}

}  // namespace crna::ad
