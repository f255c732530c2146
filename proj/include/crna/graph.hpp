#pragma once

#include <map>
#include <string>
#include <vector>

#include "crna/tensor.hpp"

namespace crna::ad {

enum class Op {
  Input,
  Leaf,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddScalar,
  Clip,
  Relu,
  Conv2d,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  Affine,
  BatchNorm,
  SoftmaxCrossEntropy,
  CwLoss,
  ReduceSum,
  ReduceMean,
  Reshape,
  ConcatChannels,
  SliceChannels,
  PerImageAdd,
  PerImageMul,
  RgbToHsv,
  HsvToRgb,
  Rotate,
  ZeroStrided,
};

const char* op_name(Op op);

// Running statistics for one batch-norm instance. Owned by the layer that
// holds the weights; the graph only keeps a pointer. Training-mode forward
// updates these in place (single-writer), eval-mode forward reads them.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}),
        running_var(Tensor::full(Shape{channels}, 1.0)) {}
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

struct Conv2dSpec {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
};

// Reverse-mode tape. Nodes are appended in topological order as the network
// is built; forward() executes them in that order, backward() in reverse.
// The tape is rebuilt per batch (dynamic graph); repeated forward() calls on
// the same tape recompute activations in place after rebinding leaves.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // --- leaves ---
  Var input(const std::string& name, Shape shape, bool requires_grad = false);
  Var constant(Tensor value);
  Var parameter(Tensor value, bool requires_grad = true);

  // Rebind the value of a leaf or input node (shape must match).
  void set_value(Var v, const Tensor& value);

  // --- elementwise / scalar ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var clip(Var a, double lo, double hi);
  Var relu(Var a);

  // --- network ops ---
  // x: (N, Cin, H, W), w: (Cout, Cin/groups, kh, kw), bias optional (Cout).
  Var conv2d(Var x, Var w, Var bias, const Conv2dSpec& spec);
  Var max_pool(Var x, int kernel, int stride, int pad);
  Var avg_pool(Var x, int kernel, int stride, int pad);
  Var global_avg_pool(Var x);                    // (N,C,H,W) -> (N,C)
  Var affine(Var x, Var w, Var bias);            // (N,F)x(O,F)+(O) -> (N,O)
  Var batch_norm(Var x, Var gamma, Var beta, BatchNormState* state,
                 bool training, double momentum = 0.1, double eps = 1e-5);

  // --- losses (per-example, shape (N,)) ---
  Var softmax_cross_entropy(Var logits, std::vector<int> labels);
  Var cw_loss(Var logits, std::vector<int> labels, double kappa);

  // --- reductions / shape ---
  Var reduce_sum(Var a);
  Var reduce_mean(Var a);
  Var reshape(Var a, Shape shape);
  Var concat_channels(const std::vector<Var>& parts);
  Var slice_channels(Var a, std::size_t c0, std::size_t c1);

  // --- per-image scalar broadcast: s has shape (N,) ---
  Var per_image_add(Var x, Var s);
  Var per_image_mul(Var x, Var s);

  // --- image ops ---
  Var rgb_to_hsv(Var x);   // (N,3,H,W), hue in [0, 2*pi)
  Var hsv_to_rgb(Var x);
  // Rotate each image by its own angle in degrees (shape (N,)), bilinear
  // sampling with zero padding; square images only.
  Var rotate(Var x, Var angle_deg);
  // Zero tensor shaped like x downsampled by `stride` ("none" cell op).
  Var zero_strided(Var x, int stride);

  // --- execution ---
  void forward(const std::map<std::string, Tensor>& bindings = {});
  void backward(Var root);                       // seed of ones
  void backward(Var root, const Tensor& seed);

  // The returned references point into node storage and are invalidated by
  // adding nodes; read results only after the graph is fully built.
  const Tensor& value(Var v) const;
  const Tensor& grad(Var v);                     // zeros if never reached
  Shape shape(Var v) const;                      // by value: safe during build
  std::size_t node_count() const { return nodes_.size(); }
  bool forward_done() const { return forward_done_; }

 private:
  struct OpParams {
    int stride = 1, pad = 0, dilation = 1, groups = 1, kernel = 0;
    double lo = 0, hi = 0;
    double c = 0;
    double eps = 1e-5, momentum = 0.1;
    double kappa = 0;
    bool training = false;
    BatchNormState* bn_state = nullptr;
    std::vector<int> labels;
    Shape target_shape;
    std::size_t c0 = 0, c1 = 0;
  };

  struct Node {
    Op op;
    std::vector<int> in;
    OpParams p;
    Tensor out;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    bool bound = false;            // Input nodes: value supplied
    std::string input_name;
    std::vector<double> scratch;   // op-specific saved state
    std::vector<int> scratch_i;
  };

  Var push(Node node);
  Node& at(Var v);
  const Node& at(Var v) const;
  std::string node_label(const Node& n, int id) const;
  void check_finite(const Node& n, int id) const;
  void ensure_grad(Node& n);

  void forward_node(Node& n, int id);
  void backward_node(Node& n, int id);

  std::vector<Node> nodes_;
  bool forward_done_ = false;
};

}  // namespace crna::ad
