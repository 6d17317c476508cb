#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "comet/params.hpp"
#include "comet/tensor.hpp"

namespace comet::ad {

/// Accumulator type for reductions: at least double, wider when T is.
template <typename T>
using Accum = decltype(T{} + 0.0);

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order, so the node list is already a topological order.
///
/// Leaves and parameters accumulate gradients across backward() calls;
/// intermediate gradients are recomputed on every call.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  explicit Graph(bool training = false) : training_(training) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }

  Var constant(Tensor<T> value);
  Var leaf(Tensor<T> value);
  /// Binds a stored parameter. Repeated calls with the same name return the
  /// same node, so every consumer shares one tensor.
  Var param(ParamStore<T>& store, const std::string& name);

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape(); }
  /// Gradient of the last backward root; empty when no gradient reached v.
  const Tensor<T>& grad(Var v) const { return node(v).grad; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  void backward(Var root);
  void zero_leaf_grads();
  std::size_t size() const { return nodes_.size(); }

  /// Appends an operation node. `fn` runs during backward with the node's
  /// output gradient and must accumulate into its inputs via grad_buffer().
  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn);
  Tensor<T>& grad_buffer(Var v);

 private:
  enum class Kind { Constant, Leaf, Param, Op };
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Kind kind = Kind::Constant;
    bool requires_grad = false;
    Tensor<T>* store_grad = nullptr;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  bool training_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> params_;
};

struct Conv2dSpec {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dil_h = 1, dil_w = 1;

  static Conv2dSpec same(int kh, int kw, int dilation = 1) {
    return {1, 1, dilation * (kh - 1) / 2, dilation * (kw - 1) / 2, dilation, dilation};
  }
  static Conv2dSpec strided(int k, int stride) { return {stride, stride, (k - 1) / 2, (k - 1) / 2, 1, 1}; }
};

struct Deconv2dSpec {
  int stride = 2;
  int pad = 1;
  int out_pad = 1;
  int dilation = 1;
};

template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// One region of interest: which map in the batch, which row of the box tensor.
struct RoiRef {
  int batch = 0;
  int box = 0;
};

// x: [B,Ci,H,W], w: [Co,Ci,kh,kw], b: [Co] or invalid Var.
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, const Conv2dSpec& spec);
// x: [B,Ci,H,W], w: [Ci,Co,k,k]. Output side (H-1)*s - 2p + d(k-1) + out_pad + 1.
template <typename T>
Var deconv2d(Graph<T>& g, Var x, Var w, Var b, const Deconv2dSpec& spec);
// x: [R,I], w: [O,I], b: [O].
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b);
// x: [N,C] or [N,C,H,W]; batch statistics in training graphs, running averages otherwise.
template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, const BatchNormState<T>& state);
template <typename T>
Var leaky_relu(Graph<T>& g, Var x, double slope);
template <typename T>
Var sigmoid(Graph<T>& g, Var x);
// [B,C,H,W] -> [B,C]
template <typename T>
Var global_avg_pool(Graph<T>& g, Var x);
// Average pooling counting zero padding in the denominator.
template <typename T>
Var avg_pool2d(Graph<T>& g, Var x, int kernel, int stride, int pad);
template <typename T>
Var add(Graph<T>& g, Var a, Var b);
template <typename T>
Var sub(Graph<T>& g, Var a, Var b);
template <typename T>
Var mul(Graph<T>& g, Var a, Var b);
// a*x + b elementwise with scalar constants.
template <typename T>
Var affine(Graph<T>& g, Var x, double a, double b);
template <typename T>
Var square(Graph<T>& g, Var x);
// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
template <typename T>
Var smooth_l1(Graph<T>& g, Var x);
template <typename T>
Var sum(Graph<T>& g, Var x);
template <typename T>
Var mean(Graph<T>& g, Var x);
// [R,C] -> [R,C,H,W]
template <typename T>
Var expand_channels(Graph<T>& g, Var v, int height, int width);
// [R,1,H,W] -> [R,C,H,W]
template <typename T>
Var expand_spatial(Graph<T>& g, Var m, int channels);
template <typename T>
Var concat_channels(Graph<T>& g, const std::vector<Var>& xs);
template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape);
// Selects rows of the leading dimension (repeats allowed).
template <typename T>
Var gather_rows(Graph<T>& g, Var x, const std::vector<int>& rows);
// Flat-index selection; output shape [k].
template <typename T>
Var pick(Graph<T>& g, Var x, const std::vector<std::size_t>& flat_index);

/// Bilinear interpolation of feat [B,C,H,W] at points [P,2] given as (x, y)
/// in cell units; reads outside the map contribute zero. Output [P,C].
template <typename T>
Var bilinear_sample(Graph<T>& g, Var feat, Var points, const std::vector<int>& batch);

/// Precise RoI pooling: every output bin is the exact mean of the bilinearly
/// interpolated map over the bin rectangle. Boxes [K,4] are (x, y, w, h) in
/// cell units. Output [R, C, bins_h, bins_w]; differentiable in feat and boxes.
template <typename T>
Var prroi_pool(Graph<T>& g, Var feat, Var boxes, const std::vector<RoiRef>& rois, int bins_h,
               int bins_w);

}  // namespace comet::ad
