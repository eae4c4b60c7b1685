// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value in the network is a 2-D double matrix. Point sets are N x C,
// grid fields are (H*W) x C in row-major cell order, scalars are 1 x 1.
// A Graph records operations as they execute; Graph::backward() walks the
// record in reverse and accumulates gradients into every node that requires
// one. Nodes whose inputs are all constants carry no backward closure.

#ifndef TARS_AUTODIFF_HPP
#define TARS_AUTODIFF_HPP

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tars/errors.hpp"

namespace tars {

class ParamStore;

namespace ad {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  static Tensor from(int r, int c, std::vector<double> values);

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

class Graph;

/// Handle to a node inside a Graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  const Tensor& value() const;
  int rows() const { return value().rows; }
  int cols() const { return value().cols; }
  double scalar() const;
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf that accumulates a gradient (used for inputs under test).
  Var variable(Tensor value);
  /// Binds a ParamStore entry. Repeated lookups of the same name share a node.
  /// Frozen entries bind as constants.
  Var param(const ParamStore& store, const std::string& name);

  Var record(Tensor value, bool requires_grad, Backward backward);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and back-propagates.
  void backward(Var out);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient slot, allocated on first access.
  Tensor& grad(int id);
  const Tensor& grad(Var v) { return grad(v.id()); }
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  /// Adds gradients of every bound, non-frozen parameter into the store.
  void accumulate_param_grads(ParamStore& store);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> params_;
};

// Elementwise binary ops broadcast `b` when it is 1x1, 1xC or Rx1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var leaky_relu(Var a, double slope);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var square(Var a);
Var sqrt(Var a);
/// log(1 + exp(x)), evaluated stably.
Var softplus(Var a);
/// Row-wise log-softmax.
Var log_softmax_rows(Var a);
/// Clamps into [lo, hi]; gradient is zero where clamped.
Var clamp(Var a, double lo, double hi);

Var sum(Var a);
Var mean(Var a);
/// Column sums, 1 x C.
Var sum_rows(Var a);
/// Row sums, R x 1.
Var sum_cols(Var a);
/// Euclidean norm of each row, R x 1. Gradient at a zero row is zero.
Var row_norm(Var a);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, int begin, int end);
/// Row gather; backward scatter-adds.
Var gather_rows(Var a, std::span<const int> index);
/// Places row i of `a` at row dest[i] of an out_rows x C zero matrix.
Var scatter_rows(Var a, std::span<const int> dest, int out_rows);
/// out[i] = sum_j weights[i*k + j] * a[index[i*k + j]].
Var weighted_gather(Var a, std::span<const int> index, std::span<const double> weights, int k);

// Grouped ops. Group g owns rows [offsets[g], offsets[g+1]) of the flat input.
// Empty groups produce zero rows.
Var group_max(Var a, std::span<const int> offsets);
Var group_mean(Var a, std::span<const int> offsets);
/// Scaled dot-product attention per group: out[g] = softmax(q[g] k_G^T / sqrt(d)) v_G.
Var grouped_attention(Var q, Var k, Var v, std::span<const int> offsets);

/// Zero-padded k x k patch extraction for an H x W field of C channels.
/// Output row (y*W + x) holds the patch in (dy, dx, c) order.
Var im2col(Var field, int height, int width, int kernel);
/// Adaptive average pooling from (in_h x in_w) to (out_h x out_w).
Var adaptive_avg_pool(Var field, int in_h, int in_w, int out_h, int out_w);

/// Orthonormal polar factor of a 3x3 matrix with det +1:
/// A = U S V^T  ->  U diag(1, 1, det(U V^T)) V^T.
/// Throws DegenerateGeometryError when the second singular value vanishes.
Var polar_rotation(Var a);

}  // namespace ad
}  // namespace tars

#endif  // TARS_AUTODIFF_HPP
