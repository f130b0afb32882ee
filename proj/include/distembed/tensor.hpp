#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every op result keeps strong references to its inputs together with a
// closure that pushes the output gradient back into them. backward() orders
// the reachable graph topologically and runs each closure exactly once.
// Feature maps are row-major HWC, optionally with a leading batch axis (NHWC).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace distembed {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // null for leaves

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the values as a fresh leaf without history.
  Tensor detach() const;

  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable leaf that
  // requires grad. Interior gradients are recomputed on each call; leaf
  // gradients accumulate until zero_grad().
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// RAII switch that stops ops from recording history on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---------------------------------------------------------------------------
// Elementwise (binary ops broadcast over trailing dimensions)

enum class Elementwise { Add, Subtract, Multiply, Divide, Exp, Log, Sqrt, Softplus };

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double f) { return scale(x, f); }
inline Tensor operator*(double f, const Tensor& x) { return scale(x, f); }
inline Tensor operator+(const Tensor& x, double v) { return add_scalar(x, v); }

Shape broadcast_shape(const Shape& a, const Shape& b);

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axes(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
Tensor mean_axes(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Rows `indices` of a [N, ...] tensor, as a fresh constant tensor.
Tensor take_rows(const Tensor& x, std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Linear algebra and feature-map ops

Tensor matmul(const Tensor& a, const Tensor& b);

/// Per-pixel linear map: input [..., Cin] x weight [Cin, Cout] + bias [Cout].
Tensor conv1x1(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct Window2D {
  std::size_t kh = 1, kw = 1;
  std::size_t sh = 1, sw = 1;
  std::size_t ph = 0, pw = 0;
};

/// Zero-padded k x k convolution on NHWC (or HWC) input.
/// weight is [kh, kw, Cin, Cout], bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Window2D& window);

enum class PoolKind { Avg, Min, Max };

/// Windowed per-channel reduction on NHWC (or HWC). Min/max padding never
/// wins; avg divides by the number of real cells in each window. Min/max ties
/// go to the first element in row-major window order.
Tensor pool(PoolKind kind, const Tensor& input, const Window2D& window);

/// Mean over the spatial axes: [N,H,W,C] -> [N,C], [H,W,C] -> [C].
Tensor global_avg_pool(const Tensor& input);

/// Numerically stabilised log-softmax along the last axis.
Tensor log_softmax(const Tensor& logits);

enum class Mode { Train, Eval };

/// Inverted dropout. Eval mode (or rate 0) returns the input unchanged.
Tensor dropout(const Tensor& input, double rate, Mode mode, std::uint64_t seed);

/// Per-sample, per-channel standardisation over the spatial axes followed by
/// a learnable per-channel affine (gamma, beta of shape [C]).
Tensor affine_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

}  // namespace distembed
