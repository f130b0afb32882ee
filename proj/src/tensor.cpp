#include "distembed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "distembed/error.hpp"
#include "tensor_internal.hpp"

namespace distembed {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (any_requires_grad(inputs)) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace detail

using detail::make_result;
using detail::Node;
using detail::require;

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  require(shape_numel(shape) == data.size(), ErrorKind::IncompatibleShape,
          "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return node_ ? node_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < rank(), ErrorKind::IncompatibleShape,
          "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  if (!node_) return {};
  return {node_->data.data(), node_->data.size()};
}

double Tensor::item() const {
  require(numel() == 1, ErrorKind::ContractViolation, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::to_vector() const { return node_ ? node_->data : std::vector<double>{}; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  require(node_ && node_->is_leaf(), ErrorKind::ContractViolation, "requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) return {};
  auto& g = node_->ensure_grad();
  return {g.data(), g.size()};
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), to_vector(), false); }

void Tensor::backward() const {
  require(node_ != nullptr, ErrorKind::ContractViolation, "backward() on undefined tensor");
  require(numel() == 1, ErrorKind::ContractViolation,
          "backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; `order` ends up with inputs before outputs.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = previous_; }

bool grad_mode_enabled() { return detail::g_grad_enabled; }

// ---------------------------------------------------------------------------
// Broadcasting helpers

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw Error(ErrorKind::IncompatibleShape, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace detail {

std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> index(n);
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  // Strides of `in` expressed in out-axis order, zero where broadcast.
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    stride[i + offset] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    index[k] = pos;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        pos += stride[ax];
        break;
      }
      pos -= stride[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

}  // namespace detail

namespace {

enum class BinOp { Add, Sub, Mul, Div };

// How an operand's elements line up with the output: identical layout,
// a trailing suffix repeated (k % period), or a general index map.
struct Operand {
  enum Kind { Same, Suffix, General } kind = Same;
  std::size_t period = 1;
  std::vector<std::size_t> index;
  std::size_t at(std::size_t k) const {
    switch (kind) {
      case Same: return k;
      case Suffix: return k % period;
      case General: return index[k];
    }
    return k;
  }
};

Operand operand_for(const Shape& out, const Shape& in) {
  Operand o;
  if (in == out) return o;
  const std::size_t off = out.size() - in.size();
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  bool suffix = true;
  for (std::size_t i = lead; i < in.size(); ++i) suffix = suffix && in[i] == out[i + off];
  if (suffix) {
    o.kind = Operand::Suffix;
    o.period = std::max<std::size_t>(shape_numel(in), 1);
    return o;
  }
  o.kind = Operand::General;
  o.index = detail::broadcast_index(out, in);
  return o;
}

template <typename F>
void run_binary(std::vector<double>& out, const std::vector<double>& da, const Operand& oa,
                const std::vector<double>& db, const Operand& ob, F f) {
  const std::size_t n = out.size();
  if (oa.kind == Operand::Same && ob.kind == Operand::Same) {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(da[k], db[k]);
  } else if (oa.kind == Operand::Same && ob.kind == Operand::Suffix) {
    const std::size_t p = ob.period;
    for (std::size_t base = 0; base < n; base += p)
      for (std::size_t j = 0; j < p; ++j) out[base + j] = f(da[base + j], db[j]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(da[oa.at(k)], db[ob.at(k)]);
  }
}

Tensor binary(BinOp op, const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), ErrorKind::ContractViolation, "binary op on undefined tensor");
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  Operand oa = operand_for(out_shape, a.shape());
  Operand ob = operand_for(out_shape, b.shape());

  const auto& da = a.node()->data;
  const auto& db = b.node()->data;
  std::vector<double> out(n);
  switch (op) {
    case BinOp::Add: run_binary(out, da, oa, db, ob, [](double x, double y) { return x + y; }); break;
    case BinOp::Sub: run_binary(out, da, oa, db, ob, [](double x, double y) { return x - y; }); break;
    case BinOp::Mul: run_binary(out, da, oa, db, ob, [](double x, double y) { return x * y; }); break;
    case BinOp::Div: run_binary(out, da, oa, db, ob, [](double x, double y) { return x / y; }); break;
  }

  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [op, oa = std::move(oa), ob = std::move(ob)](Node& self) {
                       Node& na = *self.parents[0];
                       Node& nb = *self.parents[1];
                       const auto& g = self.grad;
                       const std::size_t n = g.size();
                       if (na.requires_grad) {
                         auto& ga = na.ensure_grad();
                         for (std::size_t k = 0; k < n; ++k) {
                           double d = g[k];
                           if (op == BinOp::Mul) d *= nb.data[ob.at(k)];
                           if (op == BinOp::Div) d /= nb.data[ob.at(k)];
                           ga[oa.at(k)] += d;
                         }
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t k = 0; k < n; ++k) {
                           double d = g[k];
                           switch (op) {
                             case BinOp::Add: break;
                             case BinOp::Sub: d = -d; break;
                             case BinOp::Mul: d *= na.data[oa.at(k)]; break;
                             case BinOp::Div: {
                               const double y = nb.data[ob.at(k)];
                               d = -d * na.data[oa.at(k)] / (y * y);
                               break;
                             }
                           }
                           gb[ob.at(k)] += d;
                         }
                       }
                     });
}

// Unary op whose derivative is expressed through (input, output).
template <typename F, typename D>
Tensor unary(const Tensor& x, F forward, D derivative) {
  require(x.defined(), ErrorKind::ContractViolation, "unary op on undefined tensor");
  const auto& dx = x.node()->data;
  std::vector<double> out(dx.size());
  for (std::size_t k = 0; k < dx.size(); ++k) out[k] = forward(dx[k]);
  return make_result(x.shape(), std::move(out), {x}, [derivative](Node& self) {
    Node& in = *self.parents[0];
    auto& gi = in.ensure_grad();
    for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += self.grad[k] * derivative(in.data[k], self.data[k]);
  });
}

void require_positive(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (!(v > 0.0)) {
      throw Error(ErrorKind::Domain, std::string(op) + " requires strictly positive input, got " + std::to_string(v));
    }
  }
}

double softplus_scalar(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinOp::Div, a, b); }

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  require_positive(x, "log");
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  require_positive(x, "sqrt");
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor softplus(const Tensor& x) {
  return unary(x, softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b) {
  auto need_b = [&]() -> const Tensor& {
    require(b != nullptr, ErrorKind::ContractViolation, "binary elementwise op needs a second operand");
    return *b;
  };
  switch (kind) {
    case Elementwise::Add: return add(a, need_b());
    case Elementwise::Subtract: return sub(a, need_b());
    case Elementwise::Multiply: return mul(a, need_b());
    case Elementwise::Divide: return div(a, need_b());
    case Elementwise::Exp: return exp(a);
    case Elementwise::Log: return log(a);
    case Elementwise::Sqrt: return sqrt(a);
    case Elementwise::Softplus: return softplus(a);
  }
  throw Error(ErrorKind::ContractViolation, "unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result(Shape{}, {total}, {x}, [](Node& self) {
    Node& in = *self.parents[0];
    auto& gi = in.ensure_grad();
    for (auto& g : gi) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, ErrorKind::ContractViolation, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axes(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  const Shape& in = x.shape();
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) {
    require(ax < in.size(), ErrorKind::IncompatibleShape,
            "reduction axis " + std::to_string(ax) + " out of range for " + shape_str(in));
    reduced[ax] = true;
  }
  Shape kept(in.size());
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kept[i] = reduced[i] ? 1 : in[i];
    if (!reduced[i]) out_shape.push_back(in[i]);
    else if (keepdim) out_shape.push_back(1);
  }
  // Map every input element to its output slot.
  std::vector<std::size_t> target = detail::broadcast_index(in, kept);
  std::vector<double> out(shape_numel(kept), 0.0);
  const auto& dx = x.node()->data;
  for (std::size_t k = 0; k < dx.size(); ++k) out[target[k]] += dx[k];
  return make_result(std::move(out_shape), std::move(out), {x}, [target = std::move(target)](Node& self) {
    Node& in_node = *self.parents[0];
    auto& gi = in_node.ensure_grad();
    for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += self.grad[target[k]];
  });
}

Tensor mean_axes(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  std::size_t count = 1;
  for (auto ax : axes) count *= x.dim(ax);
  require(count > 0, ErrorKind::ContractViolation, "mean over empty axes");
  return scale(sum_axes(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), ErrorKind::IncompatibleShape,
          "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return make_result(std::move(shape), x.to_vector(), {x}, [](Node& self) {
    Node& in = *self.parents[0];
    auto& gi = in.ensure_grad();
    for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += self.grad[k];
  });
}

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis) {
  require(!tensors.empty(), ErrorKind::ContractViolation, "concat of zero tensors");
  const Shape& first = tensors.front().shape();
  require(axis < first.size(), ErrorKind::IncompatibleShape, "concat axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : tensors) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    require(ok, ErrorKind::IncompatibleShape, "concat of " + shape_str(first) + " with " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  std::vector<std::size_t> widths;
  for (const auto& t : tensors) widths.push_back(t.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& src = tensors[t].node()->data;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * widths[t], widths[t], out.begin() + o * row + offset);
    }
    offset += widths[t];
  }
  return make_result(std::move(out_shape), std::move(out), tensors,
                     [widths = std::move(widths), outer, row](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t t = 0; t < self.parents.size(); ++t) {
                         Node& in = *self.parents[t];
                         if (in.requires_grad) {
                           auto& gi = in.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t j = 0; j < widths[t]; ++j) {
                               gi[o * widths[t] + j] += self.grad[o * row + offset + j];
                             }
                           }
                         }
                         offset += widths[t];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  require(axis < in.size() && start + length <= in[axis], ErrorKind::IncompatibleShape,
          "slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
              std::to_string(axis) + " of " + shape_str(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = length;
  const std::size_t src_row = in[axis] * inner;
  const std::size_t dst_row = length * inner;
  const std::size_t first = start * inner;
  std::vector<double> out(outer * dst_row);
  const auto& src = x.node()->data;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * src_row + first, dst_row, out.begin() + o * dst_row);
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [outer, src_row, dst_row, first](Node& self) {
    auto& gi = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < dst_row; ++j) gi[o * src_row + first + j] += self.grad[o * dst_row + j];
    }
  });
}

}  // namespace distembed
