#pragma once

// Minimal reverse-mode differentiation over dense float64 tensors of rank <= 2.
//
// Every operation that touches a tensor requiring gradients records a node
// holding its parents and a backward rule. Nodes are stamped with a global
// sequence number at creation, so sorting the nodes reachable from a loss by
// that stamp recovers the execution order of the dynamic tape. `backward`
// walks that order once, in reverse.
//
// A graph (and the tensors in it) belongs to one thread. Detached or
// non-differentiable tensors are never mutated by backward and can be shared.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ncl/errors.hpp"

namespace ncl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until materialized
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // propagates this->grad into parents
  std::string_view op = "leaf";
  bool requires_grad = false;
  std::uint64_t seq = 0;

  std::vector<double>& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

inline NodePtr make_node(Shape shape, std::vector<double> values, bool requires_grad, std::string_view op) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  node->op = op;
  node->seq = next_seq();
  return node;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(detail::make_node(std::move(shape), std::move(values), requires_grad, "leaf")) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  const Shape& shape() const noexcept { return node_->shape; }
  std::size_t rank() const noexcept { return node_->shape.size(); }
  std::size_t numel() const noexcept { return node_->values.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<const double> values() const noexcept { return node_->values; }

  /// In-place write access; only meaningful on leaves (parameters).
  std::span<double> mutable_values() noexcept { return node_->values; }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  bool has_grad() const noexcept { return node_->grad.size() == node_->values.size(); }

  /// Accumulated gradient; zeros if nothing has been accumulated yet.
  std::span<const double> grad() const { return node_->grad_buffer(); }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }

  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }

  double at(std::size_t i) const { return node_->values.at(i); }
  double at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("2-d access on tensor of shape " + shape_str(shape()));
    return node_->values.at(r * cols() + c);
  }

  std::uint64_t sequence() const noexcept { return node_->seq; }
  std::string_view op() const noexcept { return node_->op; }

  /// True when both handles refer to the same graph node.
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  friend struct TensorAccess;
  friend class Graph;

  detail::NodePtr node_;
};

struct TensorAccess {
  static const detail::NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(detail::NodePtr node) { return Tensor(std::move(node)); }
};

/// Nodes reachable from a root that take part in differentiation, in execution order.
class Graph {
 public:
  static Graph trace(const Tensor& root) {
    Graph g;
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::Node*> stack;
    auto* start = root.node_.get();
    if (!start->requires_grad) return g;
    stack.push_back(start);
    seen.insert(start);
    while (!stack.empty()) {
      auto* node = stack.back();
      stack.pop_back();
      g.order_.push_back(node);
      for (const auto& parent : node->parents) {
        if (parent->requires_grad && seen.insert(parent.get()).second) stack.push_back(parent.get());
      }
    }
    std::sort(g.order_.begin(), g.order_.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
    return g;
  }

  std::size_t size() const noexcept { return order_.size(); }

  std::vector<std::string_view> ops() const {
    std::vector<std::string_view> out;
    out.reserve(order_.size());
    for (const auto* n : order_) out.push_back(n->op);
    return out;
  }

  /// Reverse sweep. Interior gradients are reset first; leaf gradients accumulate.
  void run_backward(detail::Node& root) const {
    for (auto* n : order_) {
      if (n->backward) {
        auto& g = n->grad_buffer();
        std::fill(g.begin(), g.end(), 0.0);
      }
    }
    root.grad_buffer()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  const auto& root = TensorAccess::node(loss);
  if (!root->requires_grad) return;
  Graph::trace(loss).run_backward(*root);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Builds the output tensor; the backward rule is attached only when some input needs gradients.
inline Tensor record(std::string_view op, Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> rule) {
  const bool rg = any_requires_grad(inputs);
  auto node = make_node(std::move(shape), std::move(values), rg, op);
  if (rg) {
    node->parents.reserve(inputs.size());
    for (const auto* t : inputs) node->parents.push_back(TensorAccess::node(*t));
    node->backward = std::move(rule);
  }
  return TensorAccess::wrap(std::move(node));
}

struct Dims2 {
  std::size_t rows;
  std::size_t cols;
};

inline Dims2 dims2(const Shape& s) {
  switch (s.size()) {
    case 0: return {1, 1};
    case 1: return {1, s[0]};
    case 2: return {s[0], s[1]};
    default: throw ShapeError("rank > 2 unsupported: " + shape_str(s));
  }
}

struct Broadcast {
  Shape out_shape;
  Dims2 out, a, b;

  std::size_t index_a(std::size_t r, std::size_t c) const {
    return (a.rows == 1 ? 0 : r) * a.cols + (a.cols == 1 ? 0 : c);
  }
  std::size_t index_b(std::size_t r, std::size_t c) const {
    return (b.rows == 1 ? 0 : r) * b.cols + (b.cols == 1 ? 0 : c);
  }
};

// Supported: equal shapes, scalar against anything, a row [C] / [1xC] or a
// column [Bx1] against a [BxC] matrix.
inline Broadcast broadcast(const Tensor& a, const Tensor& b, std::string_view op) {
  Broadcast bc{a.shape(), {}, dims2(a.shape()), dims2(b.shape())};
  if (a.shape() == b.shape()) {
    bc.out = bc.a;
    return bc;
  }
  auto fail = [&] {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  };
  auto fits = [](Dims2 small, Dims2 big) {
    return (small.rows == big.rows || small.rows == 1) && (small.cols == big.cols || small.cols == 1);
  };
  if (a.numel() >= b.numel() && fits(bc.b, bc.a)) {
    bc.out_shape = a.shape();
    bc.out = bc.a;
  } else if (b.numel() >= a.numel() && fits(bc.a, bc.b)) {
    bc.out_shape = b.shape();
    bc.out = bc.b;
  } else {
    fail();
  }
  return bc;
}

template <class Fwd, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const auto bc = broadcast(a, b, op);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(bc.out.rows * bc.out.cols);
  for (std::size_t r = 0; r < bc.out.rows; ++r)
    for (std::size_t c = 0; c < bc.out.cols; ++c) out[r * bc.out.cols + c] = fwd(av[bc.index_a(r, c)], bv[bc.index_b(r, c)]);
  return record(op, bc.out_shape, std::move(out), {&a, &b}, [bc, da, db](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    for (std::size_t r = 0; r < bc.out.rows; ++r) {
      for (std::size_t c = 0; c < bc.out.cols; ++c) {
        const std::size_t o = r * bc.out.cols + c;
        const std::size_t ia = bc.index_a(r, c);
        const std::size_t ib = bc.index_b(r, c);
        if (pa.requires_grad) pa.grad_buffer()[ia] += g[o] * da(pa.values[ia], pb.values[ib]);
        if (pb.requires_grad) pb.grad_buffer()[ib] += g[o] * db(pa.values[ia], pb.values[ib]);
      }
    }
  });
}

// `deriv(x, y)` receives the input and the output value.
template <class Fwd, class Deriv>
Tensor unary(std::string_view op, const Tensor& t, Fwd fwd, Deriv deriv) {
  const auto tv = t.values();
  std::vector<double> out(tv.size());
  for (std::size_t i = 0; i < tv.size(); ++i) out[i] = fwd(tv[i]);
  return record(op, t.shape(), std::move(out), {&t}, [deriv](Node& self) {
    auto& p = *self.parents[0];
    auto& pg = p.grad_buffer();
    for (std::size_t i = 0; i < self.values.size(); ++i) pg[i] += self.grad[i] * deriv(p.values[i], self.values[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& t, double factor) {
  return detail::unary(
      "scale", t, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

inline Tensor neg(const Tensor& t) { return scale(t, -1.0); }

inline Tensor exp(const Tensor& t) {
  return detail::unary(
      "exp", t, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& t) {
  for (double x : t.values())
    if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
  return detail::unary(
      "log", t, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& t) {
  return detail::unary(
      "relu", t, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// max(t, floor) elementwise; clamped entries receive no gradient.
inline Tensor clamp_min(const Tensor& t, double floor) {
  return detail::unary(
      "clamp_min", t, [floor](double x) { return x < floor ? floor : x; },
      [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& t) { return scale(t, s); }
inline Tensor operator-(const Tensor& t) { return neg(t); }

// ---------------------------------------------------------------------------
// Structural

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::record("matmul", Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      // ga += g * b^T, as row updates over a transposed copy of b.
      std::vector<double> bt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = pb.values[p * n + j];
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double* garow = ga.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          const double* btrow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += gij * btrow[p];
        }
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa.values[i * k + p];
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    throw ShapeError("reshape: " + shape_str(t.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> values(t.values().begin(), t.values().end());
  return detail::record("reshape", std::move(shape), std::move(values), {&t}, [](detail::Node& self) {
    auto& pg = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
  });
}

/// Selects entries by flat (row-major) index. Result has shape [indices.size()].
inline Tensor gather(const Tensor& t, std::span<const std::size_t> indices) {
  const auto tv = t.values();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.size()) {
      throw IndexError("gather: index " + std::to_string(indices[i]) + " out of range for " + std::to_string(tv.size()) +
                       " entries");
    }
    out[i] = tv[indices[i]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Shape shape{idx.size()};
  return detail::record("gather", std::move(shape), std::move(out), {&t}, [idx = std::move(idx)](detail::Node& self) {
    auto& pg = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) pg[idx[i]] += self.grad[i];
  });
}

inline Tensor gather(const Tensor& t, std::initializer_list<std::size_t> indices) {
  return gather(t, std::span<const std::size_t>(indices.begin(), indices.size()));
}

/// Same values, cut out of the graph.
inline Tensor detach(const Tensor& t) {
  return Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), false);
}

// ---------------------------------------------------------------------------
// Reductions. With no axis the result is a scalar; with an axis that axis is dropped.

enum class ReduceOp { sum, mean, max };

namespace detail {

inline Tensor reduce(ReduceOp op, const Tensor& t, std::optional<std::size_t> axis) {
  static constexpr std::string_view names[] = {"sum", "mean", "max"};
  const auto name = names[static_cast<int>(op)];
  const auto tv = t.values();
  if (tv.empty()) throw ShapeError(std::string(name) + " of empty tensor");

  // View the input as outer x len x inner, reducing over len.
  std::size_t outer = 1, len = tv.size(), inner = 1;
  Shape out_shape;
  if (axis) {
    if (*axis >= t.rank()) {
      throw ShapeError(std::string(name) + ": axis " + std::to_string(*axis) + " invalid for " + shape_str(t.shape()));
    }
    const auto& s = t.shape();
    outer = 1;
    for (std::size_t i = 0; i < *axis; ++i) outer *= s[i];
    len = s[*axis];
    inner = 1;
    for (std::size_t i = *axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != *axis) out_shape.push_back(s[i]);
    if (len == 0) throw ShapeError(std::string(name) + " over empty axis");
  }

  std::vector<double> out(outer * inner);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::max) argmax.resize(out.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      if (op == ReduceOp::max) {
        std::size_t best = base;
        for (std::size_t l = 1; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          if (tv[idx] > tv[best]) best = idx;  // strict: first maximum wins
        }
        out[o * inner + in] = tv[best];
        argmax[o * inner + in] = best;
      } else {
        double acc = 0.0;
        for (std::size_t l = 0; l < len; ++l) acc += tv[base + l * inner];
        out[o * inner + in] = op == ReduceOp::mean ? acc / static_cast<double>(len) : acc;
      }
    }
  }

  return record(name, std::move(out_shape), std::move(out), {&t},
                [op, outer, len, inner, argmax = std::move(argmax)](Node& self) {
                  auto& pg = self.parents[0]->grad_buffer();
                  if (op == ReduceOp::max) {
                    for (std::size_t i = 0; i < argmax.size(); ++i) pg[argmax[i]] += self.grad[i];
                    return;
                  }
                  const double w = op == ReduceOp::mean ? 1.0 / static_cast<double>(len) : 1.0;
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t in = 0; in < inner; ++in) {
                      const double g = self.grad[o * inner + in] * w;
                      const std::size_t base = o * len * inner + in;
                      for (std::size_t l = 0; l < len; ++l) pg[base + l * inner] += g;
                    }
                });
}

}  // namespace detail

inline Tensor reduce(ReduceOp op, const Tensor& t, std::optional<std::size_t> axis = std::nullopt) {
  return detail::reduce(op, t, axis);
}
inline Tensor sum(const Tensor& t) { return detail::reduce(ReduceOp::sum, t, std::nullopt); }
inline Tensor sum(const Tensor& t, std::size_t axis) { return detail::reduce(ReduceOp::sum, t, axis); }
inline Tensor mean(const Tensor& t) { return detail::reduce(ReduceOp::mean, t, std::nullopt); }
inline Tensor mean(const Tensor& t, std::size_t axis) { return detail::reduce(ReduceOp::mean, t, axis); }
inline Tensor max(const Tensor& t) { return detail::reduce(ReduceOp::max, t, std::nullopt); }
inline Tensor max(const Tensor& t, std::size_t axis) { return detail::reduce(ReduceOp::max, t, axis); }

/// Row-wise log-softmax of a [BxC] matrix, stabilised by the (detached) row maximum.
inline Tensor log_softmax_rows(const Tensor& z) {
  if (z.rank() != 2) throw ShapeError("log_softmax_rows expects a matrix, got " + shape_str(z.shape()));
  const std::size_t b = z.rows();
  const auto shift = reshape(detach(max(z, 1)), Shape{b, 1});
  const auto centered = z - shift;
  const auto lse = reshape(log(sum(exp(centered), 1)), Shape{b, 1});
  return centered - lse;
}

}  // namespace ncl
