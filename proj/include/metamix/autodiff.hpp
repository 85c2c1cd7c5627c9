#pragma once

// Reverse-mode automatic differentiation over small dense matrices.
//
// A Graph is built once with named Input/Parameter leaves. Differentiation is
// symbolic: gradient() appends the adjoint computation to the same graph as
// ordinary nodes, so the result can itself be differentiated again. Numeric
// values are produced by compiling a Program (the set of nodes needed for some
// outputs) and running it in a Workspace that holds the bindings and buffers.
// Programs are immutable; one Workspace per thread.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metamix/error.hpp"

namespace metamix::ad {

/// Rank 0 (scalar) or rank 2 (rows x cols, row-major) shape.
struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 1;
  int rank = 0;

  static constexpr Shape scalar() { return {1, 1, 0}; }
  static constexpr Shape matrix(std::size_t r, std::size_t c) { return {r, c, 2}; }

  constexpr std::size_t size() const { return rows * cols; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    if (rank == 0) return "()";
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
  }
};

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : data(1, 0.0) {}
  explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) throw ShapeError("tensor data does not match shape " + shape.str());
  }

  static Tensor scalar(double v) { return Tensor(Shape::scalar(), v); }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> values) {
    return Tensor(Shape::matrix(r, c), std::move(values));
  }

  double item() const { return data.at(0); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * shape.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * shape.cols + c]; }
};

enum class Op : std::uint8_t {
  Input,
  Parameter,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  MatMul,
  Relu,
  Sin,
  Tanh,
  Exp,
  Log,
  Square,
  Sum,
  Mean,
  Softmax,
  Max,
  // Helpers emitted by differentiation.
  Cos,
  Step,        // heaviside(x > 0); zero derivative
  ArgMaxMask,  // one-hot of the first maximum along an axis; zero derivative
  Detach,      // identity forward, zero derivative
  Scale,       // x * attr
  SumTo,       // reduce broadcast dimensions down to the node shape
  BroadcastTo, // replicate size-1 dimensions up to the node shape
};

/// Reduction axis. PerRow yields one value per row (rows x 1), PerCol one
/// value per column (1 x cols).
enum class Axis : std::uint8_t { All, PerRow, PerCol };

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

struct Node {
  Op op = Op::Constant;
  Shape shape;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  double attr = 0.0;
  Axis axis = Axis::All;
  bool trans_a = false;
  bool trans_b = false;
  std::uint32_t slot = 0;  // constant index for Constant nodes
};

class Graph;

/// Handle to a node inside a Graph. Cheap to copy; the graph must outlive it.
struct Expr {
  Graph* graph = nullptr;
  NodeId id = kNoNode;

  const Node& node() const;
  const Shape& shape() const { return node().shape; }
  bool valid() const { return graph != nullptr && id != kNoNode; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Expr input(std::string name, Shape shape) { return leaf(Op::Input, std::move(name), shape); }
  Expr parameter(std::string name, Shape shape) { return leaf(Op::Parameter, std::move(name), shape); }

  Expr constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.shape = value.shape;
    n.slot = static_cast<std::uint32_t>(constants_.size());
    constants_.push_back(std::move(value));
    return push(n);
  }

  /// Rank-0 constant, deduplicated by value.
  Expr scalar(double v) {
    auto key = std::bit_cast<std::uint64_t>(v);
    if (auto it = scalar_cache_.find(key); it != scalar_cache_.end()) return {this, it->second};
    Expr e = constant(Tensor::scalar(v));
    scalar_cache_.emplace(key, e.id);
    return e;
  }

  Expr zeros(Shape s) { return constant(Tensor(s, 0.0)); }

  Expr push(const Node& n) {
    if (nodes_.size() >= kNoNode) throw Error("graph node limit reached");
    nodes_.push_back(n);
    names_.emplace_back();
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::string& name(NodeId id) const { return names_.at(id); }
  const Tensor& constant_value(const Node& n) const { return constants_.at(n.slot); }

  /// Leaf lookup by binding name.
  NodeId find(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    return it == by_name_.end() ? kNoNode : it->second;
  }

  /// Label used in error messages.
  std::string label(NodeId id) const {
    if (!names_[id].empty()) return names_[id];
    return "#" + std::to_string(id);
  }

 private:
  Expr leaf(Op op, std::string name, Shape shape) {
    if (name.empty()) throw Error("graph leaves need a name");
    if (by_name_.count(name)) throw Error("duplicate graph leaf '" + name + "'");
    Node n;
    n.op = op;
    n.shape = shape;
    Expr e = push(n);
    names_[e.id] = name;
    by_name_.emplace(std::move(name), e.id);
    return e;
  }

  std::vector<Node> nodes_;
  std::vector<std::string> names_;
  std::vector<Tensor> constants_;
  std::unordered_map<std::string, NodeId> by_name_;
  std::unordered_map<std::uint64_t, NodeId> scalar_cache_;
};

inline const Node& Expr::node() const { return graph->node(id); }

namespace detail {

inline Graph& same_graph(const Expr& a, const Expr& b) {
  if (!a.valid() || !b.valid() || a.graph != b.graph) throw Error("operands belong to different graphs");
  return *a.graph;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError("cannot broadcast " + a.str() + " with " + b.str());
  };
  Shape s{dim(a.rows, b.rows), dim(a.cols, b.cols), std::max(a.rank, b.rank)};
  return s;
}

inline bool is_scalar_constant(const Expr& e, double v) {
  const Node& n = e.node();
  if (n.op != Op::Constant || n.shape.rank != 0) return false;
  return e.graph->constant_value(n).data[0] == v;
}

inline Expr unary(Op op, Expr a, Shape shape, double attr = 0.0, Axis axis = Axis::All) {
  Node n;
  n.op = op;
  n.shape = shape;
  n.a = a.id;
  n.attr = attr;
  n.axis = axis;
  return a.graph->push(n);
}

inline Expr binary(Op op, Expr a, Expr b) {
  Graph& g = same_graph(a, b);
  Node n;
  n.op = op;
  n.shape = broadcast_shape(a.shape(), b.shape());
  n.a = a.id;
  n.b = b.id;
  return g.push(n);
}

inline Shape reduced_shape(const Shape& s, Axis axis) {
  switch (axis) {
    case Axis::All: return Shape::scalar();
    case Axis::PerRow: return Shape::matrix(s.rows, 1);
    case Axis::PerCol: return Shape::matrix(1, s.cols);
  }
  return Shape::scalar();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph construction

inline Expr add(Expr a, Expr b) {
  if (detail::is_scalar_constant(b, 0.0) && detail::broadcast_shape(a.shape(), b.shape()) == a.shape()) return a;
  return detail::binary(Op::Add, a, b);
}
inline Expr sub(Expr a, Expr b) { return detail::binary(Op::Sub, a, b); }
inline Expr mul(Expr a, Expr b) {
  if (detail::is_scalar_constant(b, 1.0) && detail::broadcast_shape(a.shape(), b.shape()) == a.shape()) return a;
  if (detail::is_scalar_constant(a, 1.0) && detail::broadcast_shape(a.shape(), b.shape()) == b.shape()) return b;
  return detail::binary(Op::Mul, a, b);
}
inline Expr div(Expr a, Expr b) { return detail::binary(Op::Div, a, b); }
inline Expr neg(Expr a) { return detail::unary(Op::Neg, a, a.shape()); }
inline Expr scale(Expr a, double c) {
  if (c == 1.0) return a;
  return detail::unary(Op::Scale, a, a.shape(), c);
}

/// op(a) * op(b) where op transposes when the flag is set.
inline Expr matmul(Expr a, Expr b, bool trans_a = false, bool trans_b = false) {
  Graph& g = detail::same_graph(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank != 2 || sb.rank != 2) throw ShapeError("matmul needs rank-2 operands");
  std::size_t m = trans_a ? sa.cols : sa.rows;
  std::size_t ka = trans_a ? sa.rows : sa.cols;
  std::size_t kb = trans_b ? sb.cols : sb.rows;
  std::size_t n = trans_b ? sb.rows : sb.cols;
  if (ka != kb) throw ShapeError("matmul inner dimensions differ: " + sa.str() + " * " + sb.str());
  Node node;
  node.op = Op::MatMul;
  node.shape = Shape::matrix(m, n);
  node.a = a.id;
  node.b = b.id;
  node.trans_a = trans_a;
  node.trans_b = trans_b;
  return g.push(node);
}

inline Expr relu(Expr a) { return detail::unary(Op::Relu, a, a.shape()); }
inline Expr sin(Expr a) { return detail::unary(Op::Sin, a, a.shape()); }
inline Expr cos(Expr a) { return detail::unary(Op::Cos, a, a.shape()); }
inline Expr tanh(Expr a) { return detail::unary(Op::Tanh, a, a.shape()); }
inline Expr exp(Expr a) { return detail::unary(Op::Exp, a, a.shape()); }
inline Expr log(Expr a) { return detail::unary(Op::Log, a, a.shape()); }
inline Expr square(Expr a) { return detail::unary(Op::Square, a, a.shape()); }
inline Expr step(Expr a) { return detail::unary(Op::Step, a, a.shape()); }
inline Expr detach(Expr a) { return detail::unary(Op::Detach, a, a.shape()); }

inline Expr sum(Expr a, Axis axis = Axis::All) {
  return detail::unary(Op::Sum, a, detail::reduced_shape(a.shape(), axis), 0.0, axis);
}
inline Expr mean(Expr a, Axis axis = Axis::All) {
  return detail::unary(Op::Mean, a, detail::reduced_shape(a.shape(), axis), 0.0, axis);
}
inline Expr max(Expr a, Axis axis = Axis::All) {
  return detail::unary(Op::Max, a, detail::reduced_shape(a.shape(), axis), 0.0, axis);
}
inline Expr argmax_mask(Expr a, Axis axis = Axis::All) { return detail::unary(Op::ArgMaxMask, a, a.shape(), 0.0, axis); }

/// Row-wise softmax of a / temperature.
inline Expr softmax(Expr a, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw Error("softmax temperature must be positive");
  return detail::unary(Op::Softmax, a, a.shape(), temperature);
}

inline Expr sum_to(Expr a, Shape target) {
  if (a.shape() == target) return a;
  if ((target.rows != 1 && target.rows != a.shape().rows) || (target.cols != 1 && target.cols != a.shape().cols))
    throw ShapeError("sum_to: " + a.shape().str() + " -> " + target.str());
  return detail::unary(Op::SumTo, a, target);
}

inline Expr broadcast_to(Expr a, Shape target) {
  if (a.shape() == target) return a;
  if ((a.shape().rows != 1 && a.shape().rows != target.rows) || (a.shape().cols != 1 && a.shape().cols != target.cols))
    throw ShapeError("broadcast_to: " + a.shape().str() + " -> " + target.str());
  return detail::unary(Op::BroadcastTo, a, target);
}

inline Expr operator+(Expr a, Expr b) { return add(a, b); }
inline Expr operator-(Expr a, Expr b) { return sub(a, b); }
inline Expr operator*(Expr a, Expr b) { return mul(a, b); }
inline Expr operator/(Expr a, Expr b) { return div(a, b); }
inline Expr operator-(Expr a) { return neg(a); }
inline Expr operator*(Expr a, double c) { return scale(a, c); }
inline Expr operator*(double c, Expr a) { return scale(a, c); }
inline Expr operator+(Expr a, double c) { return add(a, a.graph->scalar(c)); }
inline Expr operator-(Expr a, double c) { return add(a, a.graph->scalar(-c)); }

// ---------------------------------------------------------------------------
// Symbolic reverse mode

/// Partial derivatives of the scalar y with respect to each node in wrt, as
/// new nodes of the same graph. Nodes that y does not depend on get zeros.
inline std::vector<Expr> gradient(Expr y, std::span<const Expr> wrt) {
  Graph& g = *y.graph;
  if (y.shape().rank != 0) throw ShapeError("gradient needs a rank-0 output, got " + y.shape().str());
  const NodeId top = y.id;
  const std::size_t count = static_cast<std::size_t>(top) + 1;

  std::vector<char> is_target(count, 0);
  for (const Expr& w : wrt) {
    if (w.graph != y.graph) throw Error("gradient target from another graph");
    if (w.id < count) is_target[w.id] = 1;
  }

  // Forward pass: which nodes carry a dependency on some target.
  std::vector<char> depends(count, 0);
  for (NodeId i = 0; i < count; ++i) {
    const Node& n = g.node(i);
    if (is_target[i]) {
      depends[i] = 1;
      continue;
    }
    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
      case Op::Constant:
      case Op::Step:
      case Op::ArgMaxMask:
      case Op::Detach:
        break;
      default:
        depends[i] = (n.a != kNoNode && depends[n.a]) || (n.b != kNoNode && depends[n.b]);
    }
  }

  std::vector<NodeId> adjoint(count, kNoNode);
  auto accumulate = [&](NodeId target, Expr contribution) {
    if (!depends[target]) return;
    if (adjoint[target] == kNoNode) {
      adjoint[target] = contribution.id;
    } else {
      adjoint[target] = add(Expr{&g, adjoint[target]}, contribution).id;
    }
  };

  if (depends[top]) adjoint[top] = g.scalar(1.0).id;

  for (NodeId i = top + 1; i-- > 0;) {
    if (adjoint[i] == kNoNode) continue;
    const Node n = g.node(i);  // copy: push() may reallocate
    const Expr gy{&g, adjoint[i]};
    const Expr self{&g, i};
    const Expr a{&g, n.a};
    const Expr b{&g, n.b};
    auto shape_of = [&](NodeId id) { return g.node(id).shape; };

    switch (n.op) {
      case Op::Add:
        if (depends[n.a]) accumulate(n.a, sum_to(gy, shape_of(n.a)));
        if (depends[n.b]) accumulate(n.b, sum_to(gy, shape_of(n.b)));
        break;
      case Op::Sub:
        if (depends[n.a]) accumulate(n.a, sum_to(gy, shape_of(n.a)));
        if (depends[n.b]) accumulate(n.b, sum_to(neg(gy), shape_of(n.b)));
        break;
      case Op::Mul:
        if (depends[n.a]) accumulate(n.a, sum_to(mul(gy, b), shape_of(n.a)));
        if (depends[n.b]) accumulate(n.b, sum_to(mul(gy, a), shape_of(n.b)));
        break;
      case Op::Div:
        if (depends[n.a]) accumulate(n.a, sum_to(div(gy, b), shape_of(n.a)));
        if (depends[n.b]) accumulate(n.b, sum_to(neg(div(mul(gy, self), b)), shape_of(n.b)));
        break;
      case Op::Neg:
        accumulate(n.a, neg(gy));
        break;
      case Op::Scale:
        accumulate(n.a, scale(gy, n.attr));
        break;
      case Op::MatMul:
        if (depends[n.a]) {
          accumulate(n.a, n.trans_a ? matmul(b, gy, n.trans_b, true) : matmul(gy, b, false, !n.trans_b));
        }
        if (depends[n.b]) {
          accumulate(n.b, n.trans_b ? matmul(gy, a, true, n.trans_a) : matmul(a, gy, !n.trans_a, false));
        }
        break;
      case Op::Relu:
        accumulate(n.a, mul(gy, step(a)));
        break;
      case Op::Sin:
        accumulate(n.a, mul(gy, cos(a)));
        break;
      case Op::Cos:
        accumulate(n.a, neg(mul(gy, sin(a))));
        break;
      case Op::Tanh:
        accumulate(n.a, mul(gy, sub(g.scalar(1.0), square(self))));
        break;
      case Op::Exp:
        accumulate(n.a, mul(gy, self));
        break;
      case Op::Log:
        accumulate(n.a, div(gy, a));
        break;
      case Op::Square:
        accumulate(n.a, scale(mul(gy, a), 2.0));
        break;
      case Op::Sum:
        accumulate(n.a, broadcast_to(gy, shape_of(n.a)));
        break;
      case Op::Mean: {
        const Shape& s = shape_of(n.a);
        double count_reduced = n.axis == Axis::All      ? static_cast<double>(s.size())
                               : n.axis == Axis::PerRow ? static_cast<double>(s.cols)
                                                        : static_cast<double>(s.rows);
        accumulate(n.a, scale(broadcast_to(gy, s), 1.0 / count_reduced));
        break;
      }
      case Op::Softmax: {
        Expr inner = sub(gy, sum(mul(gy, self), Axis::PerRow));
        accumulate(n.a, scale(mul(self, inner), 1.0 / n.attr));
        break;
      }
      case Op::Max:
        accumulate(n.a, mul(broadcast_to(gy, shape_of(n.a)), argmax_mask(a, n.axis)));
        break;
      case Op::SumTo:
        accumulate(n.a, broadcast_to(gy, shape_of(n.a)));
        break;
      case Op::BroadcastTo:
        accumulate(n.a, sum_to(gy, shape_of(n.a)));
        break;
      case Op::Input:
      case Op::Parameter:
      case Op::Constant:
      case Op::Step:
      case Op::ArgMaxMask:
      case Op::Detach:
        break;
    }
  }

  std::vector<Expr> result;
  result.reserve(wrt.size());
  for (const Expr& w : wrt) {
    if (w.id < count && adjoint[w.id] != kNoNode) {
      result.push_back({&g, adjoint[w.id]});
    } else {
      result.push_back(g.zeros(w.shape()));
    }
  }
  return result;
}

inline Expr gradient(Expr y, Expr x) {
  const Expr wrt[] = {x};
  return gradient(y, wrt)[0];
}

/// Gradient of reduce(gradient(y, wrt)) with respect to wrt. The default
/// reduction sums every first-order partial, which for a single scalar x
/// gives the second derivative d2y/dx2.
inline std::vector<Expr> gradient_of_gradient(Expr y, std::span<const Expr> wrt,
                                              const std::function<Expr(std::span<const Expr>)>& reduce = {}) {
  std::vector<Expr> first = gradient(y, wrt);
  Expr z;
  if (reduce) {
    z = reduce(first);
  } else {
    z = sum(first.at(0));
    for (std::size_t i = 1; i < first.size(); ++i) z = add(z, sum(first[i]));
  }
  return gradient(z, wrt);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace kernels {

inline void binary(Op op, const Tensor& x, const Tensor& y, Tensor& out) {
  const std::size_t rows = out.shape.rows;
  const std::size_t cols = out.shape.cols;
  const double* xp = x.data.data();
  const double* yp = y.data.data();
  double* op_ = out.data.data();
  auto apply = [op](double u, double v) {
    switch (op) {
      case Op::Add: return u + v;
      case Op::Sub: return u - v;
      case Op::Mul: return u * v;
      default: return u / v;
    }
  };
  if (x.shape.size() == out.shape.size() && y.shape.size() == out.shape.size()) {
    const std::size_t n = out.shape.size();
    switch (op) {
      case Op::Add: for (std::size_t i = 0; i < n; ++i) op_[i] = xp[i] + yp[i]; break;
      case Op::Sub: for (std::size_t i = 0; i < n; ++i) op_[i] = xp[i] - yp[i]; break;
      case Op::Mul: for (std::size_t i = 0; i < n; ++i) op_[i] = xp[i] * yp[i]; break;
      default: for (std::size_t i = 0; i < n; ++i) op_[i] = xp[i] / yp[i]; break;
    }
    return;
  }
  const bool xr = x.shape.rows != 1, xc = x.shape.cols != 1;
  const bool yr = y.shape.rows != 1, yc = y.shape.cols != 1;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double u = xp[(xr ? r : 0) * x.shape.cols + (xc ? c : 0)];
      double v = yp[(yr ? r : 0) * y.shape.cols + (yc ? c : 0)];
      op_[r * cols + c] = apply(u, v);
    }
  }
}

inline void matmul(const Tensor& a, const Tensor& b, bool ta, bool tb, Tensor& out) {
  const std::size_t m = out.shape.rows;
  const std::size_t n = out.shape.cols;
  const std::size_t k = ta ? a.shape.rows : a.shape.cols;
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = out.data.data();
  std::fill(out.data.begin(), out.data.end(), 0.0);
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double* arow = A + i * k;
        const double* brow = B + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        C[i * n + j] = s;
      }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const double api = A[p * m + i];
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
      }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += A[p * m + i] * B[j * k + p];
        C[i * n + j] = s;
      }
  }
}

inline void reduce(Op op, Axis axis, const Tensor& x, Tensor& out) {
  const std::size_t rows = x.shape.rows, cols = x.shape.cols;
  const double* xp = x.data.data();
  double* o = out.data.data();
  const bool is_max = op == Op::Max;
  const double init = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
  std::fill(out.data.begin(), out.data.end(), init);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t idx = axis == Axis::All ? 0 : axis == Axis::PerRow ? r : c;
      double v = xp[r * cols + c];
      o[idx] = is_max ? std::max(o[idx], v) : o[idx] + v;
    }
  }
  if (op == Op::Mean) {
    double denom = axis == Axis::All ? static_cast<double>(rows * cols)
                   : axis == Axis::PerRow ? static_cast<double>(cols)
                                          : static_cast<double>(rows);
    for (double& v : out.data) v /= denom;
  }
}

inline void argmax_mask(Axis axis, const Tensor& x, Tensor& out) {
  const std::size_t rows = x.shape.rows, cols = x.shape.cols;
  std::fill(out.data.begin(), out.data.end(), 0.0);
  auto mark_first_max = [&](auto begin_index, std::size_t count, std::size_t stride) {
    std::size_t best = begin_index;
    for (std::size_t t = 1; t < count; ++t) {
      std::size_t idx = begin_index + t * stride;
      if (x.data[idx] > x.data[best]) best = idx;
    }
    out.data[best] = 1.0;
  };
  switch (axis) {
    case Axis::All: mark_first_max(std::size_t{0}, rows * cols, 1); break;
    case Axis::PerRow:
      for (std::size_t r = 0; r < rows; ++r) mark_first_max(r * cols, cols, 1);
      break;
    case Axis::PerCol:
      for (std::size_t c = 0; c < cols; ++c) mark_first_max(c, rows, cols);
      break;
  }
}

inline void softmax(const Tensor& x, double temperature, Tensor& out) {
  const std::size_t rows = x.shape.rows, cols = x.shape.cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * cols;
    double* orow = out.data.data() + r * cols;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) hi = std::max(hi, xr[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      orow[c] = std::exp((xr[c] - hi) / temperature);
      total += orow[c];
    }
    for (std::size_t c = 0; c < cols; ++c) orow[c] /= total;
  }
}

inline void sum_to(const Tensor& x, Tensor& out) {
  std::fill(out.data.begin(), out.data.end(), 0.0);
  const std::size_t rows = x.shape.rows, cols = x.shape.cols;
  const bool keep_r = out.shape.rows != 1, keep_c = out.shape.cols != 1;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.data[(keep_r ? r : 0) * out.shape.cols + (keep_c ? c : 0)] += x.data[r * cols + c];
}

inline void broadcast_to(const Tensor& x, Tensor& out) {
  const std::size_t rows = out.shape.rows, cols = out.shape.cols;
  const bool xr = x.shape.rows != 1, xc = x.shape.cols != 1;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.data[r * cols + c] = x.data[(xr ? r : 0) * x.shape.cols + (xc ? c : 0)];
}

template <class F>
inline void map(const Tensor& x, Tensor& out, F f) {
  const std::size_t n = x.data.size();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = f(x.data[i]);
}

}  // namespace kernels

/// The ordered set of nodes needed to compute a list of outputs.
class Program {
 public:
  Program(const Graph& graph, std::vector<Expr> outputs) : graph_(&graph) {
    std::vector<char> needed(graph.size(), 0);
    for (const Expr& e : outputs) {
      if (e.graph != &graph) throw Error("program output from another graph");
      needed[e.id] = 1;
      outputs_.push_back(e.id);
    }
    for (std::size_t i = graph.size(); i-- > 0;) {
      if (!needed[i]) continue;
      const Node& n = graph.node(static_cast<NodeId>(i));
      if (n.a != kNoNode) needed[n.a] = 1;
      if (n.b != kNoNode) needed[n.b] = 1;
    }
    for (std::size_t i = 0; i < graph.size(); ++i) {
      if (!needed[i]) continue;
      const Node& n = graph.node(static_cast<NodeId>(i));
      if (n.op == Op::Input || n.op == Op::Parameter) {
        leaves_.push_back(static_cast<NodeId>(i));
      } else {
        order_.push_back(static_cast<NodeId>(i));
      }
    }
  }

  const Graph& graph() const { return *graph_; }
  std::span<const NodeId> order() const { return order_; }
  std::span<const NodeId> leaves() const { return leaves_; }
  std::span<const NodeId> outputs() const { return outputs_; }

 private:
  const Graph* graph_;
  std::vector<NodeId> order_;
  std::vector<NodeId> leaves_;
  std::vector<NodeId> outputs_;
};

/// Mutable evaluation state for one Program: bound leaves plus a value
/// buffer per node. Buffers are reused across run() calls.
class Workspace {
 public:
  explicit Workspace(const Program& program)
      : program_(&program), values_(program.graph().size()), bound_(program.graph().size(), 0) {
    const Graph& g = program.graph();
    for (NodeId id : program.leaves()) values_[id] = Tensor(g.node(id).shape);
    for (NodeId id : program.order()) {
      const Node& n = g.node(id);
      values_[id] = n.op == Op::Constant ? g.constant_value(n) : Tensor(n.shape);
    }
  }

  void bind(std::string_view name, std::span<const double> values) {
    bind(program_->graph().find(name), values, name);
  }

  void bind(std::string_view name, const Tensor& t) {
    NodeId id = program_->graph().find(name);
    if (id != kNoNode && t.shape.size() != program_->graph().node(id).shape.size())
      throw ShapeError("binding '" + std::string(name) + "' has shape " + t.shape.str() + ", expected " +
                       program_->graph().node(id).shape.str());
    bind(id, t.data, name);
  }

  void bind(NodeId id, std::span<const double> values, std::string_view name = {}) {
    const Graph& g = program_->graph();
    if (id == kNoNode || id >= g.size()) throw Error("no graph leaf named '" + std::string(name) + "'");
    const Node& n = g.node(id);
    if (n.op != Op::Input && n.op != Op::Parameter) throw Error("'" + g.label(id) + "' is not a leaf");
    if (values.size() != n.shape.size())
      throw ShapeError("binding '" + g.label(id) + "' has " + std::to_string(values.size()) + " values, expected " +
                       std::to_string(n.shape.size()));
    values_[id].shape = n.shape;
    values_[id].data.assign(values.begin(), values.end());
    bound_[id] = 1;
  }

  void run() {
    const Graph& g = program_->graph();
    for (NodeId id : program_->leaves())
      if (!bound_[id]) throw UnboundNodeError(g.label(id));
    for (NodeId id : program_->order()) compute(g, id);
  }

  const Tensor& value(Expr e) const { return values_.at(e.id); }
  const Tensor& output(std::size_t i) const { return values_[program_->outputs()[i]]; }

 private:
  void compute(const Graph& g, NodeId id) {
    const Node& n = g.node(id);
    Tensor& out = values_[id];
    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
      case Op::Constant:
        return;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div:
        kernels::binary(n.op, values_[n.a], values_[n.b], out);
        return;
      case Op::Neg: kernels::map(values_[n.a], out, [](double v) { return -v; }); return;
      case Op::Scale: {
        const double c = n.attr;
        kernels::map(values_[n.a], out, [c](double v) { return v * c; });
        return;
      }
      case Op::MatMul: kernels::matmul(values_[n.a], values_[n.b], n.trans_a, n.trans_b, out); return;
      case Op::Relu: kernels::map(values_[n.a], out, [](double v) { return v > 0.0 ? v : 0.0; }); return;
      case Op::Step: kernels::map(values_[n.a], out, [](double v) { return v > 0.0 ? 1.0 : 0.0; }); return;
      case Op::Sin: kernels::map(values_[n.a], out, [](double v) { return std::sin(v); }); return;
      case Op::Cos: kernels::map(values_[n.a], out, [](double v) { return std::cos(v); }); return;
      case Op::Tanh: kernels::map(values_[n.a], out, [](double v) { return std::tanh(v); }); return;
      case Op::Exp: kernels::map(values_[n.a], out, [](double v) { return std::exp(v); }); return;
      case Op::Log: kernels::map(values_[n.a], out, [](double v) { return std::log(v); }); return;
      case Op::Square: kernels::map(values_[n.a], out, [](double v) { return v * v; }); return;
      case Op::Detach: out.data = values_[n.a].data; return;
      case Op::Sum:
      case Op::Mean:
      case Op::Max:
        kernels::reduce(n.op, n.axis, values_[n.a], out);
        return;
      case Op::ArgMaxMask: kernels::argmax_mask(n.axis, values_[n.a], out); return;
      case Op::Softmax: kernels::softmax(values_[n.a], n.attr, out); return;
      case Op::SumTo: kernels::sum_to(values_[n.a], out); return;
      case Op::BroadcastTo: kernels::broadcast_to(values_[n.a], out); return;
    }
  }

  const Program* program_;
  std::vector<Tensor> values_;
  std::vector<char> bound_;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;

/// One-shot evaluation of several outputs.
inline std::vector<Tensor> evaluate(std::span<const Expr> outputs, const Bindings& bindings) {
  if (outputs.empty()) return {};
  Program program(*outputs[0].graph, {outputs.begin(), outputs.end()});
  Workspace ws(program);
  for (NodeId id : program.leaves()) {
    const std::string& name = program.graph().name(id);
    if (auto it = bindings.find(name); it != bindings.end()) ws.bind(name, it->second);
  }
  ws.run();
  std::vector<Tensor> result;
  for (std::size_t i = 0; i < outputs.size(); ++i) result.push_back(ws.output(i));
  return result;
}

inline Tensor evaluate(Expr output, const Bindings& bindings) {
  const Expr outs[] = {output};
  return evaluate(outs, bindings)[0];
}

/// Flattened partial derivatives, concatenated in wrt order.
struct Gradient {
  std::vector<double> values;
  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

/// Numeric reverse-mode gradient of scalar y at the given bindings.
inline Gradient gradient_at(Expr y, std::span<const Expr> wrt, const Bindings& bindings) {
  std::vector<Expr> grads = gradient(y, wrt);
  std::vector<Tensor> vals = evaluate(grads, bindings);
  Gradient out;
  for (const Tensor& t : vals) out.values.insert(out.values.end(), t.data.begin(), t.data.end());
  return out;
}

}  // namespace metamix::ad
