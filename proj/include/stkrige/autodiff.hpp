// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation on a dynamically recorded tape.
//
// A Tape owns every node created during one forward evaluation. Nodes are
// appended in evaluation order, so the tape order is already a topological
// order and backward() simply walks it in reverse. A tape is single-owner;
// concurrent forward passes each build their own.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "stkrige/error.hpp"
#include "stkrige/tensor.hpp"

namespace stkrige::ad {

enum class Op {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  AddRowVector,
  BroadcastRows,
  Concat,
  ConcatRows,
  Abs,
  Sigmoid,
  Tanh,
  Relu,
  Exp,
  Neg,
  Reciprocal,
  Softmax,
  SumAxis,
  WeightedSumAxis,
  SumAll,
  SliceRows,
  SliceCols,
  GatherRows,
  SegmentSum,
  ScaleRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::AddRowVector: return "add_row_vector";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::Concat: return "concat";
    case Op::ConcatRows: return "concat_rows";
    case Op::Abs: return "abs";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Neg: return "neg";
    case Op::Reciprocal: return "reciprocal";
    case Op::Softmax: return "softmax";
    case Op::SumAxis: return "sum_axis";
    case Op::WeightedSumAxis: return "weighted_sum_axis";
    case Op::SumAll: return "sum_all";
    case Op::SliceRows: return "slice_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::GatherRows: return "gather_rows";
    case Op::SegmentSum: return "segment_sum";
    case Op::ScaleRows: return "scale_rows";
  }
  return "unknown";
}

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  Op op = Op::Constant;
  std::vector<std::size_t> parents;
  bool requires_grad = false;
  std::function<void(Tape&, std::size_t)> backward;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (a parameter or a checked input).
  Var leaf(Tensor value) {
    return push(std::move(value), Op::Leaf, {}, true, nullptr);
  }

  Var constant(Tensor value) {
    return push(std::move(value), Op::Constant, {}, false, nullptr);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }

  /// Gradient of the last backward() target with respect to v. Nodes that
  /// were not reached hold zeros.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.numel() == 0 && n.value.numel() != 0) {
      return Tensor(n.value.shape(), 0.0);
    }
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.tape != this) throw Error("backward: variable from another tape");
    const Node& root = nodes_.at(loss.id);
    if (root.value.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(root.value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    in_backward_ = true;
    struct Reset {
      bool& flag;
      ~Reset() { flag = false; }
    } reset{in_backward_};
    grad_buffer(loss.id).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.numel() == 0) continue;
      n.backward(*this, i);
    }
  }

  /// Gradient accumulation buffer for node id, zero-initialised on demand.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  Var push(Tensor value, Op op, std::vector<std::size_t> parents,
           bool leaf_grad, std::function<void(Tape&, std::size_t)> bwd) {
    if (in_backward_) {
      throw Error("tape mutated during backward (op " +
                  std::string(op_name(op)) + ")");
    }
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite result in ") + op_name(op));
    }
    bool rg = leaf_grad;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.parents = std::move(parents);
    n.requires_grad = rg;
    if (rg && op != Op::Leaf) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

 private:
  std::vector<Node> nodes_;
  bool in_backward_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.tape) throw Error("uninitialised variable");
    if (t && v.tape != t) throw Error("variables from different tapes");
    t = v.tape;
  }
  return *t;
}

inline void require_same_shape(const char* op, const Tensor& a,
                               const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " +
                     shape_str(a.shape()));
  }
}

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// Elementwise unary op whose derivative is expressed through input x and
// output y.
template <class F, class DF>
Var unary(Var a, Op op, F f, DF df) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  const std::size_t pa = a.id;
  return t.push(std::move(y), op, {pa}, false,
                [pa, df](Tape& tp, std::size_t self) {
                  const Node& n = tp.node(self);
                  const Tensor& xin = tp.node(pa).value;
                  Tensor& g = tp.grad_buffer(pa);
                  for (std::size_t i = 0; i < g.numel(); ++i) {
                    g[i] += n.grad[i] * df(xin[i], n.value[i]);
                  }
                });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
  const std::size_t pa = a.id, pb = b.id;
  return t.push(std::move(y), Op::Add, {pa, pb}, false,
                [pa, pb](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  for (auto p : {pa, pb}) {
                    if (!tp.needs_grad(p)) continue;
                    Tensor& gp = tp.grad_buffer(p);
                    for (std::size_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
                  }
                });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= bv[i];
  const std::size_t pa = a.id, pb = b.id;
  return t.push(std::move(y), Op::Sub, {pa, pb}, false,
                [pa, pb](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  if (tp.needs_grad(pa)) {
                    Tensor& ga = tp.grad_buffer(pa);
                    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                  }
                  if (tp.needs_grad(pb)) {
                    Tensor& gb = tp.grad_buffer(pb);
                    for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
                  }
                });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= bv[i];
  const std::size_t pa = a.id, pb = b.id;
  return t.push(std::move(y), Op::Mul, {pa, pb}, false,
                [pa, pb](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  if (tp.needs_grad(pa)) {
                    const Tensor& other = tp.node(pb).value;
                    Tensor& ga = tp.grad_buffer(pa);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                      ga[i] += g[i] * other[i];
                    }
                  }
                  if (tp.needs_grad(pb)) {
                    const Tensor& other = tp.node(pa).value;
                    Tensor& gb = tp.grad_buffer(pb);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                      gb[i] += g[i] * other[i];
                    }
                  }
                });
}

inline Var abs(Var a) {
  return detail::unary(
      a, Op::Abs, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, Op::Sigmoid, detail::stable_sigmoid,
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, Op::Tanh, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, Op::Relu, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// max(0, x); the same primitive as relu.
inline Var max_zero(Var a) { return relu(a); }

inline Var exp(Var a) {
  return detail::unary(
      a, Op::Exp, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Var neg(Var a) {
  return detail::unary(
      a, Op::Neg, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

inline Var reciprocal(Var a) {
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x[i] == 0.0) throw NumericError("reciprocal of zero");
  }
  return detail::unary(
      a, Op::Reciprocal, [](double v) { return 1.0 / v; },
      [](double, double y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// Linear algebra and broadcasting

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_matrix("matmul", A);
  detail::require_matrix("matmul", B);
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  if (B.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(A.shape()) +
                     " x " + shape_str(B.shape()));
  }
  Tensor C(Shape{n, m}, 0.0);
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(C), Op::MatMul, {ia, ib}, false,
                [ia, ib, n, k, m](Tape& tp, std::size_t self) {
                  const double* g = tp.node(self).grad.data().data();
                  if (tp.needs_grad(ia)) {
                    const double* bv = tp.node(ib).value.data().data();
                    double* ga = tp.grad_buffer(ia).data().data();
                    // dA = dC B^T, accumulated row-wise against B^T
                    std::vector<double> bt(k * m);
                    for (std::size_t p = 0; p < k; ++p) {
                      for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = bv[p * m + j];
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                      const double* grow = g + i * m;
                      double* garow = ga + i * k;
                      for (std::size_t j = 0; j < m; ++j) {
                        const double gij = grow[j];
                        if (gij == 0.0) continue;
                        const double* btrow = bt.data() + j * k;
                        for (std::size_t p = 0; p < k; ++p) garow[p] += gij * btrow[p];
                      }
                    }
                  }
                  if (tp.needs_grad(ib)) {
                    const double* av = tp.node(ia).value.data().data();
                    double* gb = tp.grad_buffer(ib).data().data();
                    for (std::size_t i = 0; i < n; ++i) {
                      const double* grow = g + i * m;
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = av[i * k + p];
                        if (aip == 0.0) continue;
                        double* gbrow = gb + p * m;
                        for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
                      }
                    }
                  }
                });
}

/// X + 1 vᵀ: adds vector v (length cols) to every row of matrix X.
inline Var add_row_vector(Var x, Var v) {
  Tape& t = detail::same_tape({x, v});
  const Tensor& X = x.value();
  const Tensor& V = v.value();
  detail::require_matrix("add_row_vector", X);
  if (V.numel() != X.dim(1)) {
    throw ShapeError("add_row_vector: vector " + shape_str(V.shape()) +
                     " vs matrix " + shape_str(X.shape()));
  }
  Tensor y = X;
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += V[c];
  }
  const std::size_t ix = x.id, iv = v.id;
  return t.push(std::move(y), Op::AddRowVector, {ix, iv}, false,
                [ix, iv, rows, cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  if (tp.needs_grad(ix)) {
                    Tensor& gx = tp.grad_buffer(ix);
                    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
                  }
                  if (tp.needs_grad(iv)) {
                    Tensor& gv = tp.grad_buffer(iv);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
                    }
                  }
                });
}

/// Repeats vector v as `rows` rows of a matrix.
inline Var broadcast_rows(Var v, std::size_t rows) {
  Tape& t = *v.tape;
  const Tensor& V = v.value();
  const std::size_t cols = V.numel();
  Tensor y(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(V.data().begin(), V.data().end(), y.data().begin() + r * cols);
  }
  const std::size_t iv = v.id;
  return t.push(std::move(y), Op::BroadcastRows, {iv}, false,
                [iv, rows, cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  Tensor& gv = tp.grad_buffer(iv);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
                  }
                });
}

/// Concatenation along the last axis. All inputs share the leading shape.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts.front().tape;
  const Shape& lead = parts.front().shape();
  if (lead.empty()) throw ShapeError("concat: scalar input");
  const std::size_t rows = parts.front().value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.tape != &t) throw Error("concat: variables from different tapes");
    const Shape& s = p.shape();
    if (s.size() != lead.size() ||
        !std::equal(s.begin(), s.end() - 1, lead.begin())) {
      throw ShapeError("concat: leading shapes differ " + shape_str(lead) +
                       " vs " + shape_str(s));
    }
    widths.push_back(s.back());
    ids.push_back(p.id);
    total += s.back();
  }
  Shape out_shape = lead;
  out_shape.back() = total;
  Tensor y(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data().begin() + r * widths[k], widths[k],
                  y.data().begin() + r * total + off);
    }
    off += widths[k];
  }
  return t.push(std::move(y), Op::Concat, ids, false,
                [ids, widths, rows, total](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  std::size_t o = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (tp.needs_grad(ids[k])) {
                      Tensor& gp = tp.grad_buffer(ids[k]);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < widths[k]; ++c) {
                          gp[r * widths[k] + c] += g[r * total + o + c];
                        }
                      }
                    }
                    o += widths[k];
                  }
                });
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t cols = parts.front().value().cols();
  std::vector<std::size_t> counts, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix("concat_rows", p.value());
    if (p.value().cols() != cols) {
      throw ShapeError("concat_rows: column counts differ");
    }
    counts.push_back(p.value().dim(0));
    ids.push_back(p.id);
    total += counts.back();
  }
  Tensor y(Shape{total, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              y.data().begin() + off * cols);
    off += p.value().dim(0);
  }
  return t.push(std::move(y), Op::ConcatRows, ids, false,
                [ids, counts, cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  std::size_t o = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (tp.needs_grad(ids[k])) {
                      Tensor& gp = tp.grad_buffer(ids[k]);
                      for (std::size_t i = 0; i < counts[k] * cols; ++i) {
                        gp[i] += g[o * cols + i];
                      }
                    }
                    o += counts[k];
                  }
                });
}

inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require_matrix("slice_rows", X);
  if (start + count > X.dim(0)) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  const std::size_t cols = X.dim(1);
  Tensor y(Shape{count, cols});
  std::copy_n(X.data().begin() + start * cols, count * cols, y.data().begin());
  const std::size_t ix = x.id;
  return t.push(std::move(y), Op::SliceRows, {ix}, false,
                [ix, start, count, cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < count * cols; ++i) {
                    gx[start * cols + i] += g[i];
                  }
                });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require_matrix("slice_cols", X);
  if (start + count > X.dim(1)) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  Tensor y(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) y[r * count + c] = X[r * cols + start + c];
  }
  const std::size_t ix = x.id;
  return t.push(std::move(y), Op::SliceCols, {ix}, false,
                [ix, start, count, rows, cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < count; ++c) {
                      gx[r * cols + start + c] += g[r * count + c];
                    }
                  }
                });
}

/// out row i = x row index[i].
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require_matrix("gather_rows", X);
  const std::size_t cols = X.dim(1);
  Tensor y(Shape{index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= X.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(X.data().begin() + index[i] * cols, cols,
                y.data().begin() + i * cols);
  }
  const std::size_t ix = x.id;
  return t.push(std::move(y), Op::GatherRows, {ix}, false,
                [ix, index = std::move(index), cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < index.size(); ++i) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      gx[index[i] * cols + c] += g[i * cols + c];
                    }
                  }
                });
}

/// Weighted scatter of rows: out[segment[i]] += weight[i] * x[i]. The
/// weights are constants.
inline Var segment_sum(Var x, std::vector<std::size_t> segment,
                       std::vector<double> weight, std::size_t out_rows) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require_matrix("segment_sum", X);
  if (segment.size() != X.dim(0) || weight.size() != X.dim(0)) {
    throw ShapeError("segment_sum: index/weight length must equal row count");
  }
  const std::size_t cols = X.dim(1);
  Tensor y(Shape{out_rows, cols}, 0.0);
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] >= out_rows) throw ShapeError("segment_sum: segment out of range");
    const double w = weight[i];
    for (std::size_t c = 0; c < cols; ++c) y[segment[i] * cols + c] += w * X[i * cols + c];
  }
  const std::size_t ix = x.id;
  return t.push(std::move(y), Op::SegmentSum, {ix}, false,
                [ix, segment = std::move(segment), weight = std::move(weight),
                 cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < segment.size(); ++i) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      gx[i * cols + c] += weight[i] * g[segment[i] * cols + c];
                    }
                  }
                });
}

/// Multiplies row r of x by s[r]; s has one entry per row.
inline Var scale_rows(Var x, Var s) {
  Tape& t = detail::same_tape({x, s});
  const Tensor& X = x.value();
  const Tensor& S = s.value();
  detail::require_matrix("scale_rows", X);
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  if (S.numel() != rows) throw ShapeError("scale_rows: one scale per row required");
  Tensor y = X;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] *= S[r];
  }
  const std::size_t ix = x.id, is = s.id;
  return t.push(std::move(y), Op::ScaleRows, {ix, is}, false,
                [ix, is, rows, cols](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  if (tp.needs_grad(ix)) {
                    const Tensor& sv = tp.node(is).value;
                    Tensor& gx = tp.grad_buffer(ix);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        gx[r * cols + c] += g[r * cols + c] * sv[r];
                      }
                    }
                  }
                  if (tp.needs_grad(is)) {
                    const Tensor& xv = tp.node(ix).value;
                    Tensor& gs = tp.grad_buffer(is);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double acc = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        acc += g[r * cols + c] * xv[r * cols + c];
                      }
                      gs[r] += acc;
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var softmax(Var x, std::size_t axis) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const auto sp = detail::split_axis(X.shape(), axis);
  Tensor y(X.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) mx = std::max(mx, X[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double e = std::exp(X[base + k * sp.inner] - mx);
        y[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) y[base + k * sp.inner] /= z;
    }
  }
  const std::size_t ix = x.id;
  return t.push(std::move(y), Op::Softmax, {ix}, false,
                [ix, sp](Tape& tp, std::size_t self) {
                  const Node& n = tp.node(self);
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t o = 0; o < sp.outer; ++o) {
                    for (std::size_t in = 0; in < sp.inner; ++in) {
                      const std::size_t base = o * sp.extent * sp.inner + in;
                      double dot = 0.0;
                      for (std::size_t k = 0; k < sp.extent; ++k) {
                        const std::size_t i = base + k * sp.inner;
                        dot += n.grad[i] * n.value[i];
                      }
                      for (std::size_t k = 0; k < sp.extent; ++k) {
                        const std::size_t i = base + k * sp.inner;
                        gx[i] += n.value[i] * (n.grad[i] - dot);
                      }
                    }
                  }
                });
}

namespace detail {

inline Var reduce_axis(Var x, std::size_t axis, std::vector<double> weights,
                       Op op) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const auto sp = split_axis(X.shape(), axis);
  if (weights.empty()) weights.assign(sp.extent, 1.0);
  if (weights.size() != sp.extent) {
    throw ShapeError("weighted_sum: weight count " +
                     std::to_string(weights.size()) + " vs axis extent " +
                     std::to_string(sp.extent));
  }
  Shape out_shape = X.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor y(out_shape, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.extent; ++k) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        y[o * sp.inner + in] += weights[k] * X[(o * sp.extent + k) * sp.inner + in];
      }
    }
  }
  const std::size_t ix = x.id;
  return t.push(std::move(y), op, {ix}, false,
                [ix, sp, weights = std::move(weights)](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.node(self).grad;
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t o = 0; o < sp.outer; ++o) {
                    for (std::size_t k = 0; k < sp.extent; ++k) {
                      for (std::size_t in = 0; in < sp.inner; ++in) {
                        gx[(o * sp.extent + k) * sp.inner + in] +=
                            weights[k] * g[o * sp.inner + in];
                      }
                    }
                  }
                });
}

}  // namespace detail

/// Sums over `axis`, removing it from the shape.
inline Var sum(Var x, std::size_t axis) {
  return detail::reduce_axis(x, axis, {}, Op::SumAxis);
}

/// Σ_k w_k x[..., k, ...] along `axis` with constant weights.
inline Var weighted_sum(Var x, std::size_t axis, std::vector<double> weights) {
  if (weights.empty()) throw ShapeError("weighted_sum: empty weights");
  return detail::reduce_axis(x, axis, std::move(weights), Op::WeightedSumAxis);
}

inline Var sum_all(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.data()) s += v;
  const std::size_t ix = x.id;
  return t.push(Tensor::scalar(s), Op::SumAll, {ix}, false,
                [ix](Tape& tp, std::size_t self) {
                  const double g = tp.node(self).grad[0];
                  Tensor& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
                });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace stkrige::ad
