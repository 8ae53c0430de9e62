#pragma once

// Reverse-mode automatic differentiation over an append-only tape.
//
// Every value is a dense double matrix; scalars are 1x1 and vectors are
// n x 1.  Binary elementwise primitives broadcast a 1x1 operand against
// the other.  Matrix primitives (cholesky, triangular solves) carry their
// own adjoint rules so that taping a Gaussian density costs O(n^3) once
// instead of O(n^3) scalar nodes.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace bayeslearn::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Power,
  Sum,
  Dot,
  MatVec,
  MatMul,
  Cholesky,
  SolveLower,
  SolveLowerTransposed,
  LogDiagSum,
  Segment,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Power: return "power";
    case Op::Sum: return "sum";
    case Op::Dot: return "dot";
    case Op::MatVec: return "matvec";
    case Op::MatMul: return "matmul";
    case Op::Cholesky: return "cholesky";
    case Op::SolveLower: return "triangular_solve";
    case Op::SolveLowerTransposed: return "triangular_solve_transposed";
    case Op::LogDiagSum: return "log_diag_sum";
    case Op::Segment: return "segment";
  }
  return "unknown";
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.  Only the
/// lower triangle of `a` is read.
inline Matrix cholesky_lower(const Matrix& a) {
  if (a.rows() != a.cols()) {
    std::ostringstream msg;
    msg << "cholesky: expected a square matrix, got " << a.rows() << "x"
        << a.cols();
    throw ShapeError(msg.str());
  }
  const Index n = a.rows();
  Matrix l = Matrix::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    double d = a(j, j);
    for (Index k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NumericError(
          "cholesky: matrix is not positive definite (pivot " +
              std::to_string(j) + ")",
          j);
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

class Tape;

/// Handle to a node on a tape.  Dimensions are fixed at creation.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  int index() const noexcept { return index_; }
  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index size() const noexcept { return rows_ * cols_; }
  bool is_scalar() const noexcept { return rows_ == 1 && cols_ == 1; }
  bool is_vector() const noexcept { return cols_ == 1; }

  /// Primal value.  The reference is invalidated by the next record on the
  /// same tape.
  const Matrix& value() const;
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, int index, Index rows, Index cols)
      : tape_(tape), index_(index), rows_(rows), cols_(cols) {}

  Tape* tape_ = nullptr;
  int index_ = -1;
  Index rows_ = 0;
  Index cols_ = 0;
};

class Tape;

/// Result of a backward pass: adjoints readable per Var.  Views the tape,
/// so it must not outlive it or survive another backward pass.
class Gradient {
 public:
  const Matrix& wrt(const Var& v) const;
  double scalar_wrt(const Var& v) const { return wrt(v)(0, 0); }

 private:
  friend class Tape;
  explicit Gradient(const Tape* tape) : tape_(tape) {}
  const Tape* tape_;
};

class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    int lhs = -1;
    int rhs = -1;
    double param = 0.0;
    Index offset = 0;
    Matrix value;
    Matrix adjoint;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(const Matrix& value) { return push_leaf(value); }
  Var variable(const Vector& value) { return push_leaf(Matrix(value)); }
  Var variable(double value) { return push_leaf(Matrix::Constant(1, 1, value)); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  const Matrix& value(const Var& v) const { return nodes_[check(v)].value; }
  const Matrix& adjoint(const Var& v) const { return nodes_[check(v)].adjoint; }

  /// Append a primitive applied to `inputs`.  `param` is the exponent for
  /// Power; for Segment it is the length and `offset` the start.
  Var record(Op op, std::initializer_list<Var> inputs, double param = 0.0,
             Index offset = 0);

  /// Reverse sweep seeded at the scalar `output`.  Adjoints of nodes that
  /// are not ancestors of `output` are left at exactly zero.
  Gradient backward(const Var& output);

 private:
  friend class Var;
  friend class Gradient;

  int check(const Var& v) const {
    if (v.tape_ != this) throw UsageError("Var belongs to a different tape");
    return v.index_;
  }

  Var push_leaf(Matrix value) {
    const Index r = value.rows(), c = value.cols();
    nodes_.push_back(Node{Op::Leaf, -1, -1, 0.0, 0, std::move(value), {}});
    return Var(this, static_cast<int>(nodes_.size() - 1), r, c);
  }

  static void accumulate(Matrix& target, const Matrix& contribution) {
    if (target.rows() == contribution.rows() &&
        target.cols() == contribution.cols()) {
      target += contribution;
    } else {
      // broadcast operand collapses its adjoint
      target(0, 0) += contribution.sum();
    }
  }

  void propagate(std::size_t i);

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

inline double Var::scalar() const {
  if (!is_scalar()) throw UsageError("scalar(): Var is not 1x1");
  return value()(0, 0);
}

inline const Matrix& Gradient::wrt(const Var& v) const {
  return tape_->adjoint(v);
}

namespace detail {

[[noreturn]] inline void shape_error(Op op, const Var& a, const Var& b) {
  std::ostringstream msg;
  msg << op_name(op) << ": nonconforming operands " << a.rows() << "x"
      << a.cols() << " and " << b.rows() << "x" << b.cols();
  throw ShapeError(msg.str());
}

[[noreturn]] inline void shape_error(Op op, const Var& a, const char* need) {
  std::ostringstream msg;
  msg << op_name(op) << ": operand " << a.rows() << "x" << a.cols()
      << " is not " << need;
  throw ShapeError(msg.str());
}

/// L^-1 B and L^-T B for lower-triangular L.
inline Matrix solve_l(const Matrix& l, const Matrix& b) {
  return l.triangularView<Eigen::Lower>().solve(b);
}

inline Matrix solve_lt(const Matrix& l, const Matrix& b) {
  return l.transpose().triangularView<Eigen::Upper>().solve(b);
}

template <class F>
Matrix broadcast(const Matrix& a, const Matrix& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols())
    return a.binaryExpr(b, f);
  if (a.size() == 1) {
    const double s = a(0, 0);
    return b.unaryExpr([&](double x) { return f(s, x); });
  }
  const double s = b(0, 0);
  return a.unaryExpr([&](double x) { return f(x, s); });
}

}  // namespace detail

inline Var Tape::record(Op op, std::initializer_list<Var> inputs, double param,
                        Index offset) {
  std::vector<Var> in(inputs);
  for (const Var& v : in) check(v);

  const auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw UsageError(std::string(op_name(op)) + ": expected " +
                       std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };

  Matrix out;
  switch (op) {
    case Op::Leaf:
      throw UsageError("record: leaves are created with Tape::variable");
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      arity(2);
      const Var& a = in[0];
      const Var& b = in[1];
      const bool same = a.rows() == b.rows() && a.cols() == b.cols();
      if (!same && !a.is_scalar() && !b.is_scalar()) detail::shape_error(op, a, b);
      const Matrix& x = nodes_[a.index_].value;
      const Matrix& y = nodes_[b.index_].value;
      switch (op) {
        case Op::Add: out = detail::broadcast(x, y, [](double u, double v) { return u + v; }); break;
        case Op::Sub: out = detail::broadcast(x, y, [](double u, double v) { return u - v; }); break;
        case Op::Mul: out = detail::broadcast(x, y, [](double u, double v) { return u * v; }); break;
        default: out = detail::broadcast(x, y, [](double u, double v) { return u / v; }); break;
      }
      break;
    }
    case Op::Neg:
      arity(1);
      out = -nodes_[in[0].index_].value;
      break;
    case Op::Exp:
      arity(1);
      out = nodes_[in[0].index_].value.unaryExpr([](double u) { return std::exp(u); });
      break;
    case Op::Log:
      arity(1);
      out = nodes_[in[0].index_].value.unaryExpr([](double u) { return std::log(u); });
      break;
    case Op::Power:
      arity(1);
      out = nodes_[in[0].index_].value.unaryExpr([param](double u) { return std::pow(u, param); });
      break;
    case Op::Sum: {
      arity(1);
      const Matrix& x = nodes_[in[0].index_].value;
      double s = 0.0;
      for (Index j = 0; j < x.cols(); ++j)
        for (Index i = 0; i < x.rows(); ++i) s += x(i, j);
      out = Matrix::Constant(1, 1, s);
      break;
    }
    case Op::Dot: {
      arity(2);
      if (!in[0].is_vector() || !in[1].is_vector() || in[0].rows() != in[1].rows())
        detail::shape_error(op, in[0], in[1]);
      const Matrix& x = nodes_[in[0].index_].value;
      const Matrix& y = nodes_[in[1].index_].value;
      double s = 0.0;
      for (Index i = 0; i < x.rows(); ++i) s += x(i, 0) * y(i, 0);
      out = Matrix::Constant(1, 1, s);
      break;
    }
    case Op::MatVec:
      arity(2);
      if (!in[1].is_vector() || in[0].cols() != in[1].rows())
        detail::shape_error(op, in[0], in[1]);
      out = nodes_[in[0].index_].value * nodes_[in[1].index_].value;
      break;
    case Op::MatMul:
      arity(2);
      if (in[0].cols() != in[1].rows()) detail::shape_error(op, in[0], in[1]);
      out = nodes_[in[0].index_].value * nodes_[in[1].index_].value;
      break;
    case Op::Cholesky:
      arity(1);
      if (in[0].rows() != in[0].cols()) detail::shape_error(op, in[0], "square");
      out = cholesky_lower(nodes_[in[0].index_].value);
      break;
    case Op::SolveLower:
    case Op::SolveLowerTransposed: {
      arity(2);
      if (in[0].rows() != in[0].cols()) detail::shape_error(op, in[0], "square");
      if (in[0].cols() != in[1].rows()) detail::shape_error(op, in[0], in[1]);
      const Matrix& l = nodes_[in[0].index_].value;
      const Matrix& b = nodes_[in[1].index_].value;
      out = op == Op::SolveLower ? detail::solve_l(l, b) : detail::solve_lt(l, b);
      break;
    }
    case Op::LogDiagSum: {
      arity(1);
      if (in[0].rows() != in[0].cols()) detail::shape_error(op, in[0], "square");
      const Matrix& x = nodes_[in[0].index_].value;
      double s = 0.0;
      for (Index i = 0; i < x.rows(); ++i) s += std::log(x(i, i));
      out = Matrix::Constant(1, 1, s);
      break;
    }
    case Op::Segment: {
      arity(1);
      const auto length = static_cast<Index>(param);
      if (!in[0].is_vector() || offset < 0 || length < 1 ||
          offset + length > in[0].rows()) {
        std::ostringstream msg;
        msg << "segment: [" << offset << ", " << offset + length
            << ") out of range for length " << in[0].rows();
        throw ShapeError(msg.str());
      }
      out = nodes_[in[0].index_].value.block(offset, 0, length, 1);
      break;
    }
  }

  Node node;
  node.op = op;
  node.lhs = in.empty() ? -1 : in[0].index_;
  node.rhs = in.size() > 1 ? in[1].index_ : -1;
  node.param = param;
  node.offset = offset;
  const Index r = out.rows(), c = out.cols();
  node.value = std::move(out);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1), r, c);
}

inline Gradient Tape::backward(const Var& output) {
  const int k = check(output);
  if (!output.is_scalar())
    throw UsageError("backward: output must be a scalar Var");
  for (Node& n : nodes_) n.adjoint.setZero(n.value.rows(), n.value.cols());
  nodes_[k].adjoint(0, 0) = 1.0;
  for (int i = k; i >= 0; --i) {
    if (nodes_[i].op != Op::Leaf && !nodes_[i].adjoint.isZero(0.0)) propagate(i);
  }
  return Gradient(this);
}

inline void Tape::propagate(std::size_t i) {
  const Node& n = nodes_[i];
  const Matrix& g = n.adjoint;
  const Matrix& y = n.value;
  Node* a = n.lhs >= 0 ? &nodes_[n.lhs] : nullptr;
  Node* b = n.rhs >= 0 ? &nodes_[n.rhs] : nullptr;

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      accumulate(a->adjoint, g);
      accumulate(b->adjoint, g);
      break;
    case Op::Sub:
      accumulate(a->adjoint, g);
      accumulate(b->adjoint, -g);
      break;
    case Op::Mul:
      accumulate(a->adjoint, detail::broadcast(g, b->value, [](double u, double v) { return u * v; }));
      accumulate(b->adjoint, detail::broadcast(g, a->value, [](double u, double v) { return u * v; }));
      break;
    case Op::Div: {
      accumulate(a->adjoint, detail::broadcast(g, b->value, [](double u, double v) { return u / v; }));
      // d(a/b)/db = -(a/b)/b
      const Matrix gy = g.cwiseProduct(y);
      accumulate(b->adjoint, -detail::broadcast(gy, b->value, [](double u, double v) { return u / v; }));
      break;
    }
    case Op::Neg:
      a->adjoint -= g;
      break;
    case Op::Exp:
      a->adjoint += g.cwiseProduct(y);
      break;
    case Op::Log:
      a->adjoint += g.cwiseQuotient(a->value);
      break;
    case Op::Power: {
      const double c = n.param;
      a->adjoint += g.cwiseProduct(
          a->value.unaryExpr([c](double u) { return c * std::pow(u, c - 1.0); }));
      break;
    }
    case Op::Sum:
      a->adjoint.array() += g(0, 0);
      break;
    case Op::Dot:
      a->adjoint += g(0, 0) * b->value;
      b->adjoint += g(0, 0) * a->value;
      break;
    case Op::MatVec:
    case Op::MatMul:
      a->adjoint += g * b->value.transpose();
      b->adjoint += a->value.transpose() * g;
      break;
    case Op::Cholesky: {
      // Symmetric adjoint: S = L^-T Phi(L^T Lbar) L^-1, Abar = (S + S^T)/2,
      // with Phi taking the lower triangle and halving the diagonal.
      Matrix p = y.transpose() * Matrix(g.triangularView<Eigen::Lower>());
      p = Matrix(p.triangularView<Eigen::Lower>());
      p.diagonal() *= 0.5;
      Matrix s = detail::solve_lt(y, p);
      s = detail::solve_lt(y, s.transpose()).transpose();
      a->adjoint += 0.5 * (s + s.transpose());
      break;
    }
    case Op::SolveLower: {
      // X = L^-1 B:  Bbar = L^-T Xbar,  Lbar = -tril(Bbar X^T)
      const Matrix gb = detail::solve_lt(a->value, g);
      b->adjoint += gb;
      a->adjoint -= Matrix((gb * y.transpose()).triangularView<Eigen::Lower>());
      break;
    }
    case Op::SolveLowerTransposed: {
      // X = L^-T B:  Bbar = L^-1 Xbar,  Lbar = -tril(X Bbar^T)
      const Matrix gb = detail::solve_l(a->value, g);
      b->adjoint += gb;
      a->adjoint -= Matrix((y * gb.transpose()).triangularView<Eigen::Lower>());
      break;
    }
    case Op::LogDiagSum:
      for (Index j = 0; j < a->value.rows(); ++j)
        a->adjoint(j, j) += g(0, 0) / a->value(j, j);
      break;
    case Op::Segment:
      a->adjoint.block(n.offset, 0, y.rows(), 1) += g;
      break;
  }
}

// ---- primitive front ends ----

namespace detail {
inline Var lift(const Var& like, double c) { return like.tape()->variable(c); }
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) { return a.tape()->record(Op::Add, {a, b}); }
inline Var operator-(const Var& a, const Var& b) { return a.tape()->record(Op::Sub, {a, b}); }
inline Var operator*(const Var& a, const Var& b) { return a.tape()->record(Op::Mul, {a, b}); }
inline Var operator/(const Var& a, const Var& b) { return a.tape()->record(Op::Div, {a, b}); }
inline Var operator-(const Var& a) { return a.tape()->record(Op::Neg, {a}); }

inline Var operator+(const Var& a, double c) { return a + detail::lift(a, c); }
inline Var operator+(double c, const Var& a) { return detail::lift(a, c) + a; }
inline Var operator-(const Var& a, double c) { return a - detail::lift(a, c); }
inline Var operator-(double c, const Var& a) { return detail::lift(a, c) - a; }
inline Var operator*(const Var& a, double c) { return a * detail::lift(a, c); }
inline Var operator*(double c, const Var& a) { return detail::lift(a, c) * a; }
inline Var operator/(const Var& a, double c) { return a / detail::lift(a, c); }
inline Var operator/(double c, const Var& a) { return detail::lift(a, c) / a; }

inline Var exp(const Var& a) { return a.tape()->record(Op::Exp, {a}); }
inline Var log(const Var& a) { return a.tape()->record(Op::Log, {a}); }
inline Var pow(const Var& a, double c) { return a.tape()->record(Op::Power, {a}, c); }
inline Var sum(const Var& a) { return a.tape()->record(Op::Sum, {a}); }
inline Var dot(const Var& a, const Var& b) { return a.tape()->record(Op::Dot, {a, b}); }
inline Var matvec(const Var& m, const Var& v) { return m.tape()->record(Op::MatVec, {m, v}); }
inline Var matmul(const Var& a, const Var& b) { return a.tape()->record(Op::MatMul, {a, b}); }
inline Var cholesky(const Var& a) { return a.tape()->record(Op::Cholesky, {a}); }
/// Solves L x = b for lower-triangular L.
inline Var solve_lower(const Var& l, const Var& b) { return l.tape()->record(Op::SolveLower, {l, b}); }
/// Solves L^T x = b for lower-triangular L.
inline Var solve_lower_transposed(const Var& l, const Var& b) {
  return l.tape()->record(Op::SolveLowerTransposed, {l, b});
}
inline Var log_diag_sum(const Var& a) { return a.tape()->record(Op::LogDiagSum, {a}); }
inline Var segment(const Var& v, Index offset, Index length) {
  return v.tape()->record(Op::Segment, {v}, static_cast<double>(length), offset);
}

}  // namespace bayeslearn::ad
