#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "protostream/errors.hpp"

namespace protostream {

class Tape;

// Scalar for reverse-mode differentiation. A Var carries its value inline; it
// is either a plain constant (tape == nullptr, no node) or points at a node on
// a Tape. Arithmetic between two constants folds immediately, so Eigen
// temporaries and literals never grow the tape.
struct Var {
  double v = 0.0;
  Tape* tape = nullptr;
  std::int32_t idx = -1;

  Var() = default;
  Var(double value) : v(value) {}  // NOLINT: implicit constant lift is the point

  double value() const { return v; }
  bool on_tape() const { return tape != nullptr; }
};

// Arena of nodes in evaluation order. Each node stores edges to its parents
// with the local partial derivative; gradient() runs one reverse sweep.
// Tapes are plain values: independent, movable, and never shared between
// threads while being written.
class Tape {
 public:
  // Leaf registered as a differentiation root. gradient() reports roots in
  // registration order; roots never reached by the loss get zero.
  Var parameter(double value) {
    Var r(value);
    r.tape = this;
    r.idx = push_node0();
    param_nodes_.push_back(r.idx);
    return r;
  }

  std::size_t node_count() const { return edge_begin_.size() - 1; }
  std::size_t parameter_count() const { return param_nodes_.size(); }

  // d loss / d parameter for every registered parameter, in registration
  // order. The loss must live on this tape; non-finite adjoints abort.
  Eigen::VectorXd gradient(const Var& loss) const;

  // Drops all nodes and registered parameters but keeps capacity.
  void reset() {
    edge_begin_.assign(1, 0);
    parent_.clear();
    partial_.clear();
    param_nodes_.clear();
  }

  Tape() { edge_begin_.push_back(0); }

  // --- node builders (used by the operator overloads below) ---

  std::int32_t push_node0() {
    edge_begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return static_cast<std::int32_t>(edge_begin_.size() - 2);
  }

  std::int32_t push_node1(std::int32_t p0, double d0) {
    parent_.push_back(p0);
    partial_.push_back(d0);
    edge_begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return static_cast<std::int32_t>(edge_begin_.size() - 2);
  }

  // Edges are added only for operands that are actually on the tape.
  std::int32_t push_node2(const Var& a, double da, const Var& b, double db) {
    if (a.on_tape()) {
      parent_.push_back(a.idx);
      partial_.push_back(da);
    }
    if (b.on_tape()) {
      parent_.push_back(b.idx);
      partial_.push_back(db);
    }
    edge_begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return static_cast<std::int32_t>(edge_begin_.size() - 2);
  }

 private:
  std::vector<std::uint32_t> edge_begin_;  // per node: prefix into parent_/partial_
  std::vector<std::int32_t> parent_;
  std::vector<double> partial_;
  std::vector<std::int32_t> param_nodes_;
};

inline Tape* join_tapes(const Var& a, const Var& b) {
  if (a.tape && b.tape && a.tape != b.tape)
    throw std::logic_error("operands live on different tapes");
  return a.tape ? a.tape : b.tape;
}

inline Var unary_node(const Var& x, double value, double partial) {
  Var r(value);
  if (x.on_tape()) {
    r.tape = x.tape;
    r.idx = x.tape->push_node1(x.idx, partial);
  }
  return r;
}

inline Var binary_node(const Var& a, const Var& b, double value, double da, double db) {
  Var r(value);
  if (Tape* t = join_tapes(a, b)) {
    r.tape = t;
    r.idx = t->push_node2(a, da, b, db);
  }
  return r;
}

// --- arithmetic ---

inline Var operator+(const Var& a, const Var& b) { return binary_node(a, b, a.v + b.v, 1.0, 1.0); }
inline Var operator-(const Var& a, const Var& b) { return binary_node(a, b, a.v - b.v, 1.0, -1.0); }
inline Var operator*(const Var& a, const Var& b) { return binary_node(a, b, a.v * b.v, b.v, a.v); }
inline Var operator/(const Var& a, const Var& b) {
  if (b.v == 0.0) throw NumericalError("division by zero");
  return binary_node(a, b, a.v / b.v, 1.0 / b.v, -a.v / (b.v * b.v));
}
inline Var operator-(const Var& x) { return unary_node(x, -x.v, -1.0); }
inline Var operator+(const Var& x) { return x; }

inline Var operator+(const Var& a, double b) { return unary_node(a, a.v + b, 1.0); }
inline Var operator+(double a, const Var& b) { return unary_node(b, a + b.v, 1.0); }
inline Var operator-(const Var& a, double b) { return unary_node(a, a.v - b, 1.0); }
inline Var operator-(double a, const Var& b) { return unary_node(b, a - b.v, -1.0); }
inline Var operator*(const Var& a, double b) { return unary_node(a, a.v * b, b); }
inline Var operator*(double a, const Var& b) { return unary_node(b, a * b.v, a); }
inline Var operator/(const Var& a, double b) {
  if (b == 0.0) throw NumericalError("division by zero");
  return unary_node(a, a.v / b, 1.0 / b);
}
inline Var operator/(double a, const Var& b) {
  if (b.v == 0.0) throw NumericalError("division by zero");
  return unary_node(b, a / b.v, -a / (b.v * b.v));
}

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }
inline Var& operator+=(Var& a, double b) { return a = a + b; }
inline Var& operator-=(Var& a, double b) { return a = a - b; }
inline Var& operator*=(Var& a, double b) { return a = a * b; }
inline Var& operator/=(Var& a, double b) { return a = a / b; }

// Value comparisons (needed by generic code and Eigen internals).
inline bool operator<(const Var& a, const Var& b) { return a.v < b.v; }
inline bool operator>(const Var& a, const Var& b) { return a.v > b.v; }
inline bool operator<=(const Var& a, const Var& b) { return a.v <= b.v; }
inline bool operator>=(const Var& a, const Var& b) { return a.v >= b.v; }
inline bool operator==(const Var& a, const Var& b) { return a.v == b.v; }
inline bool operator!=(const Var& a, const Var& b) { return a.v != b.v; }

// --- elementary functions ---

inline Var exp(const Var& x) {
  double e = std::exp(x.v);
  return unary_node(x, e, e);
}

inline Var log(const Var& x) {
  if (x.v <= 0.0) throw NumericalError("log of non-positive value");
  return unary_node(x, std::log(x.v), 1.0 / x.v);
}

inline Var sqrt(const Var& x) {
  if (x.v < 0.0) throw NumericalError("sqrt of negative value");
  double s = std::sqrt(x.v);
  return unary_node(x, s, 0.5 / (s == 0.0 ? 1e-300 : s));
}

inline Var tanh(const Var& x) {
  double t = std::tanh(x.v);
  return unary_node(x, t, 1.0 - t * t);
}

inline Var relu(const Var& x) {
  // Subgradient at 0 is taken from the left (zero).
  return unary_node(x, x.v > 0.0 ? x.v : 0.0, x.v > 0.0 ? 1.0 : 0.0);
}

inline Var abs(const Var& x) {
  return unary_node(x, std::fabs(x.v), x.v > 0.0 ? 1.0 : (x.v < 0.0 ? -1.0 : 0.0));
}

// Pass-through gradient inside [lo, hi] (boundary included), zero outside.
inline Var clamp(const Var& x, double lo, double hi) {
  double cv = x.v < lo ? lo : (x.v > hi ? hi : x.v);
  return unary_node(x, cv, (x.v < lo || x.v > hi) ? 0.0 : 1.0);
}

// Ties route the gradient to the first argument.
inline Var max(const Var& a, const Var& b) {
  return a.v >= b.v ? unary_node(a, a.v, 1.0) : unary_node(b, b.v, 1.0);
}
inline Var min(const Var& a, const Var& b) {
  return a.v <= b.v ? unary_node(a, a.v, 1.0) : unary_node(b, b.v, 1.0);
}

inline double value(double x) { return x; }
inline double value(const Var& x) { return x.v; }

// Detached copy: same value, no tape history.
inline double detached(double x) { return x; }
inline Var detached(const Var& x) { return Var(x.v); }

}  // namespace protostream

namespace Eigen {
template <>
struct NumTraits<protostream::Var> {
  using Real = protostream::Var;
  using NonInteger = protostream::Var;
  using Nested = protostream::Var;
  using Literal = double;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 3,
    MulCost = 3,
  };
  static inline Real epsilon() { return Real(NumTraits<double>::epsilon()); }
  static inline Real dummy_precision() { return Real(NumTraits<double>::dummy_precision()); }
  static inline Real highest() { return Real(NumTraits<double>::highest()); }
  static inline Real lowest() { return Real(NumTraits<double>::lowest()); }
  static inline int digits10() { return NumTraits<double>::digits10(); }
};
}  // namespace Eigen
