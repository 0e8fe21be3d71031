#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "protostream/errors.hpp"
#include "protostream/tape.hpp"

// Free functions over dense vectors templated on the scalar S in
// {double, Var}. Reductions are written as plain sequential loops so both
// instantiations execute the identical operation order and agree bit-for-bit.

namespace protostream {

template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// double counterparts of the Var functions, same formulas and domain checks.
inline double exp(double x) { return std::exp(x); }
inline double log(double x) {
  if (x <= 0.0) throw NumericalError("log of non-positive value");
  return std::log(x);
}
inline double sqrt(double x) {
  if (x < 0.0) throw NumericalError("sqrt of negative value");
  return std::sqrt(x);
}
inline double tanh(double x) { return std::tanh(x); }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double abs(double x) { return std::fabs(x); }
inline double clamp(double x, double lo, double hi) { return x < lo ? lo : (x > hi ? hi : x); }
inline double max(double a, double b) { return a >= b ? a : b; }
inline double min(double a, double b) { return a <= b ? a : b; }

// Numerically stable logistic; never exponentiates a positive argument.
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
inline Var sigmoid(const Var& x) {
  double s = sigmoid(x.v);
  return unary_node(x, s, s * (1.0 - s));
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline Var softplus(const Var& x) { return unary_node(x, softplus(x.v), sigmoid(x.v)); }

// Inverse of softplus; softplus(softplus_inv(y)) == y for y > 0.
inline double softplus_inv(double y) {
  if (y <= 0.0) throw ValidationError("softplus_inv requires a positive value");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

// --- vector helpers ---

inline void check_same_size(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": size mismatch");
}

template <class S>
S dot(const VecX<S>& a, const VecX<S>& b) {
  check_same_size(a.size(), b.size(), "dot");
  S acc = S(0.0);
  for (Eigen::Index i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class S>
S squared_norm(const VecX<S>& a) {
  S acc = S(0.0);
  for (Eigen::Index i = 0; i < a.size(); ++i) acc += a[i] * a[i];
  return acc;
}

template <class S>
S norm(const VecX<S>& a) {
  return sqrt(squared_norm(a));
}

template <class S>
VecX<S> normalized(const VecX<S>& a, const char* zero_msg = "cannot normalize zero-norm vector") {
  S n = norm(a);
  if (value(n) == 0.0) throw NumericalError(zero_msg);
  VecX<S> r(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) r[i] = a[i] / n;
  return r;
}

template <class S>
S cosine_similarity(const VecX<S>& a, const VecX<S>& b) {
  check_same_size(a.size(), b.size(), "cosine_similarity");
  S qa = squared_norm(a);
  S qb = squared_norm(b);
  if (value(qa) == 0.0 || value(qb) == 0.0)
    throw NumericalError("cosine_similarity: degenerate zero-norm vector");
  return dot(a, b) / sqrt(qa * qb);
}

// Lowest index wins ties.
template <class S>
int argmax_index(const VecX<S>& v) {
  if (v.size() == 0) throw ValidationError("argmax of empty vector");
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (value(v[i]) > value(v[best])) best = static_cast<int>(i);
  return best;
}

template <class S>
int argmin_index(const VecX<S>& v) {
  if (v.size() == 0) throw ValidationError("argmin of empty vector");
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (value(v[i]) < value(v[best])) best = static_cast<int>(i);
  return best;
}

// Returning the winning element itself routes the gradient entirely to it,
// which is the subgradient choice (lowest index on ties).
template <class S>
S vmax(const VecX<S>& v, int* arg = nullptr) {
  int i = argmax_index(v);
  if (arg) *arg = i;
  return v[i];
}

template <class S>
S vmin(const VecX<S>& v, int* arg = nullptr) {
  int i = argmin_index(v);
  if (arg) *arg = i;
  return v[i];
}

template <class S>
S sum(const VecX<S>& v) {
  S acc = S(0.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += v[i];
  return acc;
}

// Max-subtracted softmax.
template <class S>
VecX<S> softmax(const VecX<S>& v) {
  if (v.size() == 0) throw ValidationError("softmax of empty vector");
  S m = vmax(v);
  VecX<S> e(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) e[i] = exp(v[i] - m);
  S s = sum(e);
  VecX<S> r(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) r[i] = e[i] / s;
  return r;
}

// Max-subtracted log-sum-exp; >= max(v) always.
template <class S>
S logsumexp(const VecX<S>& v) {
  if (v.size() == 0) throw ValidationError("logsumexp of empty vector");
  S m = vmax(v);
  S s = S(0.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) s += exp(v[i] - m);
  return m + log(s);
}

// log(softmax(v)) without forming probabilities; immune to exp underflow.
template <class S>
VecX<S> log_softmax(const VecX<S>& v) {
  if (v.size() == 0) throw ValidationError("log_softmax of empty vector");
  S lse = logsumexp(v);
  VecX<S> r(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) r[i] = v[i] - lse;
  return r;
}

// b + W x for plain double inputs x and scalar-S weights.
template <class S>
VecX<S> affine(const MatX<S>& w, const VecX<S>& b, const Eigen::VectorXd& x) {
  if (w.cols() != x.size() || w.rows() != b.size())
    throw ValidationError("affine: shape mismatch");
  VecX<S> r(w.rows());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    S acc = b[i];
    for (Eigen::Index j = 0; j < w.cols(); ++j) acc += w(i, j) * x[j];
    r[i] = acc;
  }
  return r;
}

template <class S>
Eigen::VectorXd values_of(const VecX<S>& v) {
  Eigen::VectorXd r(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) r[i] = value(v[i]);
  return r;
}

template <class S>
Eigen::MatrixXd values_of_matrix(const MatX<S>& m) {
  Eigen::MatrixXd r(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r(i, j) = value(m(i, j));
  return r;
}

// Lift a plain vector into scalar-S constants (no tape history).
template <class S>
VecX<S> constant_vec(const Eigen::VectorXd& x) {
  VecX<S> r(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) r[i] = S(x[i]);
  return r;
}

// Shannon entropy of a distribution in nats, with 0 log 0 := 0.
inline double entropy(const Eigen::VectorXd& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0) throw ValidationError("entropy: negative probability");
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  }
  return h;
}

inline void check_finite(const Eigen::VectorXd& v, const char* what) {
  if (!v.allFinite()) throw ValidationError(std::string(what) + ": non-finite entry");
}

}  // namespace protostream
