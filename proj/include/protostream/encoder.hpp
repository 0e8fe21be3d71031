#pragma once

#include <string>

#include "protostream/rng.hpp"
#include "protostream/tape.hpp"
#include "protostream/vec_ops.hpp"

// Embedding encoders (identity / linear / one-hidden-layer mlp) with
// L2-normalized outputs, plus the learnable scalar head parameters. gamma and
// tau live behind a softplus reparameterization so the optimizer can walk the
// raw values freely while the effective values stay positive.

namespace protostream {

enum class EncoderKind { identity, linear, mlp };
enum class Activation { tanh, relu };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::identity;
  int input_dim = 0;
  int output_dim = 0;
  int hidden_dim = 0;  // mlp only
  Activation activation = Activation::tanh;
};

inline void validate_encoder(const EncoderConfig& c) {
  if (c.input_dim <= 0 || c.output_dim <= 0)
    throw ValidationError("encoder: input_dim and output_dim must be positive");
  if (c.kind == EncoderKind::identity && c.input_dim != c.output_dim)
    throw ValidationError("identity encoder requires input_dim == output_dim");
  if (c.kind == EncoderKind::mlp && c.hidden_dim <= 0)
    throw ValidationError("mlp encoder requires a positive hidden_dim");
}

struct ScalarInits {
  double beta_init = -12.0;
  double gamma_init = 1.0;
  double tau_init = 0.1;
  double tau_ratio = 0.1;  // pseudo-label temperature as a fraction of tau
};

template <class S>
struct Params {
  EncoderConfig enc;
  MatX<S> w1;
  VecX<S> b1;
  MatX<S> w2;
  VecX<S> b2;
  S beta{}, gamma_raw{}, tau_raw{};
  double tau_ratio = 0.0;  // fixed, not learned

  S gamma() const { return softplus(gamma_raw); }
  S tau() const { return softplus(tau_raw); }
};

using ParameterSet = Params<double>;

inline int param_count(const EncoderConfig& c) {
  int n = 3;  // beta, gamma_raw, tau_raw
  if (c.kind == EncoderKind::linear) n += c.output_dim * (c.input_dim + 1);
  if (c.kind == EncoderKind::mlp)
    n += c.hidden_dim * (c.input_dim + 1) + c.output_dim * (c.hidden_dim + 1);
  return n;
}

// Weights are drawn uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) row by row from
// the seeded stream; biases start at zero. The draw order (w1 rows, then w2
// rows) is part of the determinism contract.
inline ParameterSet init_params(const EncoderConfig& cfg, const ScalarInits& inits,
                                std::uint64_t seed) {
  validate_encoder(cfg);
  ParameterSet p;
  p.enc = cfg;
  Rng rng(derive_seed(seed, 0xEC));
  auto fill = [&rng](Eigen::MatrixXd& w, int rows, int cols) {
    double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    w.resize(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) w(i, j) = rng.uniform(-bound, bound);
  };
  if (cfg.kind == EncoderKind::linear) {
    fill(p.w1, cfg.output_dim, cfg.input_dim);
    p.b1 = Eigen::VectorXd::Zero(cfg.output_dim);
  } else if (cfg.kind == EncoderKind::mlp) {
    fill(p.w1, cfg.hidden_dim, cfg.input_dim);
    p.b1 = Eigen::VectorXd::Zero(cfg.hidden_dim);
    fill(p.w2, cfg.output_dim, cfg.hidden_dim);
    p.b2 = Eigen::VectorXd::Zero(cfg.output_dim);
  }
  p.beta = inits.beta_init;
  p.gamma_raw = softplus_inv(inits.gamma_init);
  p.tau_raw = softplus_inv(inits.tau_init);
  p.tau_ratio = inits.tau_ratio;
  return p;
}

template <class S>
VecX<S> apply_activation(Activation act, const VecX<S>& h) {
  VecX<S> r(h.size());
  for (Eigen::Index i = 0; i < h.size(); ++i)
    r[i] = act == Activation::tanh ? tanh(h[i]) : relu(h[i]);
  return r;
}

// Generic affine for scalar-S inputs (mlp second layer).
template <class S>
VecX<S> affine_s(const MatX<S>& w, const VecX<S>& b, const VecX<S>& x) {
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
VecX<S> encode(const Params<S>& p, const Eigen::VectorXd& x) {
  if (x.size() != p.enc.input_dim) throw ValidationError("encode: input dimension mismatch");
  check_finite(x, "encode input");
  const char* collapse = "encode: embedding collapsed to zero norm";
  switch (p.enc.kind) {
    case EncoderKind::identity:
      return normalized(constant_vec<S>(x), collapse);
    case EncoderKind::linear:
      return normalized(affine(p.w1, p.b1, x), collapse);
    case EncoderKind::mlp: {
      VecX<S> h = apply_activation(p.enc.activation, affine(p.w1, p.b1, x));
      return normalized(affine_s(p.w2, p.b2, h), collapse);
    }
  }
  throw ValidationError("encode: unknown encoder kind");
}

// Flat layout: w1 row-major, b1, w2 row-major, b2, beta, gamma_raw, tau_raw.
// lift() registers tape parameters in this exact order, so Tape::gradient()
// aligns with the optimizer's flat view.
inline Eigen::VectorXd flatten(const ParameterSet& p) {
  Eigen::VectorXd f(param_count(p.enc));
  Eigen::Index at = 0;
  auto put_mat = [&](const Eigen::MatrixXd& w) {
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) f[at++] = w(i, j);
  };
  auto put_vec = [&](const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) f[at++] = v[i];
  };
  put_mat(p.w1);
  put_vec(p.b1);
  put_mat(p.w2);
  put_vec(p.b2);
  f[at++] = p.beta;
  f[at++] = p.gamma_raw;
  f[at++] = p.tau_raw;
  return f;
}

inline void unflatten(ParameterSet& p, const Eigen::VectorXd& f) {
  if (f.size() != param_count(p.enc)) throw ValidationError("unflatten: size mismatch");
  Eigen::Index at = 0;
  auto get_mat = [&](Eigen::MatrixXd& w) {
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = f[at++];
  };
  auto get_vec = [&](Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f[at++];
  };
  get_mat(p.w1);
  get_vec(p.b1);
  get_mat(p.w2);
  get_vec(p.b2);
  p.beta = f[at++];
  p.gamma_raw = f[at++];
  p.tau_raw = f[at++];
}

// Put every parameter on the tape as a differentiation root, flatten-ordered.
inline Params<Var> lift(Tape& tape, const ParameterSet& p) {
  Params<Var> r;
  r.enc = p.enc;
  r.tau_ratio = p.tau_ratio;
  auto lift_mat = [&](const Eigen::MatrixXd& w, MatX<Var>& out) {
    out.resize(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) out(i, j) = tape.parameter(w(i, j));
  };
  auto lift_vec = [&](const Eigen::VectorXd& v, VecX<Var>& out) {
    out.resize(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = tape.parameter(v[i]);
  };
  lift_mat(p.w1, r.w1);
  lift_vec(p.b1, r.b1);
  lift_mat(p.w2, r.w2);
  lift_vec(p.b2, r.b2);
  r.beta = tape.parameter(p.beta);
  r.gamma_raw = tape.parameter(p.gamma_raw);
  r.tau_raw = tape.parameter(p.tau_raw);
  return r;
}

}  // namespace protostream
