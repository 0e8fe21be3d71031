#include <Eigen/Core>
#include <cmath>

#include "doctest.h"
#include "protostream/rng.hpp"
#include "protostream/tape.hpp"
#include "protostream/vec_ops.hpp"
#include "test_util.hpp"

using namespace protostream;
using Eigen::VectorXd;
using testutil::fd_gradient;
using testutil::max_rel_err;

namespace {

VectorXd vec(std::initializer_list<double> xs) {
  VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

VecX<Var> lift_params(Tape& tape, const VectorXd& x) {
  VecX<Var> v(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) v[i] = tape.parameter(x[i]);
  return v;
}

}  // namespace

TEST_CASE("cosine similarity matches the frozen fixture and limits") {
  // [1,2]x[3,4]: 11 / (sqrt(5) * 5), computed to 20 digits.
  CHECK(cosine_similarity<double>(vec({1, 2}), vec({3, 4})) ==
        doctest::Approx(0.98386991009990746642).epsilon(1e-14));
  CHECK(cosine_similarity<double>(vec({1, 0}), vec({0, 2})) == doctest::Approx(0.0));
  CHECK(cosine_similarity<double>(vec({1, 1}), vec({-2, -2})) ==
        doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(cosine_similarity<double>(vec({3, 0}), vec({7, 0})) ==
        doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS((void)cosine_similarity<double>(vec({0, 0}), vec({1, 2})), NumericalError);
  CHECK_THROWS_AS((void)cosine_similarity<double>(vec({1, 2}), vec({1, 2, 3})), ValidationError);
}

TEST_CASE("cosine similarity is bounded and scale invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 1 + rng.index(6);
    VectorXd a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    if (a.norm() == 0.0 || b.norm() == 0.0) continue;
    double c = cosine_similarity<double>(a, b);
    CHECK(c <= 1.0 + 1e-12);
    CHECK(c >= -1.0 - 1e-12);
    double s = 0.1 + 5.0 * rng.uniform();
    CHECK(cosine_similarity<double>(VectorXd(s * a), b) == doctest::Approx(c).epsilon(1e-12));
  }
}

TEST_CASE("softmax matches the frozen fixture") {
  VectorXd y = softmax<double>(vec({9, 1, -5}));
  CHECK(y[0] == doctest::Approx(0.99966381889911817777).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(3.353498517069588633e-4).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(8.3124917486336479509e-7).epsilon(1e-12));
  CHECK(y.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS((void)softmax<double>(VectorXd(0)), ValidationError);
}

TEST_CASE("softmax properties: normalization, shift invariance, extreme inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 1 + rng.index(7);
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = 200.0 * (rng.uniform() - 0.5);
    VectorXd y = softmax<double>(v);
    CHECK(std::fabs(y.sum() - 1.0) < 1e-12);
    for (int i = 0; i < n; ++i) {
      CHECK(y[i] >= 0.0);
      CHECK(std::isfinite(y[i]));
    }
    VectorXd shifted = softmax<double>(VectorXd(v.array() + 123.456));
    for (int i = 0; i < n; ++i) CHECK(shifted[i] == doctest::Approx(y[i]).epsilon(1e-12));
  }
  // Would overflow a naive exp; max subtraction keeps it finite.
  VectorXd big = softmax<double>(vec({1000, 999}));
  CHECK(std::isfinite(big[0]));
  CHECK(big.sum() == doctest::Approx(1.0));
}

TEST_CASE("logsumexp matches the fixture and dominates the max") {
  CHECK(logsumexp<double>(vec({9, 1, -5})) ==
        doctest::Approx(9.00033623762241612).epsilon(1e-14));
  CHECK(logsumexp<double>(vec({42})) == doctest::Approx(42.0));
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 1 + rng.index(7);
    VecX<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = 2000.0 * (rng.uniform() - 0.5);
    double l = logsumexp<double>(v);
    double m = vmax(v);
    CHECK(l >= m);
    CHECK(l <= m + std::log(static_cast<double>(n)) + 1e-12);
  }
}

TEST_CASE("sigmoid fixture, symmetry, saturation") {
  CHECK(sigmoid(3.0) == doctest::Approx(0.95257412682243321912).epsilon(1e-14));
  CHECK(sigmoid(0.0) == doctest::Approx(0.5));
  CHECK(sigmoid(-22.0) == doctest::Approx(2.7894680920908115838e-10).epsilon(1e-12));
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    double x = 2000.0 * (rng.uniform() - 0.5);
    double s = sigmoid(x);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(std::isfinite(s));
    CHECK(sigmoid(-x) == doctest::Approx(1.0 - s).epsilon(1e-12));
  }
}

TEST_CASE("softplus is positive, monotone, and inverts") {
  CHECK(softplus(softplus_inv(1.0)) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(softplus(softplus_inv(0.1)) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(softplus_inv(1.0) == doctest::Approx(0.54132485461291810898).epsilon(1e-14));
  CHECK(softplus(1000.0) == doctest::Approx(1000.0));
  CHECK(softplus(-745.0) >= 0.0);
  CHECK_THROWS_AS((void)softplus_inv(0.0), ValidationError);
}

TEST_CASE("gradients of simple expressions are exact") {
  Tape tape;
  Var x = tape.parameter(3.0);
  Var y = tape.parameter(7.0);  // never used: gradient must be zero
  Var loss = x * x;
  VectorXd g = tape.gradient(loss);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(g[1] == 0.0);
  (void)y;

  Tape t2;
  Var a = t2.parameter(2.0);
  VectorXd g2 = t2.gradient(a);
  CHECK(g2[0] == 1.0);
}

TEST_CASE("gradient rejects losses that are not on the tape") {
  Tape tape;
  (void)tape.parameter(1.0);
  Var constant(4.0);
  CHECK_THROWS_AS((void)tape.gradient(constant), ValidationError);

  Tape other;
  Var p = other.parameter(1.0);
  CHECK_THROWS_AS((void)tape.gradient(p), ValidationError);
  CHECK_THROWS_AS((void)(tape.parameter(1.0) + other.parameter(2.0)), std::logic_error);
}

TEST_CASE("gradient guards non-finite adjoints") {
  Tape tape;
  Var p = tape.parameter(800.0);
  Var loss = exp(p);  // value and partial overflow to inf
  CHECK_THROWS_AS((void)tape.gradient(loss), NumericalError);
}

TEST_CASE("random scalar composites match central finite differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    VectorXd x(6);
    for (int i = 0; i < 6; ++i) x[i] = 2.0 * (rng.uniform() - 0.5);
    auto eval = [](const VectorXd& p) {
      double a = std::tanh(p[0] * p[1] + p[2]);
      double b = protostream::softplus(p[3] - p[4]);
      double c = protostream::sigmoid(p[5] * a);
      return a * b + c * c + std::exp(0.3 * p[2]) + protostream::relu(p[1] - 0.1);
    };
    Tape tape;
    VecX<Var> p = lift_params(tape, x);
    Var a = tanh(p[0] * p[1] + p[2]);
    Var b = softplus(p[3] - p[4]);
    Var c = sigmoid(p[5] * a);
    Var loss = a * b + c * c + exp(0.3 * p[2]) + relu(p[1] - 0.1);
    CHECK(loss.value() == doctest::Approx(eval(x)).epsilon(1e-12));
    VectorXd g = tape.gradient(loss);
    VectorXd fd = fd_gradient(eval, x);
    CHECK(max_rel_err(g, fd) < 1e-6);
  }
}

TEST_CASE("vector op gradients match finite differences") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    int n = 2 + rng.index(5);
    VectorXd x(2 * n);
    for (int i = 0; i < 2 * n; ++i) x[i] = rng.normal();
    if (x.head(n).norm() < 0.3 || x.tail(n).norm() < 0.3) continue;

    // loss = cos(a,b) + logsumexp(a) + sum(softmax(b) .* a) + norm(a)
    auto eval = [n](const VectorXd& p) {
      VecX<double> a = p.head(n), b = p.tail(n);
      VecX<double> sb = softmax<double>(b);
      double acc = cosine_similarity<double>(a, b) + logsumexp<double>(a) + norm<double>(a);
      for (int i = 0; i < n; ++i) acc += sb[i] * a[i];
      return acc;
    };
    Tape tape;
    VecX<Var> p = lift_params(tape, x);
    VecX<Var> a = p.head(n), b = p.tail(n);
    VecX<Var> sb = softmax<Var>(b);
    Var loss = cosine_similarity<Var>(a, b) + logsumexp<Var>(a) + norm<Var>(a);
    for (int i = 0; i < n; ++i) loss += sb[i] * a[i];
    CHECK(loss.value() == doctest::Approx(eval(x)).epsilon(1e-10));
    VectorXd g = tape.gradient(loss);
    VectorXd fd = fd_gradient(eval, x);
    CHECK(max_rel_err(g, fd) < 1e-6);
  }
}

TEST_CASE("max and min route subgradients to the lowest tied index") {
  Tape tape;
  VecX<Var> v(3);
  v[0] = tape.parameter(2.0);
  v[1] = tape.parameter(2.0);
  v[2] = tape.parameter(-1.0);
  VectorXd g = tape.gradient(vmax(v));
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);

  Tape t2;
  VecX<Var> w(3);
  w[0] = t2.parameter(5.0);
  w[1] = t2.parameter(-3.0);
  w[2] = t2.parameter(-3.0);
  VectorXd gm = t2.gradient(vmin(w));
  CHECK(gm[0] == 0.0);
  CHECK(gm[1] == 1.0);
  CHECK(gm[2] == 0.0);
}

TEST_CASE("relu and clamp subgradients") {
  Tape tape;
  Var a = tape.parameter(0.0);
  VectorXd g = tape.gradient(relu(a));
  CHECK(g[0] == 0.0);  // left subgradient at the kink

  Tape t2;
  Var inside = t2.parameter(0.5);
  CHECK(t2.gradient(clamp(inside, 0.0, 1.0))[0] == 1.0);
  Tape t3;
  Var outside = t3.parameter(1.5);
  Var c = clamp(outside, 0.0, 1.0);
  CHECK(c.value() == 0.5 + 0.5);
  CHECK(t3.gradient(c)[0] == 0.0);
}

TEST_CASE("constant folding keeps the tape small") {
  Tape tape;
  Var p = tape.parameter(2.0);
  std::size_t before = tape.node_count();
  Var c = Var(3.0) * Var(4.0) + Var(1.0);  // pure constants: no nodes
  CHECK(tape.node_count() == before);
  Var r = p * c;
  CHECK(r.value() == doctest::Approx(26.0));
  CHECK(tape.node_count() == before + 1);
  CHECK(tape.gradient(r)[0] == doctest::Approx(13.0));
}

TEST_CASE("entropy helper") {
  CHECK(entropy(vec({0.7, 0.3})) == doctest::Approx(0.61086430205489346303).epsilon(1e-14));
  CHECK(entropy(vec({1.0, 0.0})) == 0.0);  // 0 log 0 := 0
  CHECK_THROWS_AS((void)entropy(vec({-0.1, 1.1})), ValidationError);
}

TEST_CASE("rng is deterministic and splits into independent streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(derive_seed(42, 0) != derive_seed(42, 1));
  CHECK(derive_seed(42, 7) == derive_seed(42, 7));

  // Uniform moments sanity.
  Rng r(3);
  double mean = 0.0, m2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean += u / n;
    m2 += u * u / n;
  }
  CHECK(mean == doctest::Approx(0.5).epsilon(0.02));
  CHECK(m2 - mean * mean == doctest::Approx(1.0 / 12.0).epsilon(0.05));

  // Normal moments sanity.
  Rng g(4);
  double gm = 0.0, gv = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = g.normal();
    gm += z / n;
    gv += z * z / n;
  }
  CHECK(gm == doctest::Approx(0.0).epsilon(0.05));
  CHECK(gv == doctest::Approx(1.0).epsilon(0.05));
}
