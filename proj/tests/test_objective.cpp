#include <cmath>

#include "doctest.h"
#include "protostream/objective.hpp"
#include "protostream/rng.hpp"
#include "test_util.hpp"

using namespace protostream;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> xs) {
  VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

// Random unit-feature episode whose second view is a noisy copy.
Episode random_episode(int T, int dim, std::uint64_t seed, double view_noise = 0.05) {
  Rng rng(seed);
  Episode ep;
  for (int t = 0; t < T; ++t) {
    Frame f;
    f.t = t;
    VectorXd x(dim), n(dim);
    for (int i = 0; i < dim; ++i) {
      x[i] = rng.normal();
      n[i] = view_noise * rng.normal();
    }
    f.features = x;
    f.view2 = x + n;
    ep.push_back(f);
  }
  return ep;
}

ParameterSet linear_params(int in, int out, std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.kind = EncoderKind::linear;
  cfg.input_dim = in;
  cfg.output_dim = out;
  ScalarInits inits;
  inits.beta_init = -1.0;  // dynamic range: both branches occur on random data
  inits.gamma_init = 1.0;
  inits.tau_init = 0.3;
  inits.tau_ratio = 0.1;
  return init_params(cfg, inits, seed);
}

// Independent recipe oracle: the per-frame loop re-built from the public
// primitives, probabilities formed explicitly (no log-space shortcut).
LossBreakdown recipe_oracle(const Episode& ep, const ParameterSet& params,
                            const MemoryConfig& memcfg, const LossConfig& cfg) {
  auto mem = make_memory<double>(memcfg);
  double tau = params.tau();
  double l_self = 0.0, l_ent = 0.0, p_new = 0.0;
  for (const Frame& f : ep) {
    auto z = encode<double>(params, f.features);
    auto e1 = e_step<double>(mem, z, params.beta, params.gamma(), tau);
    if (e1.yhat.size() > 0) l_ent += entropy_loss_term(values_of(e1.yhat));
    p_new += e1.uhat;
    if (e1.uhat >= memcfg.alpha)
      create<double>(mem, z);
    else
      m_step<double>(mem, z, e1.yhat, e1.uhat);
    VectorXd cosines(mem.size());
    for (int k = 0; k < mem.size(); ++k)
      cosines[k] = cosine_similarity<double>(z, mem.protos[static_cast<std::size_t>(k)].mean);
    VectorXd ytilde = pseudo_label(cosines, params.tau_ratio * tau);
    auto z2 = encode<double>(params, f.view2);
    auto e2 = e_step<double>(mem, z2, params.beta, params.gamma(), tau);
    l_self += self_loss_term(ytilde, values_of(e2.yhat));
  }
  double T = static_cast<double>(ep.size());
  LossBreakdown b;
  b.l_self = l_self / T;
  b.l_ent = l_ent / T;
  b.p_new = p_new / T;
  b.l_new = new_cluster_loss(b.p_new, cfg.mu, cfg.clamp_eps);
  b.total = b.l_self + cfg.lambda_ent * b.l_ent + cfg.lambda_new * b.l_new;
  return b;
}

}  // namespace

TEST_CASE("pseudo_label: soft fixture, hard limit, tie rule") {
  VectorXd y = pseudo_label(vec({0.9, 0.8}), 0.01);
  CHECK(y[0] == doctest::Approx(0.99995460213129756561).epsilon(1e-13));
  CHECK(y[1] == doctest::Approx(4.5397868702434394505e-5).epsilon(1e-10));
  CHECK(y.sum() == doctest::Approx(1.0).epsilon(1e-14));

  VectorXd hard = pseudo_label(vec({0.2, 0.7, 0.7}), 0.0);
  CHECK(hard[0] == 0.0);
  CHECK(hard[1] == 1.0);  // lowest tied index
  CHECK(hard[2] == 0.0);

  CHECK_THROWS_AS((void)pseudo_label(VectorXd(0), 0.1), ValidationError);
  CHECK_THROWS_AS((void)pseudo_label(vec({1.0}), -0.1), ValidationError);
}

TEST_CASE("self and entropy loss term fixtures") {
  CHECK(self_loss_term(vec({0.5, 0.5}), vec({0.25, 0.75})) ==
        doctest::Approx(0.83698821678583577314).epsilon(1e-14));
  CHECK(self_loss_term(vec({1.0}), vec({1.0})) == 0.0);
  // Distillation floor: cross-entropy >= entropy of the target.
  CHECK(self_loss_term(vec({0.5, 0.5}), vec({0.5, 0.5})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(entropy_loss_term(vec({0.7, 0.3})) ==
        doctest::Approx(0.61086430205489346303).epsilon(1e-14));
  CHECK(entropy_loss_term(vec({0.0, 1.0})) == 0.0);
}

TEST_CASE("new_cluster_loss fixture and clamp behavior") {
  // mu = 0.5: Beta(2,2); at p = 0.5 the density is 1.5.
  CHECK(new_cluster_loss<double>(0.5, 0.5) ==
        doctest::Approx(-0.40546510810816438198).epsilon(1e-13));
  // Clamped endpoints stay finite.
  CHECK(std::isfinite(new_cluster_loss<double>(0.0, 0.5)));
  CHECK(std::isfinite(new_cluster_loss<double>(1.0, 0.5)));
  CHECK(new_cluster_loss<double>(0.0, 0.5) == new_cluster_loss<double>(1e-4, 0.5));
  CHECK_THROWS_AS((void)new_cluster_loss<double>(0.5, 1.5), ValidationError);

  // Outside the clamp the gradient is exactly zero; inside it matches FD.
  Tape tape;
  Var p_out = tape.parameter(1.2);
  CHECK(tape.gradient(new_cluster_loss(p_out, 0.5))[0] == 0.0);
  Tape t2;
  Var p_in = t2.parameter(0.3);
  VectorXd g = t2.gradient(new_cluster_loss(p_in, 0.6));
  auto eval = [](const VectorXd& x) { return new_cluster_loss<double>(x[0], 0.6); };
  VectorXd fd = testutil::fd_gradient(eval, vec({0.3}));
  CHECK(testutil::rel_err(g[0], fd[0]) < 1e-6);
}

TEST_CASE("single-frame episode: p_new is exactly 1 and l_self is exactly 0") {
  Episode ep = random_episode(1, 3, 5);
  auto params = linear_params(3, 3, 9);
  auto r = episode_loss<double>(ep, params, {}, {});
  CHECK(r.values.p_new == 1.0);  // empty memory forces uhat = 1
  CHECK(r.values.l_self == 0.0);  // one prototype: the softmax is [1]
  CHECK(r.values.l_ent == 0.0);   // no assignment distribution existed yet
  CHECK(r.memory.size() == 1);
}

TEST_CASE("episode totals are the advertised weighted sum and terms are in range") {
  MemoryConfig memcfg;
  memcfg.capacity = 5;
  memcfg.alpha = 0.5;
  LossConfig cfg;
  cfg.lambda_ent = 0.7;
  cfg.lambda_new = 0.4;
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Episode ep = random_episode(12, 4, 100 + trial, 0.2);
    auto params = linear_params(4, 4, 200 + trial);
    auto r = episode_loss<double>(ep, params, memcfg, cfg);
    CHECK(r.values.l_self >= 0.0);
    CHECK(r.values.l_ent >= 0.0);
    CHECK(r.values.p_new >= 0.0);
    CHECK(r.values.p_new <= 1.0);
    CHECK(std::fabs(r.values.total -
                    (r.values.l_self + cfg.lambda_ent * r.values.l_ent +
                     cfg.lambda_new * r.values.l_new)) < 1e-12);
    CHECK(std::isfinite(r.values.total));
  }
  (void)rng;
}

TEST_CASE("episode loss agrees with the independent recipe oracle") {
  MemoryConfig memcfg;
  memcfg.capacity = 4;  // small: exercises eviction
  memcfg.alpha = 0.5;
  LossConfig cfg;
  cfg.lambda_ent = 1.0;
  cfg.lambda_new = 0.5;
  for (int trial = 0; trial < 8; ++trial) {
    Episode ep = random_episode(20, 4, 300 + trial, 0.3);
    auto params = linear_params(4, 4, 400 + trial);
    auto ours = episode_loss<double>(ep, params, memcfg, cfg);
    auto oracle = recipe_oracle(ep, params, memcfg, cfg);
    CHECK(ours.values.l_self == doctest::Approx(oracle.l_self).epsilon(1e-10));
    CHECK(ours.values.l_ent == doctest::Approx(oracle.l_ent).epsilon(1e-10));
    CHECK(ours.values.l_new == doctest::Approx(oracle.l_new).epsilon(1e-10));
    CHECK(ours.values.p_new == doctest::Approx(oracle.p_new).epsilon(1e-12));
    CHECK(ours.values.total == doctest::Approx(oracle.total).epsilon(1e-10));
  }
}

TEST_CASE("tape episode loss equals the double evaluation bit-for-bit") {
  Episode ep = random_episode(10, 3, 17, 0.2);
  auto params = linear_params(3, 3, 23);
  MemoryConfig memcfg;
  memcfg.capacity = 3;
  LossConfig cfg;
  cfg.lambda_ent = 0.5;
  auto rd = episode_loss<double>(ep, params, memcfg, cfg);
  Tape tape;
  auto taped = lift(tape, params);
  auto rv = episode_loss<Var>(ep, taped, memcfg, cfg);
  CHECK(rd.values.total == rv.values.total);
  CHECK(rd.values.l_self == rv.values.l_self);
  CHECK(rd.values.p_new == rv.values.p_new);
}

TEST_CASE("episode gradients match finite differences with the trace frozen") {
  MemoryConfig memcfg;
  memcfg.capacity = 3;
  memcfg.alpha = 0.5;
  for (bool stop_grad : {false, true}) {
    LossConfig cfg;
    cfg.lambda_ent = 0.6;
    cfg.lambda_new = 0.5;
    cfg.stop_prototype_gradient = stop_grad;
    for (int trial = 0; trial < 4; ++trial) {
      Episode ep = random_episode(6, 3, 500 + trial, 0.3);
      auto base = linear_params(3, 3, 600 + trial);
      VectorXd theta = flatten(base);

      Tape tape;
      auto taped = lift(tape, base);
      BranchTrace trace;
      auto rv = episode_loss<Var>(ep, taped, memcfg, cfg, &trace);
      VectorXd g = tape.gradient(rv.total);

      auto eval = [&](const VectorXd& th) {
        auto p = base;
        unflatten(p, th);
        return episode_loss<double>(ep, p, memcfg, cfg, nullptr, &trace).values.total;
      };
      CHECK(eval(theta) == doctest::Approx(value(rv.total)).epsilon(1e-12));
      VectorXd fd = testutil::fd_gradient(eval, theta);
      CHECK(testutil::max_rel_err(g, fd) < 1e-6);
    }
  }
}

TEST_CASE("pseudo-labels are detached: loss depends on them, gradients do not flow") {
  Episode ep = random_episode(6, 3, 71, 0.4);
  auto base = linear_params(3, 3, 72);
  MemoryConfig memcfg;
  memcfg.capacity = 3;
  LossConfig cfg;

  Tape tape;
  auto taped = lift(tape, base);
  BranchTrace trace;
  auto rv = episode_loss<Var>(ep, taped, memcfg, cfg, &trace);
  VectorXd g = tape.gradient(rv.total);

  // (1) The loss genuinely depends on the pseudo-label values.
  BranchTrace bent = trace;
  bool perturbed = false;
  for (auto& f : bent.frames) {
    if (f.pseudo.size() >= 2) {
      double d = 0.2 * std::min(f.pseudo[0], 1.0 - f.pseudo[0]) + 1e-3;
      f.pseudo[0] = std::min(1.0, f.pseudo[0] + d);
      f.pseudo[1] = std::max(0.0, f.pseudo[1] - d);
      perturbed = true;
    }
  }
  REQUIRE(perturbed);
  double with_bent =
      episode_loss<double>(ep, base, memcfg, cfg, nullptr, &bent).values.total;
  CHECK(std::fabs(with_bent - value(rv.total)) > 1e-6);

  // (2) The pseudo-labels themselves move when parameters move...
  auto shifted = base;
  VectorXd th2 = flatten(base);
  th2[0] += 0.05;
  unflatten(shifted, th2);
  BranchTrace trace2;
  (void)episode_loss<double>(ep, shifted, memcfg, cfg, &trace2);
  bool moved = false;
  for (std::size_t t = 0; t < trace.frames.size(); ++t)
    if (trace.frames[t].pseudo.size() == trace2.frames[t].pseudo.size() &&
        trace.frames[t].pseudo != trace2.frames[t].pseudo)
      moved = true;
  CHECK(moved);

  // (3) ...yet the analytic gradient equals FD with pseudo-labels held fixed:
  // the tape treats them as constants, exactly as defined.
  auto eval = [&](const VectorXd& th) {
    auto p = base;
    unflatten(p, th);
    return episode_loss<double>(ep, p, memcfg, cfg, nullptr, &trace).values.total;
  };
  VectorXd fd = testutil::fd_gradient(eval, flatten(base));
  CHECK(testutil::max_rel_err(g, fd) < 1e-6);
}

TEST_CASE("stop-prototype-gradient changes gradients, not values") {
  Episode ep = random_episode(8, 3, 81, 0.3);
  auto base = linear_params(3, 3, 82);
  MemoryConfig memcfg;
  memcfg.capacity = 4;
  LossConfig full_cfg, stop_cfg;
  stop_cfg.stop_prototype_gradient = true;

  Tape t1;
  auto r_full = episode_loss<Var>(ep, lift(t1, base), memcfg, full_cfg);
  Tape t2;
  auto r_stop = episode_loss<Var>(ep, lift(t2, base), memcfg, stop_cfg);
  CHECK(r_full.values.total == r_stop.values.total);  // identical forward values

  VectorXd g_full = t1.gradient(r_full.total);
  VectorXd g_stop = t2.gradient(r_stop.total);
  CHECK((g_full - g_stop).norm() > 1e-8);  // the recursion path carries gradient
}

TEST_CASE("episode loss input validation") {
  auto params = linear_params(3, 3, 1);
  CHECK_THROWS_AS((void)episode_loss<double>(Episode{}, params, {}, {}), ValidationError);
  Episode ep = random_episode(2, 3, 2);
  ep[1].view2.resize(0);
  CHECK_THROWS_AS((void)episode_loss<double>(ep, params, {}, {}), ValidationError);
}
