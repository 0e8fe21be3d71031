#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "protostream/encoder.hpp"
#include "protostream/episode.hpp"
#include "protostream/memory.hpp"

// The streaming objective: per frame, an E-step on the first view scores
// entropy and the new-cluster probability, the memory branches
// (create vs soft assign), a detached pseudo-label is read from the updated
// memory, and the second view is distilled toward it. Episode totals:
//   total = l_self + lambda_ent * l_ent + lambda_new * l_new
// where l_new is a Beta(4*mu, 4-4*mu) negative log-density of the mean
// new-cluster probability.

namespace protostream {

struct LossConfig {
  double lambda_ent = 0.0;
  double lambda_new = 0.5;
  double mu = 0.5;          // Beta prior mean
  double clamp_eps = 1e-4;  // p_new is clamped to [eps, 1-eps]
  bool stop_prototype_gradient = false;
};

// Pseudo-label over current prototypes: softmax of cosines at temperature
// tau_tilde; tau_tilde == 0 degenerates to a one-hot argmax (lowest index
// wins ties). Always detached from the tape by construction (plain doubles).
inline Eigen::VectorXd pseudo_label(const Eigen::VectorXd& cosines, double tau_tilde) {
  if (cosines.size() == 0) throw ValidationError("pseudo_label: no prototypes");
  if (tau_tilde < 0.0) throw ValidationError("pseudo_label: negative temperature");
  if (tau_tilde == 0.0) {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(cosines.size());
    y[argmax_index<double>(cosines)] = 1.0;
    return y;
  }
  return softmax<double>(Eigen::VectorXd(cosines / tau_tilde));
}

// Cross-entropy of the augmented-view assignment against the pseudo-label.
inline double self_loss_term(const Eigen::VectorXd& ytilde, const Eigen::VectorXd& yhat_aug) {
  check_same_size(ytilde.size(), yhat_aug.size(), "self_loss_term");
  double acc = 0.0;
  for (Eigen::Index k = 0; k < ytilde.size(); ++k) {
    if (ytilde[k] < 0.0) throw ValidationError("self_loss_term: negative pseudo-label");
    if (ytilde[k] > 0.0) acc -= ytilde[k] * log(yhat_aug[k]);
  }
  return acc;
}

// Assignment entropy (pre-update posterior).
inline double entropy_loss_term(const Eigen::VectorXd& yhat) { return entropy(yhat); }

// -log BetaPDF(clamp(p_new); a, b) with a = 4 mu, b = 4 - 4 mu. Differentiable
// inside the clamp, zero gradient outside.
template <class S>
S new_cluster_loss(const S& p_new, double mu, double clamp_eps = 1e-4) {
  if (mu <= 0.0 || mu >= 1.0) throw ValidationError("new_cluster_loss: mu must be in (0,1)");
  double a = 4.0 * mu, b = 4.0 - 4.0 * mu;
  double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  S p = clamp(p_new, clamp_eps, 1.0 - clamp_eps);
  return log_beta - (a - 1.0) * log(p) - (b - 1.0) * log(S(1.0) - p);
}

struct LossBreakdown {
  double l_self = 0.0;
  double l_ent = 0.0;
  double l_new = 0.0;
  double p_new = 0.0;
  double total = 0.0;
};

// Discrete structure of one episode pass. Recorded on the primary run and
// replayed during finite-difference probes so FD differentiates exactly the
// piecewise-smooth program the tape differentiated: branch decisions,
// eviction victims, the uhat argmax, and the (defined-as-detached)
// pseudo-labels are constants of differentiation; in stop-prototype-gradient
// mode the memory trajectory itself is too.
struct FrameTrace {
  bool created = false;
  int evicted_index = -1;
  int e1_max_index = -1;
  Eigen::VectorXd pseudo;
  Eigen::MatrixXd mem_means_post;  // one prototype per row
  Eigen::VectorXd mem_counts_post;
};

struct BranchTrace {
  std::vector<FrameTrace> frames;
  // Smallest distances to a discrete boundary seen while recording; a
  // perturbation-stability screen for gradient checks.
  double min_alpha_margin = std::numeric_limits<double>::infinity();
  double min_evict_gap = std::numeric_limits<double>::infinity();
  double min_argmax_gap = std::numeric_limits<double>::infinity();
  double clamp_margin = std::numeric_limits<double>::infinity();
};

template <class S>
struct EpisodeLossResult {
  S total{};
  LossBreakdown values;
  PrototypeMemory<S> memory;  // end-of-episode state
};

template <class S>
EpisodeLossResult<S> episode_loss(const Episode& ep, const Params<S>& params,
                                  const MemoryConfig& memcfg, const LossConfig& cfg,
                                  BranchTrace* record = nullptr,
                                  const BranchTrace* replay = nullptr) {
  if (ep.empty()) throw ValidationError("episode_loss: empty episode");
  if (replay && replay->frames.size() != ep.size())
    throw ValidationError("episode_loss: trace length mismatch");
  const double T = static_cast<double>(ep.size());

  auto mem = make_memory<S>(memcfg);
  S beta = params.beta, gamma = params.gamma(), tau = params.tau();
  S l_self_sum(0.0), l_ent_sum(0.0), p_new_sum(0.0);

  for (std::size_t t = 0; t < ep.size(); ++t) {
    const Frame& f = ep[t];
    if (f.view2.size() == 0) throw ValidationError("episode_loss: frame is missing view2");
    const FrameTrace* rt = replay ? &replay->frames[t] : nullptr;

    VecX<S> z = encode(params, f.features);
    EStepResult<S> e1 = e_step(mem, z, beta, gamma, tau, rt ? rt->e1_max_index : -1);

    if (e1.yhat.size() > 0) {
      VecX<S> ls = log_softmax(e1.logits);
      S h(0.0);
      for (Eigen::Index k = 0; k < ls.size(); ++k) h -= e1.yhat[k] * ls[k];
      l_ent_sum += h;
      if (record && e1.logits.size() >= 2) {
        Eigen::VectorXd lv = values_of(e1.logits);
        double top = lv[e1.max_index];
        double second = -std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; k < lv.size(); ++k)
          if (k != e1.max_index) second = std::max(second, lv[k]);
        record->min_argmax_gap = std::min(record->min_argmax_gap, top - second);
      }
    }
    p_new_sum += e1.uhat;

    bool do_create = rt ? rt->created : (value(e1.uhat) >= memcfg.alpha);
    FrameTrace ft;
    ft.created = do_create;
    ft.e1_max_index = e1.max_index;
    if (record)
      record->min_alpha_margin =
          std::min(record->min_alpha_margin, std::fabs(value(e1.uhat) - memcfg.alpha));
    if (do_create) {
      if (record && mem.full()) {
        // Gap between the two smallest counts decides eviction stability.
        double lo1 = std::numeric_limits<double>::infinity(), lo2 = lo1;
        for (const auto& pr : mem.protos) {
          double c = value(pr.count);
          if (c < lo1) {
            lo2 = lo1;
            lo1 = c;
          } else {
            lo2 = std::min(lo2, c);
          }
        }
        if (mem.size() >= 2) record->min_evict_gap = std::min(record->min_evict_gap, lo2 - lo1);
      }
      auto cr = create(mem, z, rt ? rt->evicted_index : -1);
      ft.evicted_index = cr.evicted_index;
    } else {
      m_step(mem, z, e1.yhat, e1.uhat);
    }

    if (cfg.stop_prototype_gradient) {
      if (rt) {
        // FD probe: pin the trajectory to the recorded base-point values.
        for (int k = 0; k < mem.size(); ++k) {
          mem.protos[static_cast<std::size_t>(k)].mean =
              constant_vec<S>(rt->mem_means_post.row(k).transpose());
          mem.protos[static_cast<std::size_t>(k)].count = S(rt->mem_counts_post[k]);
        }
      } else {
        detach_memory(mem);
      }
    }

    Eigen::VectorXd ytilde;
    if (rt) {
      ytilde = rt->pseudo;
    } else {
      Eigen::VectorXd zv = values_of(z);
      Eigen::VectorXd cosines(mem.size());
      for (int k = 0; k < mem.size(); ++k)
        cosines[k] = cosine_similarity<double>(
            zv, values_of(mem.protos[static_cast<std::size_t>(k)].mean));
      ytilde = pseudo_label(cosines, params.tau_ratio * value(tau));
    }

    VecX<S> z2 = encode(params, f.view2);
    EStepResult<S> e2 = e_step(mem, z2, beta, gamma, tau);
    check_same_size(ytilde.size(), e2.logits.size(), "episode_loss pseudo-label");
    VecX<S> ls2 = log_softmax(e2.logits);
    for (Eigen::Index k = 0; k < ls2.size(); ++k)
      if (ytilde[k] > 0.0) l_self_sum -= ytilde[k] * ls2[k];

    if (record) {
      ft.pseudo = ytilde;
      ft.mem_means_post.resize(mem.size(), params.enc.output_dim);
      ft.mem_counts_post.resize(mem.size());
      for (int k = 0; k < mem.size(); ++k) {
        ft.mem_means_post.row(k) =
            values_of(mem.protos[static_cast<std::size_t>(k)].mean).transpose();
        ft.mem_counts_post[k] = value(mem.protos[static_cast<std::size_t>(k)].count);
      }
      record->frames.push_back(std::move(ft));
    }
  }

  EpisodeLossResult<S> out;
  S l_self = l_self_sum / T;
  S l_ent = l_ent_sum / T;
  S p_new = p_new_sum / T;
  if (record)
    record->clamp_margin = std::min(std::fabs(value(p_new) - cfg.clamp_eps),
                                    std::fabs(1.0 - cfg.clamp_eps - value(p_new)));
  S l_new = new_cluster_loss(p_new, cfg.mu, cfg.clamp_eps);
  out.total = l_self + cfg.lambda_ent * l_ent + cfg.lambda_new * l_new;
  out.values.l_self = value(l_self);
  out.values.l_ent = value(l_ent);
  out.values.l_new = value(l_new);
  out.values.p_new = value(p_new);
  out.values.total = value(out.total);
  out.memory = std::move(mem);
  return out;
}

}  // namespace protostream
