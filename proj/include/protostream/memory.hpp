#pragma once

#include <cstdint>
#include <vector>

#include "protostream/vec_ops.hpp"

// Online mixture memory over unit-sphere embeddings. Each slot holds a running
// mean (prototype) and an evidence count; assignment softly updates all slots,
// creation appends a new slot seeded at the current embedding. Templated on the
// scalar so the identical recursion runs on plain doubles (inference) or on
// tape scalars (training, where gradients flow through the whole trajectory).

namespace protostream {

struct MemoryConfig {
  int capacity = 150;            // max number of prototypes (K)
  double rho = 0.995;            // per-step evidence decay
  double alpha = 0.5;            // creation threshold on the new-cluster score
  bool decay_on_create = false;  // also decay counts on creation steps
};

template <class S>
struct Prototype {
  VecX<S> mean;
  S count;
};

template <class S>
struct PrototypeMemory {
  MemoryConfig cfg;
  std::vector<Prototype<S>> protos;
  // Stable identity per slot, assigned at creation and retired at eviction.
  // Identities label readout predictions; slot indices are unstable.
  std::vector<std::int64_t> ids;
  std::int64_t next_id = 0;

  int size() const { return static_cast<int>(protos.size()); }
  bool full() const { return size() >= cfg.capacity; }
};

template <class S>
PrototypeMemory<S> make_memory(const MemoryConfig& cfg) {
  PrototypeMemory<S> m;
  m.cfg = cfg;
  return m;
}

template <class S>
struct EStepResult {
  VecX<S> logits;  // cos(z, prototype) / tau
  VecX<S> yhat;    // softmax over logits (uniform mixing weights cancel)
  S uhat;          // new-cluster score
  int max_index = -1;
};

// Posterior over slots plus the new-cluster score
//   uhat = sigmoid((-max_k logits_k - beta) / gamma),
// the max-approximation that lower-bounds the exact mixture score. An empty
// memory scores uhat = 1 exactly (forced creation, no gradient).
// forced_max_index replays a recorded argmax during finite-difference probes.
template <class S>
EStepResult<S> e_step(const PrototypeMemory<S>& mem, const VecX<S>& z, const S& beta,
                      const S& gamma, const S& tau, int forced_max_index = -1) {
  EStepResult<S> r;
  if (mem.size() == 0) {
    r.uhat = S(1.0);
    return r;
  }
  r.logits.resize(mem.size());
  for (int k = 0; k < mem.size(); ++k)
    r.logits[k] = cosine_similarity(z, mem.protos[static_cast<std::size_t>(k)].mean) / tau;
  r.yhat = softmax(r.logits);
  r.max_index = forced_max_index >= 0 ? forced_max_index : argmax_index(r.logits);
  r.uhat = sigmoid((-r.logits[r.max_index] - beta) / gamma);
  return r;
}

// Soft update of every slot:
//   count_k <- rho * count_k + yhat_k (1 - uhat)
//   mean_k  <- z * lam_k + mean_k * (1 - lam_k),  lam_k = yhat_k (1 - uhat) / (rho * count_k_prev + 1)
template <class S>
void m_step(PrototypeMemory<S>& mem, const VecX<S>& z, const VecX<S>& yhat, const S& uhat) {
  check_same_size(yhat.size(), mem.size(), "m_step yhat");
  for (int k = 0; k < mem.size(); ++k) {
    Prototype<S>& p = mem.protos[static_cast<std::size_t>(k)];
    S w = yhat[k] * (S(1.0) - uhat);
    S lam = w / (mem.cfg.rho * p.count + S(1.0));
    p.count = mem.cfg.rho * p.count + w;
    S keep = S(1.0) - lam;
    for (Eigen::Index i = 0; i < p.mean.size(); ++i) p.mean[i] = z[i] * lam + p.mean[i] * keep;
  }
}

struct CreateResult {
  int evicted_index = -1;  // -1: nothing evicted
  std::int64_t evicted_id = -1;
  int new_index = -1;
  std::int64_t new_id = -1;
};

// Appends a slot seeded at z with unit count, evicting the slot with the
// smallest count (lowest index on ties) when the memory is at capacity.
// forced_evict_index replays a recorded eviction victim.
template <class S>
CreateResult create(PrototypeMemory<S>& mem, const VecX<S>& z, int forced_evict_index = -1) {
  CreateResult r;
  if (mem.cfg.decay_on_create) {
    for (auto& p : mem.protos) p.count = mem.cfg.rho * p.count;
  }
  if (mem.full()) {
    int victim = forced_evict_index;
    if (victim < 0) {
      victim = 0;
      for (int k = 1; k < mem.size(); ++k)
        if (value(mem.protos[static_cast<std::size_t>(k)].count) <
            value(mem.protos[static_cast<std::size_t>(victim)].count))
          victim = k;
    }
    r.evicted_index = victim;
    r.evicted_id = mem.ids[static_cast<std::size_t>(victim)];
    mem.protos.erase(mem.protos.begin() + victim);
    mem.ids.erase(mem.ids.begin() + victim);
  }
  Prototype<S> p;
  p.mean = z;
  p.count = S(1.0);
  mem.protos.push_back(std::move(p));
  mem.ids.push_back(mem.next_id);
  r.new_index = mem.size() - 1;
  r.new_id = mem.next_id++;
  return r;
}

template <class S>
struct StepResult {
  EStepResult<S> e;
  bool created = false;
  CreateResult create_info;
};

// One frame: E-step, then create if uhat >= alpha else soft M-step.
template <class S>
StepResult<S> step(PrototypeMemory<S>& mem, const VecX<S>& z, const S& beta, const S& gamma,
                   const S& tau) {
  StepResult<S> r;
  r.e = e_step(mem, z, beta, gamma, tau);
  if (value(r.e.uhat) >= mem.cfg.alpha) {
    r.created = true;
    r.create_info = create(mem, z);
  } else {
    m_step(mem, z, r.e.yhat, r.e.uhat);
  }
  return r;
}

// Cuts gradient flow through the stored trajectory: values survive, history
// does not. Used by the stop-prototype-gradient training mode.
inline void detach_memory(PrototypeMemory<Var>& mem) {
  for (auto& p : mem.protos) {
    for (Eigen::Index i = 0; i < p.mean.size(); ++i) p.mean[i] = Var(p.mean[i].value());
    p.count = Var(p.count.value());
  }
}
inline void detach_memory(PrototypeMemory<double>&) {}

// Max-approximation sanity: with mixing weights already folded into the
// logits, sigmoid(s - max(v)) >= sigmoid(s - logsumexp(v)) must always hold.
inline bool uhat_bound_check(const Eigen::VectorXd& logits, double s) {
  return sigmoid(s - vmax(logits)) >= sigmoid(s - logsumexp(logits));
}

}  // namespace protostream
