#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "protostream/errors.hpp"

namespace protostream {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index n, AdamConfig cfg = {})
      : cfg_(cfg), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  // In-place update; lr_override (if >= 0) replaces cfg.lr for this step,
  // which is how the schedule plugs in. Updated parameters must stay finite.
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double lr_override = -1.0) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw ValidationError("adam: size mismatch");
    double lr = lr_override >= 0.0 ? lr_override : cfg_.lr;
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_.array().matrix() + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Eigen::Index i = 0; i < params.size(); ++i) {
      double mhat = m_[i] / c1;
      double vhat = v_[i] / c2;
      params[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    if (!params.allFinite()) throw NumericalError("adam: non-finite parameter after update");
  }

  std::int64_t steps_taken() const { return t_; }
  const Eigen::VectorXd& first_moment() const { return m_; }
  const Eigen::VectorXd& second_moment() const { return v_; }

  void restore(const Eigen::VectorXd& m, const Eigen::VectorXd& v, std::int64_t t) {
    if (m.size() != m_.size() || v.size() != v_.size())
      throw ValidationError("adam: restore size mismatch");
    m_ = m;
    v_ = v;
    t_ = t;
  }

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_, v_;
  std::int64_t t_ = 0;
};

// Staircase learning-rate schedule: lr(step) = base * factor^(#boundaries <= step).
// Steps are 0-indexed; the decayed rate applies from the boundary step onward.
struct StaircaseSchedule {
  double base_lr = 1e-3;
  std::vector<std::int64_t> decay_steps;
  double factor = 0.1;

  double at(std::int64_t step) const {
    double lr = base_lr;
    for (std::int64_t s : decay_steps)
      if (step >= s) lr *= factor;
    return lr;
  }
};

}  // namespace protostream
