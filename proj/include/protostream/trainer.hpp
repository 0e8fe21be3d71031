#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "protostream/adam.hpp"
#include "protostream/metrics.hpp"
#include "protostream/objective.hpp"

namespace protostream {

// Episodes come from a caller-supplied source keyed by step index, so the
// same loop trains from a seeded generator (stateless resume: step -> seed)
// or from episodes cycled out of a file.
using EpisodeSource = std::function<Episode(std::int64_t step)>;

struct TrainConfig {
  std::int64_t steps = 1000;
  AdamConfig adam;  // lr comes from the schedule, not from here
  StaircaseSchedule schedule;
  MemoryConfig memory;
  LossConfig loss;
  std::int64_t log_every = 1;
  std::int64_t checkpoint_every = 0;  // 0: no periodic checkpoints
};

struct TrainLogRow {
  std::int64_t step = 0;
  double l_self = 0, l_ent = 0, l_new = 0, total = 0, p_new = 0, lr = 0;
};

// Everything the loop needs to continue: parameters, optimizer moments, and
// the next step index. Copyable, so callers can snapshot and resume.
struct TrainState {
  ParameterSet params;
  Adam opt;
  std::int64_t step = 0;
};

inline TrainState make_train_state(const ParameterSet& params, const AdamConfig& adam = {}) {
  return TrainState{params, Adam(param_count(params.enc), adam), 0};
}

using CheckpointHook = std::function<void(const TrainState&)>;

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::int64_t steps_run = 0;
};

// Runs steps [state.step, cfg.steps): fresh memory per episode, tape gradient
// of the episode loss, Adam update at the scheduled rate. Non-finite losses or
// gradients abort with a NumericalError naming the step and parameter norm.
TrainResult train(TrainState& state, const TrainConfig& cfg, const EpisodeSource& source,
                  const CheckpointHook& on_checkpoint = {});

void write_csv(const std::string& path, const std::vector<TrainLogRow>& rows);

// ---------------------------------------------------------------------------
// Finite-difference audit of the tape gradient. Each probed episode replays
// the recorded discrete structure, so FD differentiates the same smooth piece
// the tape did; episodes whose recorded margins sit too close to a branch
// boundary are skipped and resampled.
struct GradCheckConfig {
  int episodes = 4;
  double fd_step = 1e-5;
  double tolerance = 1e-6;
  double rel_floor = 1e-2;    // relative-error denominator floor
  double margin_min = 1e-3;   // smallest acceptable distance to a branch flip
  int max_attempts = 40;      // episode draws before giving up
};

struct GradCheckReport {
  bool ok = false;
  double max_rel_err = 0.0;
  Eigen::Index worst_index = -1;
  std::string worst_group;  // w1 / b1 / w2 / b2 / beta / gamma_raw / tau_raw
  std::map<std::string, double> group_max;  // worst relative error per group
  int episodes_tested = 0;
  int episodes_skipped = 0;
};

// Compares one analytic gradient against FD along the frozen trace.
GradCheckReport compare_gradient(const ParameterSet& params, const MemoryConfig& mem_cfg,
                                 const LossConfig& loss_cfg, const Episode& ep,
                                 const Eigen::VectorXd& analytic, const BranchTrace& trace,
                                 const GradCheckConfig& cfg = {});

GradCheckReport grad_check(const ParameterSet& params, const MemoryConfig& mem_cfg,
                           const LossConfig& loss_cfg, const EpisodeSource& source,
                           const GradCheckConfig& cfg = {});

std::string parameter_group(const EncoderConfig& enc, Eigen::Index flat_index);

// ---------------------------------------------------------------------------
// Frozen-model evaluation over a batch of episodes. Episode work is farmed to
// threads; per-episode results land in an index-addressed buffer and are
// reduced serially, so the outcome is independent of scheduling.
enum class Protocol { unsupervised, supervised, offline };

struct EvalConfig {
  Protocol protocol = Protocol::unsupervised;
  int workers = 1;
  Eigen::VectorXd alpha_grid;  // empty: default 21-point grid
  bool strict_prefix_recall = false;
  int knn_k = 5;
  LinearProbeConfig probe;
};

struct EvalResult {
  std::int64_t episodes = 0;
  // Unsupervised: clustering scores at the configured alpha plus the sweep.
  double mean_ami = 0, mean_ari = 0, mean_homogeneity = 0, mean_completeness = 0;
  AlphaSweep sweep;
  // Supervised: mean average precision of known-vs-new ranking.
  double mean_ap = 0;
  // Offline: embeddings split frame-parity-wise into train/test halves.
  double knn_accuracy = 0, probe_accuracy = 0;
  std::vector<double> per_episode;  // AMI (unsupervised) or AP (supervised)
};

EvalResult evaluate(const std::vector<Episode>& episodes, const ParameterSet& params,
                    const MemoryConfig& mem_cfg, const EvalConfig& cfg);

}  // namespace protostream
