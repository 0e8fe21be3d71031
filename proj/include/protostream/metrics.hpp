#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "protostream/adam.hpp"
#include "protostream/encoder.hpp"
#include "protostream/episode.hpp"
#include "protostream/memory.hpp"

namespace protostream {

using LabelVec = std::vector<std::int64_t>;

// Joint count table of two labelings over the same items, with marginals.
// Labels may be arbitrary integers; rows/cols follow first appearance order.
struct Contingency {
  Eigen::MatrixXd counts;  // rows: labels of u, cols: labels of v
  Eigen::VectorXd row_sums;
  Eigen::VectorXd col_sums;
  double n = 0.0;
};

Contingency contingency_table(const LabelVec& u, const LabelVec& v);

// Natural-log mutual information of the empirical joint distribution.
double mutual_information(const Contingency& c);

// Exact expectation of MI under the permutation (hypergeometric) null model
// with both marginals fixed.
double expected_mutual_information(const Contingency& c);

double marginal_entropy(const Eigen::VectorXd& counts, double n);

// (MI - E[MI]) / (mean of marginal entropies - E[MI]).
// Degenerate partitions: if both sides are single-cluster the score is 1.0;
// if the denominator vanishes, 1.0 when the numerator also vanishes, else 0.0.
double adjusted_mutual_information(const LabelVec& u, const LabelVec& v);

// Pair-counting Rand index adjusted for chance; 0/0 (e.g. n < 2 or both
// partitions trivial) is defined as 1.0.
double adjusted_rand_index(const LabelVec& u, const LabelVec& v);

struct HomCom {
  double homogeneity = 0.0;
  double completeness = 0.0;
};

// First argument is the ground-truth classes, second the predicted clusters.
// A zero entropy denominator yields a score of 1.0.
HomCom homogeneity_completeness(const LabelVec& classes, const LabelVec& clusters);

// ---------------------------------------------------------------------------
// Ranked detection of "seen before": each frame contributes a confidence that
// it belongs to a known class (low uhat = confident known), whether its class
// truly appeared earlier, and whether the class prediction was right.
struct ApItem {
  double uhat = 0.0;
  bool known = false;
  bool correct = false;
};

// Items are ranked by ascending uhat (stable: stream order breaks ties).
// Default recall denominator is the total number of known items in the
// sequence; with strict_prefix_recall the denominator is the number of known
// items within the current prefix, so recall can decrease and the summands
// can be negative. No known items at all yields 0.0.
double average_precision(std::vector<ApItem> items, bool strict_prefix_recall = false);

// ---------------------------------------------------------------------------
// Readouts run a frozen model over one episode.

struct ClusteringScores {
  double ami = 0.0;
  double ari = 0.0;
  double homogeneity = 0.0;
  double completeness = 0.0;
};

ClusteringScores clustering_scores(const LabelVec& classes, const LabelVec& clusters);

struct UnsupervisedReadout {
  LabelVec truth;      // frame labels
  LabelVec predicted;  // stable prototype identities (new id when a slot is created)
  ClusteringScores scores;
};

// Streams the episode through a fresh memory with the model's own
// threshold behaviour and scores predicted prototype identities against
// the labels.
UnsupervisedReadout unsupervised_readout(const Episode& ep, const ParameterSet& params,
                                         const MemoryConfig& mem_cfg);

struct SupervisedReadout {
  std::vector<ApItem> items;
  double ap = 0.0;
  std::int64_t known_count = 0;
};

// Predict-then-update protocol: the model predicts a label (and its uhat)
// before the frame's label is revealed, then the memory is updated with the
// label forced: a known label gets a hard assignment to its prototype with
// uhat = 0, a new label always creates a prototype.
SupervisedReadout supervised_readout(const Episode& ep, const ParameterSet& params,
                                     const MemoryConfig& mem_cfg,
                                     bool strict_prefix_recall = false);

struct AlphaSweep {
  Eigen::VectorXd alphas;
  Eigen::VectorXd mean_ami;  // mean over episodes per alpha
  double best_alpha = 0.0;
  double best_ami = 0.0;  // the "AMI at the best threshold" summary score
};

Eigen::VectorXd default_alpha_grid();  // 21 points spanning [0.025, 0.975]

// AMI of one episode at each creation threshold; the episode is embedded once
// and replayed per alpha. Building block for the sweep and for parallel eval.
Eigen::VectorXd episode_alpha_ami(const Episode& ep, const ParameterSet& params,
                                  MemoryConfig mem_cfg, const Eigen::VectorXd& alphas);

AlphaSweep ami_alpha_sweep(const std::vector<Episode>& episodes, const ParameterSet& params,
                           MemoryConfig mem_cfg, const Eigen::VectorXd& alphas);

// ---------------------------------------------------------------------------
// Offline probes on embeddings (rows = samples).

// Cosine-distance k-NN majority vote; vote ties pick the smallest label.
double knn_accuracy(const Eigen::MatrixXd& train_x, const LabelVec& train_y,
                    const Eigen::MatrixXd& test_x, const LabelVec& test_y, int k);

struct LinearProbeConfig {
  int epochs = 20;
  int batch_size = 32;
  AdamConfig adam;  // lr defaults to 1e-3
  std::uint64_t seed = 0;
};

// Multinomial logistic regression trained with minibatch Adam on the frozen
// embeddings. Test labels never seen in training count as incorrect.
double linear_probe_accuracy(const Eigen::MatrixXd& train_x, const LabelVec& train_y,
                             const Eigen::MatrixXd& test_x, const LabelVec& test_y,
                             LinearProbeConfig cfg = {});

// Encode all frames of all episodes; rows follow episode order then frame
// order. Labels are copied alongside.
void embed_episodes(const std::vector<Episode>& episodes, const ParameterSet& params,
                    Eigen::MatrixXd& x_out, LabelVec& y_out);

}  // namespace protostream
