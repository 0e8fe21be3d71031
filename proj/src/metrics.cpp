#include "protostream/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "protostream/errors.hpp"

namespace protostream {

namespace {

// Tie-breaking and degeneracy rules live behind this epsilon: a chance-adjusted
// score whose numerator and denominator both vanish is defined as 1.0.
constexpr double kTiny = 1e-12;

double comb2(double x) { return 0.5 * x * (x - 1.0); }

}  // namespace

Contingency contingency_table(const LabelVec& u, const LabelVec& v) {
  if (u.size() != v.size()) throw ValidationError("contingency: label vectors differ in length");
  if (u.empty()) throw ValidationError("contingency: empty label vectors");
  std::unordered_map<std::int64_t, int> ru, rv;
  std::vector<std::pair<int, int>> cells(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    auto [itu, nu] = ru.try_emplace(u[i], static_cast<int>(ru.size()));
    auto [itv, nv] = rv.try_emplace(v[i], static_cast<int>(rv.size()));
    cells[i] = {itu->second, itv->second};
  }
  Contingency c;
  c.counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ru.size()),
                                   static_cast<Eigen::Index>(rv.size()));
  for (auto [i, j] : cells) c.counts(i, j) += 1.0;
  c.row_sums = c.counts.rowwise().sum();
  c.col_sums = c.counts.colwise().sum().transpose();
  c.n = static_cast<double>(u.size());
  return c;
}

double mutual_information(const Contingency& c) {
  double mi = 0.0;
  for (Eigen::Index i = 0; i < c.counts.rows(); ++i)
    for (Eigen::Index j = 0; j < c.counts.cols(); ++j) {
      double nij = c.counts(i, j);
      if (nij <= 0.0) continue;
      mi += (nij / c.n) * std::log((c.n * nij) / (c.row_sums[i] * c.col_sums[j]));
    }
  return mi;
}

double expected_mutual_information(const Contingency& c) {
  const double n = c.n;
  const auto total = static_cast<std::int64_t>(std::llround(n));
  std::vector<double> lf(static_cast<std::size_t>(total) + 1);
  for (std::int64_t k = 0; k <= total; ++k)
    lf[static_cast<std::size_t>(k)] = std::lgamma(static_cast<double>(k) + 1.0);
  auto lfac = [&lf](std::int64_t k) { return lf[static_cast<std::size_t>(k)]; };
  double emi = 0.0;
  for (Eigen::Index i = 0; i < c.counts.rows(); ++i) {
    const auto a = static_cast<std::int64_t>(std::llround(c.row_sums[i]));
    for (Eigen::Index j = 0; j < c.counts.cols(); ++j) {
      const auto b = static_cast<std::int64_t>(std::llround(c.col_sums[j]));
      const std::int64_t lo = std::max<std::int64_t>(1, a + b - total);
      const std::int64_t hi = std::min(a, b);
      for (std::int64_t nij = lo; nij <= hi; ++nij) {
        const double x = static_cast<double>(nij);
        const double term = (x / n) * std::log((n * x) / (static_cast<double>(a) * b));
        // Hypergeometric weight P(N_ij = nij | a, b, n), in log space.
        const double lw = lfac(a) + lfac(b) + lfac(total - a) + lfac(total - b) - lfac(total) -
                          lfac(nij) - lfac(a - nij) - lfac(b - nij) - lfac(total - a - b + nij);
        emi += term * std::exp(lw);
      }
    }
  }
  return emi;
}

double marginal_entropy(const Eigen::VectorXd& counts, double n) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < counts.size(); ++i) {
    if (counts[i] <= 0.0) continue;
    double p = counts[i] / n;
    h -= p * std::log(p);
  }
  return h;
}

double adjusted_mutual_information(const LabelVec& u, const LabelVec& v) {
  Contingency c = contingency_table(u, v);
  if (c.counts.rows() == 1 && c.counts.cols() == 1) return 1.0;  // identical trivial partitions
  double mi = mutual_information(c);
  double emi = expected_mutual_information(c);
  double hu = marginal_entropy(c.row_sums, c.n);
  double hv = marginal_entropy(c.col_sums, c.n);
  double num = mi - emi;
  double den = 0.5 * (hu + hv) - emi;
  if (std::abs(den) < kTiny) return std::abs(num) < kTiny ? 1.0 : 0.0;
  return num / den;
}

double adjusted_rand_index(const LabelVec& u, const LabelVec& v) {
  Contingency c = contingency_table(u, v);
  double sum_ij = 0.0;
  for (Eigen::Index i = 0; i < c.counts.rows(); ++i)
    for (Eigen::Index j = 0; j < c.counts.cols(); ++j) sum_ij += comb2(c.counts(i, j));
  double sum_a = 0.0, sum_b = 0.0;
  for (Eigen::Index i = 0; i < c.row_sums.size(); ++i) sum_a += comb2(c.row_sums[i]);
  for (Eigen::Index j = 0; j < c.col_sums.size(); ++j) sum_b += comb2(c.col_sums[j]);
  double pairs = comb2(c.n);
  if (pairs < 1.0) return 1.0;  // n < 2: partitions trivially agree
  double expected = sum_a * sum_b / pairs;
  double num = sum_ij - expected;
  double den = 0.5 * (sum_a + sum_b) - expected;
  if (std::abs(den) < kTiny) return 1.0;
  return num / den;
}

HomCom homogeneity_completeness(const LabelVec& classes, const LabelVec& clusters) {
  Contingency c = contingency_table(classes, clusters);
  double h_classes = marginal_entropy(c.row_sums, c.n);
  double h_clusters = marginal_entropy(c.col_sums, c.n);
  double h_c_given_k = 0.0, h_k_given_c = 0.0;
  for (Eigen::Index i = 0; i < c.counts.rows(); ++i)
    for (Eigen::Index j = 0; j < c.counts.cols(); ++j) {
      double nij = c.counts(i, j);
      if (nij <= 0.0) continue;
      h_c_given_k -= (nij / c.n) * std::log(nij / c.col_sums[j]);
      h_k_given_c -= (nij / c.n) * std::log(nij / c.row_sums[i]);
    }
  HomCom r;
  r.homogeneity = h_classes < kTiny ? 1.0 : 1.0 - h_c_given_k / h_classes;
  r.completeness = h_clusters < kTiny ? 1.0 : 1.0 - h_k_given_c / h_clusters;
  return r;
}

double average_precision(std::vector<ApItem> items, bool strict_prefix_recall) {
  if (items.empty()) throw ValidationError("average_precision: empty item list");
  std::stable_sort(items.begin(), items.end(),
                   [](const ApItem& a, const ApItem& b) { return a.uhat < b.uhat; });
  std::int64_t total_known = 0;
  for (const ApItem& it : items)
    if (it.known) ++total_known;
  if (total_known == 0) return 0.0;
  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, known_seen = 0;
  for (std::size_t r = 0; r < items.size(); ++r) {
    if (items[r].known) {
      ++known_seen;
      if (items[r].correct) ++tp;
    }
    double precision = static_cast<double>(tp) / static_cast<double>(r + 1);
    double recall = strict_prefix_recall
                        ? (known_seen > 0 ? static_cast<double>(tp) / known_seen : 0.0)
                        : static_cast<double>(tp) / total_known;
    ap += precision * (recall - prev_recall);
    prev_recall = recall;
  }
  return ap;
}

ClusteringScores clustering_scores(const LabelVec& classes, const LabelVec& clusters) {
  ClusteringScores s;
  s.ami = adjusted_mutual_information(classes, clusters);
  s.ari = adjusted_rand_index(classes, clusters);
  HomCom hc = homogeneity_completeness(classes, clusters);
  s.homogeneity = hc.homogeneity;
  s.completeness = hc.completeness;
  return s;
}

namespace {

// Core of the unsupervised readout once embeddings are in hand; shared with
// the alpha sweep so the encoder runs once per episode, not once per alpha.
UnsupervisedReadout readout_embedded(const std::vector<Eigen::VectorXd>& zs,
                                     const LabelVec& labels, const ParameterSet& params,
                                     const MemoryConfig& mem_cfg) {
  auto mem = make_memory<double>(mem_cfg);
  const double beta = params.beta, gamma = params.gamma(), tau = params.tau();
  UnsupervisedReadout r;
  r.truth = labels;
  r.predicted.reserve(zs.size());
  for (const Eigen::VectorXd& z : zs) {
    StepResult<double> s = step(mem, z, beta, gamma, tau);
    r.predicted.push_back(s.created ? s.create_info.new_id
                                    : mem.ids[static_cast<std::size_t>(s.e.max_index)]);
  }
  r.scores = clustering_scores(r.truth, r.predicted);
  return r;
}

void embed_one(const Episode& ep, const ParameterSet& params, std::vector<Eigen::VectorXd>& zs,
               LabelVec& labels) {
  if (ep.empty()) throw ValidationError("readout: empty episode");
  zs.reserve(ep.size());
  labels.reserve(ep.size());
  for (const Frame& f : ep) {
    zs.push_back(encode(params, f.features));
    labels.push_back(f.label);
  }
}

}  // namespace

UnsupervisedReadout unsupervised_readout(const Episode& ep, const ParameterSet& params,
                                         const MemoryConfig& mem_cfg) {
  std::vector<Eigen::VectorXd> zs;
  LabelVec labels;
  embed_one(ep, params, zs, labels);
  return readout_embedded(zs, labels, params, mem_cfg);
}

SupervisedReadout supervised_readout(const Episode& ep, const ParameterSet& params,
                                     const MemoryConfig& mem_cfg, bool strict_prefix_recall) {
  if (ep.empty()) throw ValidationError("readout: empty episode");
  auto mem = make_memory<double>(mem_cfg);
  const double beta = params.beta, gamma = params.gamma(), tau = params.tau();
  std::unordered_map<std::int64_t, std::int64_t> label_to_id;
  std::unordered_set<std::int64_t> seen;
  SupervisedReadout r;
  r.items.reserve(ep.size());
  auto slot_of_id = [&mem](std::int64_t id) {
    for (std::size_t s = 0; s < mem.ids.size(); ++s)
      if (mem.ids[s] == id) return static_cast<int>(s);
    throw ValidationError("supervised readout: stale prototype identity");
  };
  for (const Frame& f : ep) {
    Eigen::VectorXd z = encode(params, f.features);
    EStepResult<double> e = e_step(mem, z, beta, gamma, tau);
    bool known = seen.count(f.label) > 0;
    bool correct = false;
    if (known && mem.size() > 0) {
      std::int64_t pred_id = mem.ids[static_cast<std::size_t>(e.max_index)];
      auto it = label_to_id.find(f.label);
      correct = it != label_to_id.end() && it->second == pred_id;
    }
    r.items.push_back({e.uhat, known, correct});
    // Reveal the label: known labels force a hard assignment with no
    // new-cluster mass; new labels always create a prototype.
    auto it = label_to_id.find(f.label);
    if (it != label_to_id.end()) {
      Eigen::VectorXd y = Eigen::VectorXd::Zero(mem.size());
      y[slot_of_id(it->second)] = 1.0;
      m_step(mem, z, y, 0.0);
    } else {
      CreateResult cr = create(mem, z);
      if (cr.evicted_id >= 0) {
        for (auto jt = label_to_id.begin(); jt != label_to_id.end(); ++jt)
          if (jt->second == cr.evicted_id) {
            label_to_id.erase(jt);
            break;
          }
      }
      label_to_id.emplace(f.label, cr.new_id);
    }
    seen.insert(f.label);
  }
  for (const ApItem& it : r.items)
    if (it.known) ++r.known_count;
  r.ap = average_precision(r.items, strict_prefix_recall);
  return r;
}

Eigen::VectorXd default_alpha_grid() { return Eigen::VectorXd::LinSpaced(21, 0.025, 0.975); }

Eigen::VectorXd episode_alpha_ami(const Episode& ep, const ParameterSet& params,
                                  MemoryConfig mem_cfg, const Eigen::VectorXd& alphas) {
  if (alphas.size() == 0) throw ValidationError("alpha sweep: empty alpha grid");
  std::vector<Eigen::VectorXd> zs;
  LabelVec labels;
  embed_one(ep, params, zs, labels);
  Eigen::VectorXd out(alphas.size());
  for (Eigen::Index a = 0; a < alphas.size(); ++a) {
    mem_cfg.alpha = alphas[a];
    out[a] = readout_embedded(zs, labels, params, mem_cfg).scores.ami;
  }
  return out;
}

AlphaSweep ami_alpha_sweep(const std::vector<Episode>& episodes, const ParameterSet& params,
                           MemoryConfig mem_cfg, const Eigen::VectorXd& alphas) {
  if (episodes.empty()) throw ValidationError("alpha sweep: no episodes");
  if (alphas.size() == 0) throw ValidationError("alpha sweep: empty alpha grid");
  AlphaSweep r;
  r.alphas = alphas;
  r.mean_ami = Eigen::VectorXd::Zero(alphas.size());
  for (const Episode& ep : episodes) r.mean_ami += episode_alpha_ami(ep, params, mem_cfg, alphas);
  r.mean_ami /= static_cast<double>(episodes.size());
  Eigen::Index best = 0;
  for (Eigen::Index a = 1; a < alphas.size(); ++a)
    if (r.mean_ami[a] > r.mean_ami[best]) best = a;  // ties keep the lowest alpha
  r.best_alpha = r.alphas[best];
  r.best_ami = r.mean_ami[best];
  return r;
}

double knn_accuracy(const Eigen::MatrixXd& train_x, const LabelVec& train_y,
                    const Eigen::MatrixXd& test_x, const LabelVec& test_y, int k) {
  const auto n_train = train_x.rows(), n_test = test_x.rows();
  if (n_train == 0 || n_test == 0) throw ValidationError("knn: empty embedding matrix");
  if (train_x.cols() != test_x.cols()) throw ValidationError("knn: dimension mismatch");
  if (static_cast<Eigen::Index>(train_y.size()) != n_train ||
      static_cast<Eigen::Index>(test_y.size()) != n_test)
    throw ValidationError("knn: label count mismatch");
  if (k < 1 || k > n_train) throw ValidationError("knn: k out of range");
  Eigen::VectorXd train_norms(n_train);
  for (Eigen::Index i = 0; i < n_train; ++i) {
    train_norms[i] = train_x.row(i).norm();
    if (train_norms[i] == 0.0) throw NumericalError("knn: zero-norm embedding");
  }
  std::int64_t correct = 0;
  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (Eigen::Index t = 0; t < n_test; ++t) {
    double tn = test_x.row(t).norm();
    if (tn == 0.0) throw NumericalError("knn: zero-norm embedding");
    Eigen::VectorXd dist(n_train);
    for (Eigen::Index i = 0; i < n_train; ++i)
      dist[i] = 1.0 - train_x.row(i).dot(test_x.row(t)) / (train_norms[i] * tn);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&dist](int a, int b) {
      return dist[a] != dist[b] ? dist[a] < dist[b] : a < b;
    });
    std::map<std::int64_t, int> votes;
    for (int j = 0; j < k; ++j) votes[train_y[static_cast<std::size_t>(order[j])]] += 1;
    std::int64_t winner = 0;
    int best = -1;
    for (const auto& [label, count] : votes)  // map order: vote ties pick the smallest label
      if (count > best) {
        best = count;
        winner = label;
      }
    if (winner == test_y[static_cast<std::size_t>(t)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

double linear_probe_accuracy(const Eigen::MatrixXd& train_x, const LabelVec& train_y,
                             const Eigen::MatrixXd& test_x, const LabelVec& test_y,
                             LinearProbeConfig cfg) {
  const auto n_train = train_x.rows(), n_test = test_x.rows(), d = train_x.cols();
  if (n_train == 0 || n_test == 0) throw ValidationError("linear probe: empty embedding matrix");
  if (test_x.cols() != d) throw ValidationError("linear probe: dimension mismatch");
  if (static_cast<Eigen::Index>(train_y.size()) != n_train ||
      static_cast<Eigen::Index>(test_y.size()) != n_test)
    throw ValidationError("linear probe: label count mismatch");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw ValidationError("linear probe: epochs and batch_size must be positive");
  std::map<std::int64_t, int> label_index;  // sorted labels -> class indices
  for (std::int64_t y : train_y) label_index.try_emplace(y, 0);
  int n_classes = 0;
  for (auto& [label, idx] : label_index) idx = n_classes++;
  std::vector<int> ty(static_cast<std::size_t>(n_train));
  for (Eigen::Index i = 0; i < n_train; ++i)
    ty[static_cast<std::size_t>(i)] = label_index.at(train_y[static_cast<std::size_t>(i)]);

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_classes) * (d + 1));
  Eigen::VectorXd grad(theta.size());
  Eigen::Map<RowMajor> w(theta.data(), n_classes, d);
  Eigen::Map<Eigen::VectorXd> b(theta.data() + static_cast<Eigen::Index>(n_classes) * d,
                                n_classes);
  Eigen::Map<RowMajor> gw(grad.data(), n_classes, d);
  Eigen::Map<Eigen::VectorXd> gb(grad.data() + static_cast<Eigen::Index>(n_classes) * d,
                                 n_classes);
  Adam opt(theta.size(), cfg.adam);
  Rng rng(derive_seed(cfg.seed, 0x11EA8));
  std::vector<std::size_t> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);
    for (Eigen::Index start = 0; start < n_train; start += cfg.batch_size) {
      const auto batch = std::min<Eigen::Index>(cfg.batch_size, n_train - start);
      grad.setZero();
      for (Eigen::Index s = 0; s < batch; ++s) {
        const auto i = static_cast<Eigen::Index>(order[static_cast<std::size_t>(start + s)]);
        Eigen::VectorXd logits = w * train_x.row(i).transpose() + b;
        Eigen::VectorXd p = softmax<double>(logits);
        p[ty[static_cast<std::size_t>(i)]] -= 1.0;
        gw += p * train_x.row(i);
        gb += p;
      }
      grad /= static_cast<double>(batch);
      opt.step(theta, grad);
    }
  }
  std::int64_t correct = 0;
  for (Eigen::Index t = 0; t < n_test; ++t) {
    auto it = label_index.find(test_y[static_cast<std::size_t>(t)]);
    if (it == label_index.end()) continue;  // class never trained on
    Eigen::VectorXd logits = w * test_x.row(t).transpose() + b;
    if (argmax_index(logits) == it->second) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

void embed_episodes(const std::vector<Episode>& episodes, const ParameterSet& params,
                    Eigen::MatrixXd& x_out, LabelVec& y_out) {
  std::size_t total = 0;
  for (const Episode& ep : episodes) total += ep.size();
  if (total == 0) throw ValidationError("embed: no frames");
  x_out.resize(static_cast<Eigen::Index>(total), params.enc.output_dim);
  y_out.clear();
  y_out.reserve(total);
  Eigen::Index row = 0;
  for (const Episode& ep : episodes)
    for (const Frame& f : ep) {
      x_out.row(row++) = encode(params, f.features).transpose();
      y_out.push_back(f.label);
    }
}

}  // namespace protostream
