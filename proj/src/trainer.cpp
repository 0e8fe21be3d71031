#include "protostream/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "protostream/errors.hpp"

namespace protostream {

namespace {

std::string describe_state(std::int64_t step, const ParameterSet& params) {
  std::ostringstream os;
  os << "train step " << step << ", param norm " << flatten(params).norm();
  return os.str();
}

}  // namespace

TrainResult train(TrainState& state, const TrainConfig& cfg, const EpisodeSource& source,
                  const CheckpointHook& on_checkpoint) {
  if (!source) throw ValidationError("train: no episode source");
  if (cfg.log_every < 1) throw ValidationError("train: log_every must be positive");
  TrainResult result;
  Eigen::VectorXd flat = flatten(state.params);
  for (; state.step < cfg.steps; ++state.step) {
    Episode ep = source(state.step);
    double lr = cfg.schedule.at(state.step);
    LossBreakdown values;
    try {
      Tape tape;
      Params<Var> lifted = lift(tape, state.params);
      EpisodeLossResult<Var> res = episode_loss<Var>(ep, lifted, cfg.memory, cfg.loss);
      values = res.values;
      if (!std::isfinite(values.total)) throw NumericalError("train: non-finite loss");
      Eigen::VectorXd grad = tape.gradient(res.total);
      state.opt.step(flat, grad, lr);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " [" + describe_state(state.step, state.params) +
                           "]");
    }
    unflatten(state.params, flat);
    if (state.step % cfg.log_every == 0 || state.step + 1 == cfg.steps)
      result.log.push_back(
          {state.step, values.l_self, values.l_ent, values.l_new, values.total, values.p_new, lr});
    ++result.steps_run;
    if (cfg.checkpoint_every > 0 && on_checkpoint && (state.step + 1) % cfg.checkpoint_every == 0) {
      std::int64_t done = state.step + 1;  // hook sees the post-update state
      TrainState snapshot = state;
      snapshot.step = done;
      on_checkpoint(snapshot);
    }
  }
  return result;
}

void write_csv(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open log file for writing: " + path);
  std::fputs("step,l_self,l_ent,l_new,total,p_new,lr\n", f);
  for (const TrainLogRow& r : rows)
    std::fprintf(f, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step),
                 r.l_self, r.l_ent, r.l_new, r.total, r.p_new, r.lr);
  if (std::fclose(f) != 0) throw IoError("failed writing log file: " + path);
}

std::string parameter_group(const EncoderConfig& enc, Eigen::Index flat_index) {
  Eigen::Index at = flat_index;
  auto consume = [&at](Eigen::Index n) {
    if (at < n) return true;
    at -= n;
    return false;
  };
  if (enc.kind == EncoderKind::linear) {
    if (consume(static_cast<Eigen::Index>(enc.output_dim) * enc.input_dim)) return "w1";
    if (consume(enc.output_dim)) return "b1";
  } else if (enc.kind == EncoderKind::mlp) {
    if (consume(static_cast<Eigen::Index>(enc.hidden_dim) * enc.input_dim)) return "w1";
    if (consume(enc.hidden_dim)) return "b1";
    if (consume(static_cast<Eigen::Index>(enc.output_dim) * enc.hidden_dim)) return "w2";
    if (consume(enc.output_dim)) return "b2";
  }
  if (consume(1)) return "beta";
  if (consume(1)) return "gamma_raw";
  if (consume(1)) return "tau_raw";
  throw ValidationError("parameter_group: index out of range");
}

GradCheckReport compare_gradient(const ParameterSet& params, const MemoryConfig& mem_cfg,
                                 const LossConfig& loss_cfg, const Episode& ep,
                                 const Eigen::VectorXd& analytic, const BranchTrace& trace,
                                 const GradCheckConfig& cfg) {
  const Eigen::VectorXd base = flatten(params);
  if (analytic.size() != base.size()) throw ValidationError("compare_gradient: size mismatch");
  GradCheckReport rep;
  rep.ok = true;
  ParameterSet probe = params;
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    Eigen::VectorXd f = base;
    f[i] = base[i] + cfg.fd_step;
    unflatten(probe, f);
    double hi = episode_loss<double>(ep, probe, mem_cfg, loss_cfg, nullptr, &trace).values.total;
    f[i] = base[i] - cfg.fd_step;
    unflatten(probe, f);
    double lo = episode_loss<double>(ep, probe, mem_cfg, loss_cfg, nullptr, &trace).values.total;
    double fd = (hi - lo) / (2.0 * cfg.fd_step);
    double denom = std::max({std::abs(fd), std::abs(analytic[i]), cfg.rel_floor});
    double rel = std::abs(fd - analytic[i]) / denom;
    std::string group = parameter_group(params.enc, i);
    double& worst = rep.group_max[group];
    if (rel > worst) worst = rel;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.worst_group = group;
    }
  }
  rep.ok = rep.max_rel_err <= cfg.tolerance;
  rep.episodes_tested = 1;
  return rep;
}

GradCheckReport grad_check(const ParameterSet& params, const MemoryConfig& mem_cfg,
                           const LossConfig& loss_cfg, const EpisodeSource& source,
                           const GradCheckConfig& cfg) {
  if (!source) throw ValidationError("grad_check: no episode source");
  GradCheckReport rep;
  rep.ok = true;
  for (int attempt = 0; attempt < cfg.max_attempts && rep.episodes_tested < cfg.episodes;
       ++attempt) {
    Episode ep = source(attempt);
    BranchTrace trace;
    Tape tape;
    Params<Var> lifted = lift(tape, params);
    EpisodeLossResult<Var> res = episode_loss<Var>(ep, lifted, mem_cfg, loss_cfg, &trace);
    double margin = std::min({trace.min_alpha_margin, trace.min_evict_gap, trace.min_argmax_gap,
                              trace.clamp_margin});
    if (margin < cfg.margin_min) {
      ++rep.episodes_skipped;
      continue;  // too close to a branch flip for a stable FD probe
    }
    Eigen::VectorXd analytic = tape.gradient(res.total);
    GradCheckReport one = compare_gradient(params, mem_cfg, loss_cfg, ep, analytic, trace, cfg);
    if (one.max_rel_err > rep.max_rel_err) {
      rep.max_rel_err = one.max_rel_err;
      rep.worst_index = one.worst_index;
      rep.worst_group = one.worst_group;
    }
    for (const auto& [group, err] : one.group_max) {
      double& worst = rep.group_max[group];
      if (err > worst) worst = err;
    }
    rep.ok = rep.ok && one.ok;
    ++rep.episodes_tested;
  }
  if (rep.episodes_tested < cfg.episodes)
    throw NumericalError("grad_check: could not sample enough branch-stable episodes (" +
                         std::to_string(rep.episodes_skipped) + " skipped)");
  return rep;
}

namespace {

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  workers = std::clamp<int>(workers, 1, static_cast<int>(n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

EvalResult evaluate(const std::vector<Episode>& episodes, const ParameterSet& params,
                    const MemoryConfig& mem_cfg, const EvalConfig& cfg) {
  if (episodes.empty()) throw ValidationError("evaluate: no episodes");
  const std::size_t n = episodes.size();
  EvalResult r;
  r.episodes = static_cast<std::int64_t>(n);
  switch (cfg.protocol) {
    case Protocol::unsupervised: {
      Eigen::VectorXd grid = cfg.alpha_grid.size() > 0 ? cfg.alpha_grid : default_alpha_grid();
      std::vector<ClusteringScores> scores(n);
      std::vector<Eigen::VectorXd> per_alpha(n);
      parallel_for(n, cfg.workers, [&](std::size_t i) {
        scores[i] = unsupervised_readout(episodes[i], params, mem_cfg).scores;
        per_alpha[i] = episode_alpha_ami(episodes[i], params, mem_cfg, grid);
      });
      r.sweep.alphas = grid;
      r.sweep.mean_ami = Eigen::VectorXd::Zero(grid.size());
      for (std::size_t i = 0; i < n; ++i) {  // serial reduction in episode order
        r.mean_ami += scores[i].ami;
        r.mean_ari += scores[i].ari;
        r.mean_homogeneity += scores[i].homogeneity;
        r.mean_completeness += scores[i].completeness;
        r.sweep.mean_ami += per_alpha[i];
        r.per_episode.push_back(scores[i].ami);
      }
      const double dn = static_cast<double>(n);
      r.mean_ami /= dn;
      r.mean_ari /= dn;
      r.mean_homogeneity /= dn;
      r.mean_completeness /= dn;
      r.sweep.mean_ami /= dn;
      Eigen::Index best = 0;
      for (Eigen::Index a = 1; a < grid.size(); ++a)
        if (r.sweep.mean_ami[a] > r.sweep.mean_ami[best]) best = a;
      r.sweep.best_alpha = grid[best];
      r.sweep.best_ami = r.sweep.mean_ami[best];
      break;
    }
    case Protocol::supervised: {
      std::vector<double> aps(n);
      parallel_for(n, cfg.workers, [&](std::size_t i) {
        aps[i] = supervised_readout(episodes[i], params, mem_cfg, cfg.strict_prefix_recall).ap;
      });
      for (double ap : aps) {
        r.mean_ap += ap;
        r.per_episode.push_back(ap);
      }
      r.mean_ap /= static_cast<double>(n);
      break;
    }
    case Protocol::offline: {
      std::vector<Eigen::MatrixXd> xs(n);
      std::vector<LabelVec> ys(n);
      parallel_for(n, cfg.workers, [&](std::size_t i) {
        embed_episodes({episodes[i]}, params, xs[i], ys[i]);
      });
      Eigen::Index total = 0;
      for (const auto& x : xs) total += x.rows();
      Eigen::Index train_rows = 0;
      for (const auto& x : xs) train_rows += (x.rows() + 1) / 2;
      Eigen::MatrixXd train_x(train_rows, params.enc.output_dim);
      Eigen::MatrixXd test_x(total - train_rows, params.enc.output_dim);
      LabelVec train_y, test_y;
      Eigen::Index tr = 0, te = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < xs[i].rows(); ++j) {
          if (j % 2 == 0) {  // even frame positions train, odd positions test
            train_x.row(tr++) = xs[i].row(j);
            train_y.push_back(ys[i][static_cast<std::size_t>(j)]);
          } else {
            test_x.row(te++) = xs[i].row(j);
            test_y.push_back(ys[i][static_cast<std::size_t>(j)]);
          }
        }
      if (test_y.empty()) throw ValidationError("evaluate: offline split has no test frames");
      int k = std::min<int>(cfg.knn_k, static_cast<int>(train_rows));
      r.knn_accuracy = knn_accuracy(train_x, train_y, test_x, test_y, k);
      r.probe_accuracy = linear_probe_accuracy(train_x, train_y, test_x, test_y, cfg.probe);
      break;
    }
  }
  return r;
}

}  // namespace protostream
