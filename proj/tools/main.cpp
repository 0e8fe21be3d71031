#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include "protostream/checkpoint.hpp"
#include "protostream/config.hpp"
#include "protostream/episode_io.hpp"
#include "protostream/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protostream;

namespace {

constexpr int kOutputFormatVersion = 1;
constexpr std::uint64_t kEvalSeedTag = 0xE7A1;  // eval streams never reuse training seeds

// Flags shared by every subcommand; config precedence is
//   file / profile / checkpoint echo -> --seed -> --out -> --set (in order).
struct Common {
  std::string config;
  std::string profile;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<std::string> sets;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (a \"profile\" key selects the base)");
  cmd->add_option("--profile", c.profile,
                  "named profile: default, roamingrooms-like, saycam-like, omniglot-like, "
                  "imagenet-like");
  c.seed_opt = cmd->add_option("--seed", c.seed, "override the run seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.sets, "dotted override, e.g. --set memory.rho=0.9 (repeatable)");
}

RunConfig resolve_config(const Common& c, const json* checkpoint_echo = nullptr) {
  if (!c.config.empty() && !c.profile.empty())
    throw ValidationError("use either --config or --profile, not both");
  RunConfig cfg;
  if (!c.config.empty())
    cfg = load_run_config(c.config);
  else if (!c.profile.empty())
    cfg = profile_config(c.profile);
  else if (checkpoint_echo != nullptr)
    cfg = run_config_from_json(*checkpoint_echo);
  else
    cfg = profile_config("default");
  if (c.seed_opt != nullptr && c.seed_opt->count() > 0) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  for (const std::string& s : c.sets) apply_set_override(cfg, s);
  validate_run_config(cfg);
  return cfg;
}

std::string out_file(const RunConfig& cfg, const std::string& name) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
  return (fs::path(cfg.out_dir) / name).string();
}

void emit(const json& summary) { std::cout << summary.dump(2) << "\n"; }

Checkpoint snapshot(const TrainState& state, const json& echo) {
  Checkpoint c;
  c.step = state.step;
  c.params = state.params;
  c.adam_m = state.opt.first_moment();
  c.adam_v = state.opt.second_moment();
  c.adam_t = state.opt.steps_taken();
  c.config_echo = echo;
  return c;
}

TrainState state_from_checkpoint(const Checkpoint& c, const AdamConfig& adam) {
  TrainState state = make_train_state(c.params, adam);
  state.opt.restore(c.adam_m, c.adam_v, c.adam_t);
  state.step = c.step;
  return state;
}

void require_labels(const std::vector<Episode>& episodes, const std::string& protocol) {
  for (std::size_t i = 0; i < episodes.size(); ++i)
    for (std::size_t t = 0; t < episodes[i].size(); ++t)
      if (episodes[i][t].label < 0)
        throw ValidationError(protocol + " evaluation needs labeled streams, but frame " +
                              std::to_string(t) + " of episode " + std::to_string(i) +
                              " has no label");
}

void check_dims(const std::vector<Episode>& episodes, const ParameterSet& params) {
  if (episodes.empty() || episodes[0].empty())
    throw ValidationError("evaluation stream has no frames");
  auto dim = static_cast<int>(episodes[0][0].features.size());
  if (dim != params.enc.input_dim)
    throw ValidationError("stream features have dim " + std::to_string(dim) +
                          " but the checkpoint encoder expects input dim " +
                          std::to_string(params.enc.input_dim));
}

std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::unsupervised: return "unsupervised";
    case Protocol::supervised: return "supervised";
    case Protocol::offline: return "offline";
  }
  return "?";
}

// ---------------------------------------------------------------------------

int cmd_gen(const RunConfig& cfg, std::int64_t episodes_n) {
  std::vector<Episode> eps = generate_stream(cfg.stream, cfg.seed, episodes_n);
  std::string path = out_file(cfg, "episodes.jsonl");
  save_episodes(path, eps);

  std::set<std::int64_t> classes;
  std::int64_t frames = 0, same = 0, pairs = 0;
  for (const Episode& ep : eps) {
    frames += static_cast<std::int64_t>(ep.size());
    for (std::size_t t = 0; t < ep.size(); ++t) {
      classes.insert(ep[t].label);
      if (t > 0) {
        ++pairs;
        if (ep[t].label == ep[t - 1].label) ++same;
      }
    }
  }
  emit({{"format_version", kOutputFormatVersion},
        {"command", "gen"},
        {"file", path},
        {"episodes", eps.size()},
        {"frames", frames},
        {"classes", classes.size()},
        {"lag1_same_class_rate",
         pairs > 0 ? static_cast<double>(same) / static_cast<double>(pairs) : 0.0}});
  return 0;
}

int cmd_train(const RunConfig& cfg, const Checkpoint* resume) {
  json echo = run_config_to_json(cfg);
  TrainState state = resume != nullptr ? state_from_checkpoint(*resume, cfg.adam)
                                       : make_train_state(make_initial_params(cfg), cfg.adam);
  TrainConfig tcfg = make_train_config(cfg);
  EpisodeSource source = make_episode_source(cfg);

  CheckpointHook hook;
  if (cfg.checkpoint_every > 0)
    hook = [&cfg, &echo](const TrainState& s) {
      save_checkpoint(out_file(cfg, "checkpoint_" + std::to_string(s.step) + ".json"),
                      snapshot(s, echo));
    };
  TrainResult result = train(state, tcfg, source, hook);

  std::string log_path = out_file(cfg, "train_log.csv");
  write_csv(log_path, result.log);
  std::string ck_path = out_file(cfg, "checkpoint.json");
  save_checkpoint(ck_path, snapshot(state, echo));

  json summary = {{"format_version", kOutputFormatVersion},
                  {"command", "train"},
                  {"steps_run", result.steps_run},
                  {"final_step", state.step},
                  {"checkpoint", ck_path},
                  {"log_csv", log_path}};
  if (!result.log.empty()) {
    summary["final_loss"] = result.log.back().total;
    summary["final_lr"] = result.log.back().lr;
  }
  emit(summary);
  return 0;
}

struct EvalOpts {
  std::string checkpoint;
  std::string stream_file;
  std::string dump_embeddings;
  bool sweep_alpha = false;
  std::string alphas;  // comma-separated grid override
};

Eigen::VectorXd parse_alphas(const std::string& text) {
  std::vector<double> vals;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    std::string tok = text.substr(start, comma - start);
    if (tok.empty()) throw ValidationError("--alphas has an empty entry");
    try {
      std::size_t used = 0;
      vals.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ValidationError("--alphas: \"" + tok + "\" is not a number");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  Eigen::VectorXd grid(static_cast<Eigen::Index>(vals.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) grid[static_cast<Eigen::Index>(i)] = vals[i];
  return grid;
}

void dump_embeddings_csv(const std::string& path, const std::vector<Episode>& episodes,
                         const ParameterSet& params) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open embedding dump for writing: " + path);
  out << "episode,frame,t,label";
  for (int d = 0; d < params.enc.output_dim; ++d) out << ",e" << d;
  out << "\n";
  char buf[64];
  for (std::size_t i = 0; i < episodes.size(); ++i)
    for (std::size_t t = 0; t < episodes[i].size(); ++t) {
      const Frame& f = episodes[i][t];
      VecX<double> z = encode<double>(params, f.features);
      out << i << "," << t << "," << f.t << "," << f.label;
      for (Eigen::Index d = 0; d < z.size(); ++d) {
        std::snprintf(buf, sizeof buf, "%.17g", z[d]);
        out << "," << buf;
      }
      out << "\n";
    }
  if (!out) throw IoError("failed while writing embedding dump: " + path);
}

int cmd_eval(const RunConfig& cfg, const Checkpoint& ck, const EvalOpts& opts) {
  std::vector<Episode> episodes =
      opts.stream_file.empty() ? make_eval_episodes(cfg, cfg.eval_episodes, kEvalSeedTag)
                               : load_episodes(opts.stream_file);
  check_dims(episodes, ck.params);
  require_labels(episodes, protocol_name(cfg.protocol));

  EvalConfig ecfg = make_eval_config(cfg);
  if (!opts.alphas.empty()) ecfg.alpha_grid = parse_alphas(opts.alphas);
  EvalResult r = evaluate(episodes, ck.params, cfg.memory, ecfg);

  json summary = {{"format_version", kOutputFormatVersion},
                  {"command", "eval"},
                  {"protocol", protocol_name(cfg.protocol)},
                  {"episodes", r.episodes},
                  {"checkpoint", opts.checkpoint}};
  if (cfg.protocol == Protocol::unsupervised) {
    summary["ami"] = r.mean_ami;
    summary["ari"] = r.mean_ari;
    summary["homogeneity"] = r.mean_homogeneity;
    summary["completeness"] = r.mean_completeness;
    summary["alpha"] = cfg.memory.alpha;
    if (opts.sweep_alpha) {
      summary["ami_max"] = r.sweep.best_ami;
      summary["alpha_max"] = r.sweep.best_alpha;
      json grid = json::array(), mean = json::array();
      for (Eigen::Index i = 0; i < r.sweep.alphas.size(); ++i) {
        grid.push_back(r.sweep.alphas[i]);
        mean.push_back(r.sweep.mean_ami[i]);
      }
      summary["sweep"] = {{"alpha", grid}, {"mean_ami", mean}};
    }
  } else if (cfg.protocol == Protocol::supervised) {
    summary["ap"] = r.mean_ap;
    summary["strict_prefix_recall"] = cfg.strict_prefix_recall;
  } else {
    summary["knn_accuracy"] = r.knn_accuracy;
    summary["probe_accuracy"] = r.probe_accuracy;
    summary["knn_k"] = cfg.knn_k;
  }

  if (!r.per_episode.empty()) {
    std::string csv_path = out_file(cfg, "eval_episodes.csv");
    std::ofstream out(csv_path);
    if (!out) throw IoError("cannot open per-episode CSV for writing: " + csv_path);
    out << "episode,score\n";
    char buf[64];
    for (std::size_t i = 0; i < r.per_episode.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", r.per_episode[i]);
      out << i << "," << buf << "\n";
    }
    summary["per_episode_csv"] = csv_path;
  }
  if (!opts.dump_embeddings.empty()) {
    std::string dump_path = out_file(cfg, opts.dump_embeddings);
    dump_embeddings_csv(dump_path, episodes, ck.params);
    summary["embeddings_csv"] = dump_path;
  }
  std::string summary_path = out_file(cfg, "eval_summary.json");
  {
    std::ofstream out(summary_path);
    if (!out) throw IoError("cannot open eval summary for writing: " + summary_path);
    out << summary.dump(2) << "\n";
  }
  emit(summary);
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, double tolerance, int episodes) {
  GradCheckConfig gcfg;
  gcfg.tolerance = tolerance;
  gcfg.episodes = episodes;
  ParameterSet params = make_initial_params(cfg);
  GradCheckReport rep =
      grad_check(params, cfg.memory, cfg.loss, make_episode_source(cfg), gcfg);

  json groups = json::object();
  for (const auto& [group, err] : rep.group_max) groups[group] = err;
  emit({{"format_version", kOutputFormatVersion},
        {"command", "gradcheck"},
        {"ok", rep.ok},
        {"tolerance", gcfg.tolerance},
        {"max_rel_err", rep.max_rel_err},
        {"worst_group", rep.worst_group},
        {"group_max_rel_err", groups},
        {"episodes_tested", rep.episodes_tested},
        {"episodes_skipped", rep.episodes_skipped}});
  if (!rep.ok) {
    std::cerr << "gradcheck: max relative error " << rep.max_rel_err << " in group "
              << rep.worst_group << " exceeds tolerance " << gcfg.tolerance << "\n";
    return 2;
  }
  return 0;
}

struct SweepRow {
  double value = 0.0;
  double ami = 0.0;
  double ap = 0.0;
  double ami_untrained = 0.0;
};

using SweepSetter = void (*)(RunConfig&, double);

const std::vector<std::pair<std::string, SweepSetter>> kSweepParams = {
    {"K", [](RunConfig& c, double v) { c.memory.capacity = static_cast<int>(std::llround(v)); }},
    {"rho", [](RunConfig& c, double v) { c.memory.rho = v; }},
    {"alpha", [](RunConfig& c, double v) { c.memory.alpha = v; }},
    {"mu", [](RunConfig& c, double v) { c.loss.mu = v; }},
    {"lambda_new", [](RunConfig& c, double v) { c.loss.lambda_new = v; }},
    {"lambda_ent", [](RunConfig& c, double v) { c.loss.lambda_ent = v; }},
    {"tau_ratio", [](RunConfig& c, double v) { c.scalars.tau_ratio = v; }},
    {"distractor_rate", [](RunConfig& c, double v) { c.stream.distractor_rate = v; }}};

SweepSetter sweep_setter(const std::string& name) {
  for (const auto& [label, setter] : kSweepParams)
    if (label == name) return setter;
  std::string valid;
  for (const auto& entry : kSweepParams) {
    if (!valid.empty()) valid += ", ";
    valid += entry.first;
  }
  throw ValidationError("unknown sweep parameter \"" + name + "\"; valid parameters: " + valid);
}

int cmd_sweep(const RunConfig& cfg, const std::string& param, const std::string& values_text) {
  SweepSetter setter = sweep_setter(param);
  Eigen::VectorXd values = parse_alphas(values_text);
  if (values.size() == 0) throw ValidationError("sweep needs at least one value");
  bool distractor = param == "distractor_rate";

  std::vector<SweepRow> rows(static_cast<std::size_t>(values.size()));
  int threads = std::min<int>(cfg.workers, static_cast<int>(values.size()));
  std::atomic<Eigen::Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;

  auto run_value = [&](Eigen::Index vi) {
    RunConfig sub = cfg;
    setter(sub, values[vi]);
    validate_run_config(sub);
    ParameterSet init = make_initial_params(sub);
    TrainState state = make_train_state(init, sub.adam);
    train(state, make_train_config(sub), make_episode_source(sub));

    std::vector<Episode> episodes = make_eval_episodes(sub, sub.eval_episodes, kEvalSeedTag);
    EvalConfig ecfg = make_eval_config(sub);
    ecfg.workers = threads > 1 ? 1 : cfg.workers;  // avoid nested thread pools
    ecfg.protocol = Protocol::unsupervised;
    SweepRow row;
    row.value = values[vi];
    row.ami = evaluate(episodes, state.params, sub.memory, ecfg).mean_ami;
    ecfg.protocol = Protocol::supervised;
    row.ap = evaluate(episodes, state.params, sub.memory, ecfg).mean_ap;
    if (distractor) {
      ecfg.protocol = Protocol::unsupervised;
      row.ami_untrained = evaluate(episodes, init, sub.memory, ecfg).mean_ami;
    }
    rows[static_cast<std::size_t>(vi)] = row;
  };

  auto worker = [&]() {
    while (true) {
      Eigen::Index vi = next.fetch_add(1);
      if (vi >= values.size()) return;
      try {
        run_value(vi);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  double baseline = rows[0].ami;
  if (distractor)
    for (const SweepRow& row : rows)
      if (row.value == 0.0) {
        baseline = row.ami;
        break;
      }

  std::string csv_path = out_file(cfg, "sweep.csv");
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot open sweep CSV for writing: " + csv_path);
  json jrows = json::array();
  char buf[256];
  if (distractor) {
    out << "value,ami,ami_untrained,relative_ami\n";
    for (const SweepRow& row : rows) {
      double rel = baseline != 0.0 ? row.ami / baseline : (row.ami == 0.0 ? 1.0 : 0.0);
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", row.value, row.ami,
                    row.ami_untrained, rel);
      out << buf;
      jrows.push_back({{"value", row.value},
                       {"ami", row.ami},
                       {"ami_untrained", row.ami_untrained},
                       {"relative_ami", rel}});
    }
  } else {
    out << "value,ami,ap\n";
    for (const SweepRow& row : rows) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", row.value, row.ami, row.ap);
      out << buf;
      jrows.push_back({{"value", row.value}, {"ami", row.ami}, {"ap", row.ap}});
    }
  }
  if (!out) throw IoError("failed while writing sweep CSV: " + csv_path);

  emit({{"format_version", kOutputFormatVersion},
        {"command", "sweep"},
        {"parameter", param},
        {"rows", jrows},
        {"csv", csv_path}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-memory streaming trainer"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, grad_c, sweep_c;

  CLI::App* gen = app.add_subcommand("gen", "generate an episode stream as JSONL");
  add_common(gen, gen_c);
  std::int64_t gen_episodes = -1;
  gen->add_option("--episodes", gen_episodes, "episode count (default: eval.episodes)");

  CLI::App* trainc = app.add_subcommand("train", "train a model and write checkpoints");
  add_common(trainc, train_c);
  std::string resume_path;
  trainc->add_option("--resume", resume_path, "continue from a checkpoint");

  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a stream");
  add_common(evalc, eval_c);
  EvalOpts eval_opts;
  evalc->add_option("--checkpoint", eval_opts.checkpoint, "checkpoint to evaluate")->required();
  evalc->add_option("--stream", eval_opts.stream_file,
                    "JSONL episode file (default: generate from config)");
  std::string protocol_flag;
  evalc->add_option("--protocol", protocol_flag, "unsupervised | supervised | offline");
  evalc->add_flag("--sweep-alpha", eval_opts.sweep_alpha,
                  "report AMI maximized over the creation-threshold grid");
  evalc->add_option("--alphas", eval_opts.alphas, "comma-separated threshold grid override");
  evalc->add_option("--dump-embeddings", eval_opts.dump_embeddings,
                    "write per-frame embeddings to this CSV (relative to --out)");
  std::int64_t eval_episodes = -1;
  evalc->add_option("--episodes", eval_episodes, "episode count when generating");

  CLI::App* gradc = app.add_subcommand("gradcheck", "finite-difference audit of the gradient");
  add_common(gradc, grad_c);
  double grad_tol = 1e-6;
  int grad_eps = 4;
  gradc->add_option("--tolerance", grad_tol, "max relative error allowed (default 1e-6)");
  gradc->add_option("--episodes", grad_eps, "episodes to audit (default 4)");

  CLI::App* sweepc = app.add_subcommand("sweep", "train+eval across one parameter's values");
  add_common(sweepc, sweep_c);
  std::string sweep_param, sweep_values;
  sweepc->add_option("--param", sweep_param, "K, rho, alpha, mu, lambda_new, lambda_ent, "
                                             "tau_ratio, distractor_rate")
      ->required();
  sweepc->add_option("--values", sweep_values, "comma-separated values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = resolve_config(gen_c);
      return cmd_gen(cfg, gen_episodes > 0 ? gen_episodes : cfg.eval_episodes);
    }
    if (trainc->parsed()) {
      if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        RunConfig cfg = resolve_config(train_c, &ck.config_echo);
        return cmd_train(cfg, &ck);
      }
      return cmd_train(resolve_config(train_c), nullptr);
    }
    if (evalc->parsed()) {
      Checkpoint ck = load_checkpoint(eval_opts.checkpoint);
      RunConfig cfg = resolve_config(eval_c, &ck.config_echo);
      if (!protocol_flag.empty()) {
        if (protocol_flag == "unsupervised") cfg.protocol = Protocol::unsupervised;
        else if (protocol_flag == "supervised") cfg.protocol = Protocol::supervised;
        else if (protocol_flag == "offline") cfg.protocol = Protocol::offline;
        else
          throw ValidationError("--protocol must be unsupervised, supervised, or offline");
      }
      if (eval_episodes > 0) cfg.eval_episodes = eval_episodes;
      return cmd_eval(cfg, ck, eval_opts);
    }
    if (gradc->parsed()) return cmd_gradcheck(resolve_config(grad_c), grad_tol, grad_eps);
    if (sweepc->parsed()) return cmd_sweep(resolve_config(sweep_c), sweep_param, sweep_values);
    throw ValidationError("no subcommand given");
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
