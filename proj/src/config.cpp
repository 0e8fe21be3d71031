#include "protostream/config.hpp"

#include <fstream>
#include <set>
#include <utility>

#include "protostream/errors.hpp"

namespace protostream {
namespace {

using nlohmann::json;

// Strict reader over one JSON object: every key must be consumed by a typed
// getter, and finish() reports leftovers with their dotted path.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(path_ + ": expected a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename F>
  void object(const std::string& key, F&& f) {
    if (!has(key)) return;
    Section child(j_.at(key), path_ + "." + key);
    f(child);
    child.finish();
  }

  void number(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw type_error(key, "a number");
    out = v.get<double>();
  }

  template <typename Int>
  void integer(const std::string& key, Int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw type_error(key, "an integer");
    out = static_cast<Int>(v.get<std::int64_t>());
  }

  void uinteger(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw type_error(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw type_error(key, "a boolean");
    out = v.get<bool>();
  }

  void text(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw type_error(key, "a string");
    out = v.get<std::string>();
  }

  void int_list(const std::string& key, std::vector<std::int64_t>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw type_error(key, "an array of integers");
    std::vector<std::int64_t> tmp;
    for (const json& e : v) {
      if (!e.is_number_integer()) throw type_error(key, "an array of integers");
      tmp.push_back(e.get<std::int64_t>());
    }
    out = std::move(tmp);
  }

  template <typename E>
  void choice(const std::string& key, const std::vector<std::pair<std::string, E>>& table,
              E& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw type_error(key, "a string");
    std::string name = v.get<std::string>();
    for (const auto& [label, value] : table)
      if (label == name) {
        out = value;
        return;
      }
    std::string valid;
    for (const auto& entry : table) {
      if (!valid.empty()) valid += ", ";
      valid += entry.first;
    }
    throw ValidationError(path_ + "." + key + ": \"" + name + "\" is not one of {" + valid +
                          "}");
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ValidationError(path_ + "." + it.key() + ": unknown key");
  }

 private:
  ValidationError type_error(const std::string& key, const char* want) const {
    return ValidationError(path_ + "." + key + ": expected " + want);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const std::vector<std::pair<std::string, EncoderKind>> kEncoderKinds = {
    {"identity", EncoderKind::identity},
    {"linear", EncoderKind::linear},
    {"mlp", EncoderKind::mlp}};

const std::vector<std::pair<std::string, Activation>> kActivations = {
    {"tanh", Activation::tanh}, {"relu", Activation::relu}};

const std::vector<std::pair<std::string, MeansMode>> kMeansModes = {
    {"sphere", MeansMode::sphere}, {"orthogonal", MeansMode::orthogonal}};

const std::vector<std::pair<std::string, Protocol>> kProtocols = {
    {"unsupervised", Protocol::unsupervised},
    {"supervised", Protocol::supervised},
    {"offline", Protocol::offline}};

template <typename E>
std::string choice_name(const std::vector<std::pair<std::string, E>>& table, E value) {
  for (const auto& [label, v] : table)
    if (v == value) return label;
  throw ValidationError("internal: enum value has no name");
}

}  // namespace

std::vector<std::string> profile_names() {
  return {"default", "roamingrooms-like", "saycam-like", "omniglot-like", "imagenet-like"};
}

RunConfig profile_config(const std::string& name) {
  RunConfig cfg;
  cfg.profile = name;
  cfg.encoder.kind = EncoderKind::mlp;
  cfg.encoder.input_dim = 16;
  cfg.encoder.output_dim = 16;
  cfg.encoder.hidden_dim = 32;
  cfg.scalars = ScalarInits{-12.0, 1.0, 0.1, 0.1};
  cfg.memory = MemoryConfig{150, 0.995, 0.5, false};
  cfg.loss.lambda_ent = 0.0;
  cfg.loss.lambda_new = 0.5;
  cfg.loss.mu = 0.5;
  cfg.steps = 80000;
  cfg.schedule = StaircaseSchedule{1e-3, {40000, 60000}, 0.1};
  cfg.log_every = 50;
  if (name == "default") {
    cfg.steps = 1000;
    cfg.schedule = StaircaseSchedule{1e-3, {}, 0.1};
  } else if (name == "roamingrooms-like") {
    cfg.scalars.tau_ratio = 0.1;
    cfg.stream.episode_len = 50;
    cfg.stream.contexts = 1;
  } else if (name == "saycam-like") {
    cfg.memory = MemoryConfig{75, 0.99, 0.5, false};
    cfg.loss.lambda_new = 0.3;
    cfg.loss.mu = 0.6;
    cfg.scalars.tau_ratio = 0.0;
    cfg.stream.episode_len = 75;
    cfg.stream.contexts = 3;
    cfg.steps = 30000;
    cfg.schedule.decay_steps = {20000};
  } else if (name == "omniglot-like") {
    cfg.loss.lambda_ent = 1.0;
    cfg.loss.lambda_new = 1.0;
    cfg.scalars.tau_ratio = 0.2;
    cfg.stream.episode_len = 150;
    cfg.stream.contexts = 5;
  } else if (name == "imagenet-like") {
    cfg.memory = MemoryConfig{600, 0.99, 0.5, false};
    cfg.loss.lambda_ent = 0.5;
    cfg.loss.lambda_new = 0.5;
    cfg.scalars.tau_ratio = 0.0;
    cfg.stream.episode_len = 48;
    cfg.stream.contexts = 3;
  } else {
    std::string valid;
    for (const std::string& p : profile_names()) {
      if (!valid.empty()) valid += ", ";
      valid += p;
    }
    throw ValidationError("unknown profile \"" + name + "\"; valid profiles: " + valid);
  }
  return cfg;
}

void overlay_run_config(RunConfig& cfg, const json& j, const std::string& path) {
  Section root(j, path);
  root.text("profile", cfg.profile);
  root.uinteger("seed", cfg.seed);
  root.text("out_dir", cfg.out_dir);
  root.object("encoder", [&](Section& s) {
    s.choice("kind", kEncoderKinds, cfg.encoder.kind);
    s.integer("input_dim", cfg.encoder.input_dim);
    s.integer("output_dim", cfg.encoder.output_dim);
    s.integer("hidden_dim", cfg.encoder.hidden_dim);
    s.choice("activation", kActivations, cfg.encoder.activation);
  });
  root.object("scalars", [&](Section& s) {
    s.number("beta_init", cfg.scalars.beta_init);
    s.number("gamma_init", cfg.scalars.gamma_init);
    s.number("tau_init", cfg.scalars.tau_init);
    s.number("tau_ratio", cfg.scalars.tau_ratio);
  });
  root.object("memory", [&](Section& s) {
    s.integer("capacity", cfg.memory.capacity);
    s.number("rho", cfg.memory.rho);
    s.number("alpha", cfg.memory.alpha);
    s.boolean("decay_on_create", cfg.memory.decay_on_create);
  });
  root.object("loss", [&](Section& s) {
    s.number("lambda_ent", cfg.loss.lambda_ent);
    s.number("lambda_new", cfg.loss.lambda_new);
    s.number("mu", cfg.loss.mu);
    s.number("clamp_eps", cfg.loss.clamp_eps);
    s.boolean("stop_prototype_gradient", cfg.loss.stop_prototype_gradient);
  });
  root.object("stream", [&](Section& s) {
    s.integer("episode_len", cfg.stream.episode_len);
    s.integer("contexts", cfg.stream.contexts);
    s.integer("pool", cfg.stream.pool);
    s.number("crp_theta", cfg.stream.crp_theta);
    s.integer("latent_dim", cfg.stream.latent_dim);
    s.integer("obs_dim", cfg.stream.obs_dim);
    s.number("separation", cfg.stream.separation);
    s.number("noise_latent", cfg.stream.noise_latent);
    s.number("view_sigma", cfg.stream.view_sigma);
    s.uinteger("world_seed", cfg.stream.world_seed);
    s.number("distractor_rate", cfg.stream.distractor_rate);
    s.integer("distractor_pool", cfg.stream.distractor_pool);
    s.boolean("iid_shuffle", cfg.stream.iid_shuffle);
    s.integer("queue_size", cfg.stream.queue_size);
    s.choice("means_mode", kMeansModes, cfg.stream.means_mode);
  });
  root.object("train", [&](Section& s) {
    s.integer("steps", cfg.steps);
    double lr = cfg.schedule.base_lr;
    s.number("lr", lr);
    cfg.schedule.base_lr = lr;
    cfg.adam.lr = lr;
    s.number("adam_beta1", cfg.adam.beta1);
    s.number("adam_beta2", cfg.adam.beta2);
    s.number("adam_eps", cfg.adam.eps);
    s.int_list("decay_steps", cfg.schedule.decay_steps);
    s.number("decay_factor", cfg.schedule.factor);
    s.integer("log_every", cfg.log_every);
    s.integer("checkpoint_every", cfg.checkpoint_every);
  });
  root.object("eval", [&](Section& s) {
    s.choice("protocol", kProtocols, cfg.protocol);
    s.integer("episodes", cfg.eval_episodes);
    s.integer("workers", cfg.workers);
    s.boolean("strict_prefix_recall", cfg.strict_prefix_recall);
    s.integer("knn_k", cfg.knn_k);
  });
  root.finish();
}

RunConfig load_run_config(const std::string& file_path) {
  std::ifstream in(file_path);
  if (!in) throw IoError("cannot open config file: " + file_path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError(file_path + ": malformed JSON");
  std::string base = "default";
  if (j.is_object() && j.contains("profile")) {
    if (!j.at("profile").is_string())
      throw ValidationError(file_path + ".profile: expected a string");
    base = j.at("profile").get<std::string>();
  }
  RunConfig cfg = profile_config(base);
  overlay_run_config(cfg, j, file_path);
  return cfg;
}

void apply_set_override(RunConfig& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("--set expects key=value, got \"" + assignment + "\"");
  std::string key = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded() || value.is_object()) value = raw;  // fall back to string

  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (const std::string& p : parts)
    if (p.empty()) throw ValidationError("--set key has an empty path segment: \"" + key + "\"");

  json overlay = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = json{{*it, overlay}};
  overlay_run_config(cfg, overlay, "--set " + key);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["profile"] = cfg.profile;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["encoder"] = {{"kind", choice_name(kEncoderKinds, cfg.encoder.kind)},
                  {"input_dim", cfg.encoder.input_dim},
                  {"output_dim", cfg.encoder.output_dim},
                  {"hidden_dim", cfg.encoder.hidden_dim},
                  {"activation", choice_name(kActivations, cfg.encoder.activation)}};
  j["scalars"] = {{"beta_init", cfg.scalars.beta_init},
                  {"gamma_init", cfg.scalars.gamma_init},
                  {"tau_init", cfg.scalars.tau_init},
                  {"tau_ratio", cfg.scalars.tau_ratio}};
  j["memory"] = {{"capacity", cfg.memory.capacity},
                 {"rho", cfg.memory.rho},
                 {"alpha", cfg.memory.alpha},
                 {"decay_on_create", cfg.memory.decay_on_create}};
  j["loss"] = {{"lambda_ent", cfg.loss.lambda_ent},
               {"lambda_new", cfg.loss.lambda_new},
               {"mu", cfg.loss.mu},
               {"clamp_eps", cfg.loss.clamp_eps},
               {"stop_prototype_gradient", cfg.loss.stop_prototype_gradient}};
  j["stream"] = {{"episode_len", cfg.stream.episode_len},
                 {"contexts", cfg.stream.contexts},
                 {"pool", cfg.stream.pool},
                 {"crp_theta", cfg.stream.crp_theta},
                 {"latent_dim", cfg.stream.latent_dim},
                 {"obs_dim", cfg.stream.obs_dim},
                 {"separation", cfg.stream.separation},
                 {"noise_latent", cfg.stream.noise_latent},
                 {"view_sigma", cfg.stream.view_sigma},
                 {"world_seed", cfg.stream.world_seed},
                 {"distractor_rate", cfg.stream.distractor_rate},
                 {"distractor_pool", cfg.stream.distractor_pool},
                 {"iid_shuffle", cfg.stream.iid_shuffle},
                 {"queue_size", cfg.stream.queue_size},
                 {"means_mode", choice_name(kMeansModes, cfg.stream.means_mode)}};
  j["train"] = {{"steps", cfg.steps},
                {"lr", cfg.schedule.base_lr},
                {"adam_beta1", cfg.adam.beta1},
                {"adam_beta2", cfg.adam.beta2},
                {"adam_eps", cfg.adam.eps},
                {"decay_steps", cfg.schedule.decay_steps},
                {"decay_factor", cfg.schedule.factor},
                {"log_every", cfg.log_every},
                {"checkpoint_every", cfg.checkpoint_every}};
  j["eval"] = {{"protocol", choice_name(kProtocols, cfg.protocol)},
               {"episodes", cfg.eval_episodes},
               {"workers", cfg.workers},
               {"strict_prefix_recall", cfg.strict_prefix_recall},
               {"knn_k", cfg.knn_k}};
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  std::string base = "default";
  if (j.is_object() && j.contains("profile")) {
    if (!j.at("profile").is_string()) throw ValidationError("config.profile: expected a string");
    base = j.at("profile").get<std::string>();
  }
  RunConfig cfg = profile_config(base);
  overlay_run_config(cfg, j, "config");
  return cfg;
}

void validate_run_config(const RunConfig& cfg) {
  validate_encoder(cfg.encoder);
  validate_stream(cfg.stream);
  if (cfg.memory.capacity < 1) throw ValidationError("memory.capacity must be >= 1");
  if (cfg.memory.rho <= 0.0 || cfg.memory.rho > 1.0)
    throw ValidationError("memory.rho must lie in (0, 1]");
  if (cfg.memory.alpha < 0.0 || cfg.memory.alpha > 1.0)
    throw ValidationError("memory.alpha must lie in [0, 1]");
  if (cfg.loss.mu <= 0.0 || cfg.loss.mu >= 1.0)
    throw ValidationError("loss.mu must lie in (0, 1)");
  if (cfg.loss.clamp_eps <= 0.0 || cfg.loss.clamp_eps >= 0.5)
    throw ValidationError("loss.clamp_eps must lie in (0, 0.5)");
  if (cfg.loss.lambda_ent < 0.0 || cfg.loss.lambda_new < 0.0)
    throw ValidationError("loss weights must be non-negative");
  if (cfg.scalars.tau_init <= 0.0 || cfg.scalars.gamma_init <= 0.0)
    throw ValidationError("scalars.tau_init and scalars.gamma_init must be positive");
  if (cfg.scalars.tau_ratio < 0.0)
    throw ValidationError("scalars.tau_ratio must be non-negative");
  if (cfg.steps < 0) throw ValidationError("train.steps must be non-negative");
  if (cfg.schedule.base_lr <= 0.0) throw ValidationError("train.lr must be positive");
  if (cfg.schedule.factor <= 0.0 || cfg.schedule.factor > 1.0)
    throw ValidationError("train.decay_factor must lie in (0, 1]");
  if (cfg.log_every < 1) throw ValidationError("train.log_every must be >= 1");
  if (cfg.checkpoint_every < 0)
    throw ValidationError("train.checkpoint_every must be non-negative");
  if (cfg.eval_episodes < 1) throw ValidationError("eval.episodes must be >= 1");
  if (cfg.workers < 1) throw ValidationError("eval.workers must be >= 1");
  if (cfg.knn_k < 1) throw ValidationError("eval.knn_k must be >= 1");
  if (cfg.encoder.input_dim != cfg.stream.obs_dim)
    throw ValidationError("encoder.input_dim (" + std::to_string(cfg.encoder.input_dim) +
                          ") must match stream.obs_dim (" +
                          std::to_string(cfg.stream.obs_dim) + ") for generated streams");
}

ParameterSet make_initial_params(const RunConfig& cfg) {
  return init_params(cfg.encoder, cfg.scalars, cfg.seed);
}

TrainConfig make_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.steps = cfg.steps;
  t.adam = cfg.adam;
  t.schedule = cfg.schedule;
  t.memory = cfg.memory;
  t.loss = cfg.loss;
  t.log_every = cfg.log_every;
  t.checkpoint_every = cfg.checkpoint_every;
  return t;
}

EvalConfig make_eval_config(const RunConfig& cfg) {
  EvalConfig e;
  e.protocol = cfg.protocol;
  e.workers = cfg.workers;
  e.strict_prefix_recall = cfg.strict_prefix_recall;
  e.knn_k = cfg.knn_k;
  e.probe.seed = cfg.seed;
  return e;
}

EpisodeSource make_episode_source(const RunConfig& cfg) {
  StreamConfig stream = cfg.stream;
  std::uint64_t seed = cfg.seed;
  return [stream, seed](std::int64_t step) {
    std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(step));
    Episode ep = generate_episode(stream, ep_seed, step);
    if (stream.distractor_rate > 0.0) ep = inject_distractors(ep, stream, ep_seed);
    if (stream.iid_shuffle) {
      std::vector<Episode> shuffled = iid_shuffle({ep}, stream.queue_size, ep_seed);
      ep = shuffled.at(0);
    }
    return ep;
  };
}

std::vector<Episode> make_eval_episodes(const RunConfig& cfg, std::int64_t n,
                                        std::uint64_t seed_tag) {
  return generate_stream(cfg.stream, derive_seed(cfg.seed, seed_tag), n);
}

}  // namespace protostream
