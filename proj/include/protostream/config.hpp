#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "protostream/encoder.hpp"
#include "protostream/streams.hpp"
#include "protostream/trainer.hpp"

namespace protostream {

// One document describing a whole run: model, memory, loss, stream, training
// schedule, and evaluation protocol. Parsed strictly — unknown keys are
// rejected with their dotted path — and composable: start from a named
// profile, overlay a JSON file, overlay --set key=value pairs.
struct RunConfig {
  std::string profile = "default";
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  EncoderConfig encoder;
  ScalarInits scalars;
  MemoryConfig memory;
  LossConfig loss;
  StreamConfig stream;

  std::int64_t steps = 1000;
  AdamConfig adam;
  StaircaseSchedule schedule;
  std::int64_t log_every = 50;
  std::int64_t checkpoint_every = 0;

  Protocol protocol = Protocol::unsupervised;
  std::int64_t eval_episodes = 20;
  int workers = 1;
  bool strict_prefix_recall = false;
  int knn_k = 5;
};

std::vector<std::string> profile_names();
RunConfig profile_config(const std::string& name);

// Strict overlay of a JSON document onto an existing config. `path` prefixes
// error messages (e.g. the file name or "--set").
void overlay_run_config(RunConfig& cfg, const nlohmann::json& j, const std::string& path);

// Reads a config file; an optional "profile" key selects the base profile the
// rest of the document overlays.
RunConfig load_run_config(const std::string& file_path);

// --set style override: "memory.rho=0.9". The value parses as JSON when
// possible (numbers, booleans, arrays) and falls back to a string.
void apply_set_override(RunConfig& cfg, const std::string& assignment);

nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

void validate_run_config(const RunConfig& cfg);

// Wiring helpers shared by the CLI and tests.
ParameterSet make_initial_params(const RunConfig& cfg);
TrainConfig make_train_config(const RunConfig& cfg);
EvalConfig make_eval_config(const RunConfig& cfg);
// Per-step episodes: seed derived from (run seed, step), distractors applied,
// and — when iid_shuffle is on — a within-episode shuffle.
EpisodeSource make_episode_source(const RunConfig& cfg);
std::vector<Episode> make_eval_episodes(const RunConfig& cfg, std::int64_t n,
                                        std::uint64_t seed_tag);

}  // namespace protostream
