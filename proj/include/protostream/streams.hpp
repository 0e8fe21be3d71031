#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "protostream/episode.hpp"
#include "protostream/rng.hpp"

// Non-iid synthetic streams: per-context Chinese-restaurant-process class
// draws, per-class latent means pushed through a fixed orthogonal world
// transform, two independently noised views per frame, optional distractor
// injection and an approximate-iid shuffle.

namespace protostream {

enum class MeansMode { sphere, orthogonal };

struct StreamConfig {
  int episode_len = 150;  // frames per episode (T)
  int contexts = 5;       // contiguous equal blocks per episode (E)
  int pool = 10;          // class slots available per context
  double crp_theta = 1.0;
  int latent_dim = 16;
  int obs_dim = 16;
  double separation = 1.0;   // latent mean scale
  double noise_latent = 0.0; // per-frame latent jitter (shared by both views)
  double view_sigma = 0.1;   // per-view additive observation noise
  std::uint64_t world_seed = 0;
  double distractor_rate = 0.0;
  int distractor_pool = 10;
  bool iid_shuffle = false;
  int queue_size = 1;
  MeansMode means_mode = MeansMode::sphere;
};

void validate_stream(const StreamConfig& cfg);

// Labels: context e of episode i owns the range [(i*E + e) * pool, ...) so
// classes never collide across contexts or episodes. Distractor labels start
// at this offset and belong to a fixed pool shared by every episode.
constexpr std::int64_t kDistractorLabelBase = 1000000000;

// Deterministic orthogonal obs_dim x obs_dim matrix from world_seed alone.
Eigen::MatrixXd world_transform(const StreamConfig& cfg);

Episode generate_episode(const StreamConfig& cfg, std::uint64_t seed, std::int64_t episode_index);

// Independently replaces each frame with a distractor-class sample with
// probability distractor_rate. Decisions and distractor noise come from
// derived substreams, so rate 0 returns the input bit-identically.
Episode inject_distractors(const Episode& ep, const StreamConfig& cfg, std::uint64_t seed);

// Streaming shuffle through a bounded queue that spans episode boundaries;
// the result is repartitioned into episodes of the first input episode's
// length (frame t fields are renumbered). queue_size 1 is the identity;
// queue_size >= total frames is a uniform permutation.
std::vector<Episode> iid_shuffle(const std::vector<Episode>& episodes, int queue_size,
                                 std::uint64_t seed);

// Convenience pipeline: per-episode derived seeds, then distractors, then the
// optional shuffle — exactly what training and evaluation consume.
std::vector<Episode> generate_stream(const StreamConfig& cfg, std::uint64_t seed,
                                     std::int64_t n_episodes);

}  // namespace protostream
