#include "protostream/streams.hpp"

#include <Eigen/QR>
#include <cmath>

#include "protostream/errors.hpp"

namespace protostream {

namespace {

// Substream tags; every independent purpose gets its own derived seed so that
// changing one knob (e.g. distractor rate) cannot shift another stream's draws.
enum : std::uint64_t {
  kTagCrp = 1,
  kTagMeans = 2,
  kTagNoise = 3,
  kTagDistractorChoice = 4,
  kTagDistractorNoise = 5,
  kTagDistractorMeans = 6,
  kTagShuffle = 7,
};

Eigen::VectorXd sphere_point(Rng& rng, int dim, double radius) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  double n = v.norm();
  if (n == 0.0) return sphere_point(rng, dim, radius);  // probability-zero retry
  return v * (radius / n);
}

// Random orthonormal directions via QR, column signs canonicalized.
Eigen::MatrixXd orthonormal_set(Rng& rng, int dim, int count) {
  Eigen::MatrixXd g(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < dim; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q.leftCols(count);
}

struct FrameSampler {
  const StreamConfig& cfg;
  Eigen::MatrixXd world;  // obs_dim x obs_dim orthogonal
  Rng noise;

  Frame make_frame(int t, std::int64_t context, std::int64_t label,
                   const Eigen::VectorXd& mean) {
    Eigen::VectorXd latent = mean;
    for (int i = 0; i < cfg.latent_dim; ++i) latent[i] += cfg.noise_latent * noise.normal();
    Eigen::VectorXd padded = Eigen::VectorXd::Zero(cfg.obs_dim);
    padded.head(cfg.latent_dim) = latent;
    Eigen::VectorXd base = world * padded;
    Frame f;
    f.t = t;
    f.context = context;
    f.label = label;
    f.features = base;
    f.view2 = base;
    for (int i = 0; i < cfg.obs_dim; ++i) f.features[i] += cfg.view_sigma * noise.normal();
    for (int i = 0; i < cfg.obs_dim; ++i) f.view2[i] += cfg.view_sigma * noise.normal();
    return f;
  }
};

}  // namespace

void validate_stream(const StreamConfig& cfg) {
  if (cfg.episode_len < 1) throw ValidationError("stream: episode_len must be >= 1");
  if (cfg.contexts < 1) throw ValidationError("stream: contexts must be >= 1");
  if (cfg.pool < 1) throw ValidationError("stream: pool must be >= 1");
  if (!(cfg.crp_theta > 0.0)) throw ValidationError("stream: crp_theta must be positive");
  if (cfg.latent_dim < 1 || cfg.obs_dim < 1) throw ValidationError("stream: dims must be >= 1");
  if (cfg.latent_dim > cfg.obs_dim)
    throw ValidationError("stream: latent_dim cannot exceed obs_dim");
  if (!(cfg.separation > 0.0)) throw ValidationError("stream: separation must be positive");
  if (cfg.noise_latent < 0.0 || cfg.view_sigma < 0.0)
    throw ValidationError("stream: noise scales must be non-negative");
  if (cfg.distractor_rate < 0.0 || cfg.distractor_rate > 1.0)
    throw ValidationError("stream: distractor_rate must lie in [0, 1]");
  if (cfg.distractor_pool < 1) throw ValidationError("stream: distractor_pool must be >= 1");
  if (cfg.queue_size < 1) throw ValidationError("stream: queue_size must be >= 1");
  if (cfg.means_mode == MeansMode::orthogonal && cfg.contexts * cfg.pool > cfg.latent_dim)
    throw ValidationError(
        "stream: orthogonal means need contexts * pool <= latent_dim class directions");
}

Eigen::MatrixXd world_transform(const StreamConfig& cfg) {
  Rng rng(cfg.world_seed);
  return orthonormal_set(rng, cfg.obs_dim, cfg.obs_dim);
}

Episode generate_episode(const StreamConfig& cfg, std::uint64_t seed, std::int64_t episode_index) {
  validate_stream(cfg);
  if (episode_index < 0) throw ValidationError("stream: episode_index must be >= 0");
  Rng crp(derive_seed(seed, kTagCrp));
  Rng means_rng(derive_seed(seed, kTagMeans));
  FrameSampler sampler{cfg, world_transform(cfg), Rng(derive_seed(seed, kTagNoise))};

  // All class directions this episode could need, drawn up front so the CRP
  // path taken cannot shift the mean draws.
  const int max_classes = cfg.contexts * cfg.pool;
  Eigen::MatrixXd means(cfg.latent_dim, max_classes);
  if (cfg.means_mode == MeansMode::orthogonal) {
    means = orthonormal_set(means_rng, cfg.latent_dim, max_classes) * cfg.separation;
  } else {
    for (int c = 0; c < max_classes; ++c)
      means.col(c) = sphere_point(means_rng, cfg.latent_dim, cfg.separation);
  }

  Episode ep;
  ep.reserve(static_cast<std::size_t>(cfg.episode_len));
  const int base_len = cfg.episode_len / cfg.contexts;
  const int remainder = cfg.episode_len % cfg.contexts;
  int t = 0;
  for (int e = 0; e < cfg.contexts; ++e) {
    const int block = base_len + (e < remainder ? 1 : 0);
    std::vector<int> counts;  // per used slot within this context
    for (int s = 0; s < block; ++s) {
      const double t_ctx = static_cast<double>(s);
      const double p_new = cfg.crp_theta / (t_ctx + cfg.crp_theta);
      const double u = crp.uniform();  // always consumed, even when forced
      int slot;
      if (static_cast<int>(counts.size()) < cfg.pool && u < p_new) {
        slot = static_cast<int>(counts.size());
        counts.push_back(0);
      } else {
        // Existing class proportional to its count; a second uniform walks
        // the cumulative occupancy.
        double target = crp.uniform() * t_ctx;
        slot = 0;
        double cum = static_cast<double>(counts[0]);
        while (slot + 1 < static_cast<int>(counts.size()) && target >= cum)
          cum += static_cast<double>(counts[static_cast<std::size_t>(++slot)]);
      }
      counts[static_cast<std::size_t>(slot)] += 1;
      const int class_index = e * cfg.pool + slot;
      const std::int64_t label =
          (episode_index * cfg.contexts + e) * static_cast<std::int64_t>(cfg.pool) + slot;
      ep.push_back(sampler.make_frame(t++, e, label, means.col(class_index)));
    }
  }
  return ep;
}

Episode inject_distractors(const Episode& ep, const StreamConfig& cfg, std::uint64_t seed) {
  validate_stream(cfg);
  if (cfg.distractor_rate == 0.0) return ep;
  Rng choice(derive_seed(seed, kTagDistractorChoice));
  FrameSampler sampler{cfg, world_transform(cfg), Rng(derive_seed(seed, kTagDistractorNoise))};
  // The distractor pool is a fixed property of the world, not of the episode.
  Rng pool_rng(derive_seed(cfg.world_seed, kTagDistractorMeans));
  Eigen::MatrixXd pool_means(cfg.latent_dim, cfg.distractor_pool);
  for (int c = 0; c < cfg.distractor_pool; ++c)
    pool_means.col(c) = sphere_point(pool_rng, cfg.latent_dim, cfg.separation);

  Episode out;
  out.reserve(ep.size());
  for (const Frame& f : ep) {
    if (choice.uniform() < cfg.distractor_rate) {
      auto pick = static_cast<int>(choice.below(static_cast<std::uint64_t>(cfg.distractor_pool)));
      out.push_back(sampler.make_frame(static_cast<int>(f.t), f.context,
                                       kDistractorLabelBase + pick, pool_means.col(pick)));
    } else {
      out.push_back(f);
    }
  }
  return out;
}

std::vector<Episode> iid_shuffle(const std::vector<Episode>& episodes, int queue_size,
                                 std::uint64_t seed) {
  if (queue_size < 1) throw ValidationError("iid_shuffle: queue_size must be >= 1");
  if (episodes.empty()) return {};
  const std::size_t target_len = episodes[0].size();
  if (target_len == 0) throw ValidationError("iid_shuffle: empty first episode");
  std::vector<Frame> source;
  for (const Episode& ep : episodes) source.insert(source.end(), ep.begin(), ep.end());

  Rng rng(derive_seed(seed, kTagShuffle));
  std::vector<Frame> buffer, out;
  out.reserve(source.size());
  std::size_t next = 0;
  while (next < source.size() && buffer.size() < static_cast<std::size_t>(queue_size))
    buffer.push_back(source[next++]);
  while (!buffer.empty()) {
    std::size_t pick = rng.below(buffer.size());
    out.push_back(buffer[pick]);
    if (next < source.size()) {
      buffer[pick] = source[next++];
    } else {
      buffer[pick] = buffer.back();
      buffer.pop_back();
    }
  }

  std::vector<Episode> result;
  for (std::size_t at = 0; at < out.size(); at += target_len) {
    Episode ep;
    const std::size_t end = std::min(out.size(), at + target_len);
    for (std::size_t i = at; i < end; ++i) {
      Frame f = out[i];
      f.t = static_cast<std::int64_t>(i - at);
      ep.push_back(std::move(f));
    }
    result.push_back(std::move(ep));
  }
  return result;
}

std::vector<Episode> generate_stream(const StreamConfig& cfg, std::uint64_t seed,
                                     std::int64_t n_episodes) {
  validate_stream(cfg);
  if (n_episodes < 0) throw ValidationError("stream: n_episodes must be >= 0");
  std::vector<Episode> eps;
  eps.reserve(static_cast<std::size_t>(n_episodes));
  for (std::int64_t i = 0; i < n_episodes; ++i) {
    std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    Episode ep = generate_episode(cfg, ep_seed, i);
    if (cfg.distractor_rate > 0.0) ep = inject_distractors(ep, cfg, ep_seed);
    eps.push_back(std::move(ep));
  }
  if (cfg.iid_shuffle) eps = iid_shuffle(eps, cfg.queue_size, seed);
  return eps;
}

}  // namespace protostream
