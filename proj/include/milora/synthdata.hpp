// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic synthetic episodes whose labels need both temporal and
// spatial evidence. A salient frame carries (i) a correlated additive bump
// across the frame and its successor in a fixed channel block and (ii) a
// fixed high-magnitude 2x2 patch in the frame's spatial reshape. Distractor
// frames carry exactly one of the two markers and are labeled 0.

#include <array>
#include <filesystem>
#include <limits>

#include "milora/io_util.hpp"

namespace milora {

struct GenConfig {
  std::size_t frames = 32;
  std::size_t d = 64;
  std::size_t h = 8, w = 8;  // spatial reshape of one frame (channel 0)
  double noise_std = 1.0;
  double marker_scale = 3.0;  // marker magnitude in units of noise_std
  std::size_t salient_min = 1, salient_max = 3;
  std::size_t temporal_only_min = 1, temporal_only_max = 3;
  std::size_t spatial_only_min = 1, spatial_only_max = 3;
  std::size_t min_gap = 3;  // marked frames never sit closer than this

  // Temporal marker block: the first quarter of the feature dims.
  std::size_t block_a_end() const { return std::max<std::size_t>(d / 4, 1); }

  // Spatial marker: 2x2 patch in channel 0 of the h x w reshape.
  std::array<std::size_t, 4> patch_cells() const {
    std::size_t r0 = std::min(h / 2, h - 2);
    std::size_t c0 = std::min(w / 2, w - 2);
    return {r0 * w + c0, r0 * w + c0 + 1, (r0 + 1) * w + c0, (r0 + 1) * w + c0 + 1};
  }

  void validate() const {
    if (d == 0 || frames == 0) throw ConfigError("gen: zero dimension");
    if (h < 2 || w < 2) throw ConfigError("gen: spatial grid must be at least 2x2");
    if (h * w > d) throw ConfigError("gen: h*w exceeds d");
    if (salient_min < 1) throw ConfigError("gen: at least one salient frame required");
    if (temporal_only_min < 1 || spatial_only_min < 1)
      throw ConfigError("gen: at least one distractor of each kind required");
    if (salient_max < salient_min || temporal_only_max < temporal_only_min ||
        spatial_only_max < spatial_only_min)
      throw ConfigError("gen: marker count range inverted");
    for (std::size_t cell : patch_cells()) {
      if (cell < block_a_end() || cell >= d)
        throw ConfigError("gen: patch cells collide with the temporal block");
    }
    // Worst case marker count must fit on the gap-separated grid of slots
    // [0, frames-2]; temporal markers also touch the successor frame.
    std::size_t worst = salient_max + temporal_only_max + spatial_only_max;
    if (frames < 2 || (worst - 1) * min_gap + 1 > frames - 1)
      throw ConfigError("gen: frames=" + std::to_string(frames) +
                        " too small for up to " + std::to_string(worst) +
                        " marked frames at gap " + std::to_string(min_gap));
  }
};

template <class T>
struct Episode {
  Tensor<T> frames;                        // [frames x d]
  std::vector<int> importance;             // 0/1 per frame
  std::vector<std::size_t> summary_tokens; // salient indices + 2, ascending
  std::uint64_t seed = 0;
  // Generator intent, exposed for diagnostics and oracle checks.
  std::vector<std::size_t> salient_frames;
  std::vector<std::size_t> temporal_only_frames;
  std::vector<std::size_t> spatial_only_frames;
};

template <class T>
Episode<T> generate_episode(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(splitmix64(seed ^ 0xE19A5C37B4D02F6Bull));

  auto draw_count = [&](std::size_t lo, std::size_t hi) {
    return lo + rng.below(hi - lo + 1);
  };
  std::size_t n_salient = draw_count(cfg.salient_min, cfg.salient_max);
  std::size_t n_temporal = draw_count(cfg.temporal_only_min, cfg.temporal_only_max);
  std::size_t n_spatial = draw_count(cfg.spatial_only_min, cfg.spatial_only_max);
  std::size_t n_total = n_salient + n_temporal + n_spatial;

  // Sample marked positions in [0, frames-2] with pairwise gaps >= min_gap.
  std::vector<std::size_t> slots(cfg.frames - 1);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  std::vector<std::size_t> marked;
  for (int attempt = 0; attempt < 64 && marked.size() < n_total; ++attempt) {
    rng.shuffle(slots.begin(), slots.end());
    marked.clear();
    for (std::size_t s : slots) {
      bool ok = true;
      for (std::size_t m : marked) {
        std::size_t gap = s > m ? s - m : m - s;
        if (gap < cfg.min_gap) { ok = false; break; }
      }
      if (ok) {
        marked.push_back(s);
        if (marked.size() == n_total) break;
      }
    }
  }
  if (marked.size() < n_total)
    throw ConfigError("gen: could not place " + std::to_string(n_total) +
                      " marked frames");
  rng.shuffle(marked.begin(), marked.end());

  Episode<T> ep;
  ep.seed = seed;
  ep.salient_frames.assign(marked.begin(), marked.begin() + n_salient);
  ep.temporal_only_frames.assign(marked.begin() + n_salient,
                                 marked.begin() + n_salient + n_temporal);
  ep.spatial_only_frames.assign(marked.begin() + n_salient + n_temporal, marked.end());
  std::sort(ep.salient_frames.begin(), ep.salient_frames.end());
  std::sort(ep.temporal_only_frames.begin(), ep.temporal_only_frames.end());
  std::sort(ep.spatial_only_frames.begin(), ep.spatial_only_frames.end());

  ep.frames = randn<T>(rng, {cfg.frames, cfg.d}, cfg.noise_std);
  ep.importance.assign(cfg.frames, 0);

  const T bump = static_cast<T>(cfg.marker_scale * cfg.noise_std);
  auto add_bump = [&](std::size_t t) {
    for (std::size_t j = 0; j < cfg.block_a_end(); ++j) {
      ep.frames(t, j) += bump;
      ep.frames(t + 1, j) += bump;
    }
  };
  auto set_patch = [&](std::size_t t) {
    for (std::size_t cell : cfg.patch_cells()) ep.frames(t, cell) = bump;
  };

  for (std::size_t t : ep.salient_frames) {
    add_bump(t);
    set_patch(t);
    ep.importance[t] = 1;
  }
  for (std::size_t t : ep.temporal_only_frames) add_bump(t);
  for (std::size_t t : ep.spatial_only_frames) set_patch(t);

  for (std::size_t t : ep.salient_frames) ep.summary_tokens.push_back(t + 2);
  return ep;
}

template <class T>
std::vector<Episode<T>> generate_dataset(const GenConfig& cfg, std::size_t count,
                                         std::uint64_t seed) {
  std::vector<Episode<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(generate_episode<T>(cfg, splitmix64(seed) + i));
  return out;
}

// Broad warm-start mixture: marker magnitude jittered per episode.
template <class T>
std::vector<Episode<T>> generate_mixture(const GenConfig& cfg, std::size_t count,
                                         std::uint64_t seed) {
  std::vector<Episode<T>> out;
  out.reserve(count);
  Rng rng(splitmix64(seed ^ 0x51AB2E96C07D843Full));
  for (std::size_t i = 0; i < count; ++i) {
    GenConfig jittered = cfg;
    jittered.marker_scale = cfg.marker_scale * rng.uniform(0.7, 1.3);
    out.push_back(generate_episode<T>(jittered, splitmix64(seed ^ 0xA5A5ull) + i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature file, little-endian:
//   magic "MLFT", version u32, T u64, d u64, dtype u8 (0 = f32),
//   row-major f32 payload, CRC32 trailer.
// ---------------------------------------------------------------------------

inline constexpr char kFeatureMagic[4] = {'M', 'L', 'F', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

template <class T>
void write_features(const std::filesystem::path& path, const Tensor<T>& frames) {
  if (frames.ndim() != 2)
    throw ShapeError("write_features: expected [frames x d], got " +
                     shape_str(frames.shape()));
  ByteWriter w;
  w.bytes(kFeatureMagic, 4);
  w.u32(kFeatureVersion);
  w.u64(frames.dim(0));
  w.u64(frames.dim(1));
  w.u8(0);
  for (T v : frames.data()) w.f32(static_cast<float>(v));
  w.append_crc();
  w.write_file(path);
}

template <class T>
Tensor<T> read_features(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kFeatureMagic, 4) != 0)
    throw IoError(IoError::Kind::BadMagic, "bad magic in " + path.string());
  std::uint32_t version = r.u32();
  if (version != kFeatureVersion)
    throw IoError(IoError::Kind::VersionMismatch,
                  "unsupported feature-file version " + std::to_string(version));
  std::uint64_t t = r.u64();
  std::uint64_t d = r.u64();
  if (t == 0 || d == 0)
    throw IoError(IoError::Kind::InvalidDims, "feature file with zero dims");
  if (d != 0 && t > (std::numeric_limits<std::uint64_t>::max() / d / sizeof(float)))
    throw IoError(IoError::Kind::InvalidDims, "feature dims overflow");
  std::uint8_t dtype = r.u8();
  if (dtype != 0)
    throw IoError(IoError::Kind::Malformed, "unsupported feature dtype " +
                                                std::to_string(dtype));
  Tensor<T> out(Shape{static_cast<std::size_t>(t), static_cast<std::size_t>(d)});
  for (auto& v : out.data()) v = static_cast<T>(r.f32());
  r.check_trailing_crc();
  return out;
}

}  // namespace milora
