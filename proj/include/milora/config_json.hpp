// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: one JSON file covering model, training, data, and
// paths, plus dotted-path overrides (train.lr_max=1e-3). Unknown keys are
// rejected so typos fail loudly instead of silently using defaults.

#include <filesystem>
#include <fstream>

#include "milora/serialize_json.hpp"
#include "milora/synthdata.hpp"
#include "milora/train.hpp"

namespace milora {

struct DataConfig {
  std::size_t train_episodes = 64;
  std::size_t val_episodes = 32;
  std::size_t pretrain_episodes = 64;
  std::uint64_t seed = 7;
  double noise_std = 1.0;
  double marker_scale = 3.0;
  std::size_t salient_min = 1, salient_max = 3;
  std::size_t temporal_only_min = 1, temporal_only_max = 3;
  std::size_t spatial_only_min = 1, spatial_only_max = 3;
  std::size_t min_gap = 3;

  GenConfig to_gen(const ModelConfig& mc) const {
    GenConfig g;
    g.frames = mc.frames;
    g.d = mc.d;
    g.h = mc.h;
    g.w = mc.w;
    g.noise_std = noise_std;
    g.marker_scale = marker_scale;
    g.salient_min = salient_min;
    g.salient_max = salient_max;
    g.temporal_only_min = temporal_only_min;
    g.temporal_only_max = temporal_only_max;
    g.spatial_only_min = spatial_only_min;
    g.spatial_only_max = spatial_only_max;
    g.min_gap = min_gap;
    return g;
  }
};

struct PathsConfig {
  std::string out_dir = "runs";
};

// Dataset split seeds derived from one data seed; shared by the CLI and any
// harness that needs to regenerate the same held-out split.
inline std::uint64_t val_split_seed(std::uint64_t data_seed) {
  return splitmix64(data_seed ^ 0x56414Cull);
}
inline std::uint64_t pretrain_split_seed(std::uint64_t data_seed) {
  return splitmix64(data_seed ^ 0x505245ull);
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  PathsConfig paths;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& allowed,
                                const std::string& section) {
  if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("config: unknown key '" + section + "." + key + "'");
  }
}

inline const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys = {
      "lambda_temporal", "lambda_spatial", "lambda_gate", "lr_max", "lr_min",
      "warmup_fraction", "batch_size", "max_epochs", "patience", "clip_norm",
      "beta1", "beta2", "eps", "seed", "importance_threshold",
      "pretrain_enabled", "pretrain_fraction", "max_steps"};
  return keys;
}

inline const std::vector<std::string>& data_config_keys() {
  static const std::vector<std::string> keys = {
      "train_episodes", "val_episodes", "pretrain_episodes", "seed", "noise_std",
      "marker_scale", "salient_min", "salient_max", "temporal_only_min",
      "temporal_only_max", "spatial_only_min", "spatial_only_max", "min_gap"};
  return keys;
}

template <class Field>
void assign(const nlohmann::json& j, const char* key, Field& field) {
  if (j.contains(key)) field = j.at(key).template get<Field>();
}

}  // namespace detail

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  bool lr_min_given = j.contains("lr_min");
  detail::assign(j, "lambda_temporal", c.lambda_temporal);
  // Default gate coefficient follows the temporal one unless set explicitly.
  if (!j.contains("lambda_gate")) c.lambda_gate = c.lambda_temporal;
  detail::assign(j, "lambda_spatial", c.lambda_spatial);
  detail::assign(j, "lambda_gate", c.lambda_gate);
  detail::assign(j, "lr_max", c.lr_max);
  detail::assign(j, "lr_min", c.lr_min);
  if (!lr_min_given) c.lr_min = 0.01 * c.lr_max;
  detail::assign(j, "warmup_fraction", c.warmup_fraction);
  detail::assign(j, "batch_size", c.batch_size);
  detail::assign(j, "max_epochs", c.max_epochs);
  detail::assign(j, "patience", c.patience);
  detail::assign(j, "clip_norm", c.clip_norm);
  detail::assign(j, "beta1", c.adam.beta1);
  detail::assign(j, "beta2", c.adam.beta2);
  detail::assign(j, "eps", c.adam.eps);
  detail::assign(j, "seed", c.seed);
  detail::assign(j, "importance_threshold", c.importance_threshold);
  detail::assign(j, "pretrain_enabled", c.pretrain_enabled);
  detail::assign(j, "pretrain_fraction", c.pretrain_fraction);
  detail::assign(j, "max_steps", c.max_steps);
  return c;
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig c;
  detail::assign(j, "train_episodes", c.train_episodes);
  detail::assign(j, "val_episodes", c.val_episodes);
  detail::assign(j, "pretrain_episodes", c.pretrain_episodes);
  detail::assign(j, "seed", c.seed);
  detail::assign(j, "noise_std", c.noise_std);
  detail::assign(j, "marker_scale", c.marker_scale);
  detail::assign(j, "salient_min", c.salient_min);
  detail::assign(j, "salient_max", c.salient_max);
  detail::assign(j, "temporal_only_min", c.temporal_only_min);
  detail::assign(j, "temporal_only_max", c.temporal_only_max);
  detail::assign(j, "spatial_only_min", c.spatial_only_min);
  detail::assign(j, "spatial_only_max", c.spatial_only_max);
  detail::assign(j, "min_gap", c.min_gap);
  return c;
}

inline RunConfig run_config_from_json(nlohmann::json j) {
  detail::reject_unknown_keys(j, {"model", "train", "data", "paths"}, "(root)");
  RunConfig rc;
  if (j.contains("model")) {
    detail::reject_unknown_keys(j.at("model"), model_config_keys(), "model");
    rc.model = model_config_from_json(j.at("model"));
  }
  if (j.contains("train")) {
    detail::reject_unknown_keys(j.at("train"), detail::train_config_keys(), "train");
    rc.train = train_config_from_json(j.at("train"));
  }
  if (j.contains("data")) {
    detail::reject_unknown_keys(j.at("data"), detail::data_config_keys(), "data");
    rc.data = data_config_from_json(j.at("data"));
  }
  if (j.contains("paths")) {
    detail::reject_unknown_keys(j.at("paths"), {"out_dir"}, "paths");
    if (j.at("paths").contains("out_dir"))
      rc.paths.out_dir = j.at("paths").at("out_dir").get<std::string>();
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

// Applies "a.b.c=value" into the JSON tree. Values parse as JSON scalars
// where possible and fall back to strings.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like section.key=value: " + spec);
  std::string path = spec.substr(0, eq);
  std::string raw = spec.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // unquoted string
  }
  nlohmann::json* cursor = &j;
  std::size_t start = 0;
  while (true) {
    std::size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("bad override path: " + path);
    if (dot == std::string::npos) {
      (*cursor)[key] = value;
      break;
    }
    cursor = &(*cursor)[key];
    start = dot + 1;
  }
}

// Master seed fan-out: one --seed flag reseeds model, data, and shuffling.
inline void apply_master_seed(nlohmann::json& j, std::uint64_t seed) {
  j["model"]["seed"] = seed;
  j["data"]["seed"] = splitmix64(seed ^ 1);
  j["train"]["seed"] = splitmix64(seed ^ 2);
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoError::Kind::NotFound, "config not found: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Episode manifest: labeled evaluation data referencing feature files.
// { "episodes": [ { "features": "ep0.mlft", "importance": [0,1,...],
//                   "summary_tokens": [5,9] }, ... ] }
// ---------------------------------------------------------------------------
template <class T>
std::vector<Episode<T>> load_manifest(const std::filesystem::path& path) {
  nlohmann::json j = load_json_file(path);
  detail::reject_unknown_keys(j, {"episodes"}, "(manifest)");
  if (!j.contains("episodes") || !j.at("episodes").is_array())
    throw ConfigError("manifest: missing 'episodes' array");
  std::vector<Episode<T>> out;
  std::filesystem::path base = path.parent_path();
  for (const auto& entry : j.at("episodes")) {
    detail::reject_unknown_keys(entry, {"features", "importance", "summary_tokens"},
                                "episodes[]");
    Episode<T> ep;
    std::filesystem::path feat = entry.at("features").get<std::string>();
    if (feat.is_relative()) feat = base / feat;
    ep.frames = read_features<T>(feat);
    ep.importance = entry.at("importance").get<std::vector<int>>();
    if (ep.importance.size() != ep.frames.dim(0))
      throw ConfigError("manifest: importance length does not match frames");
    if (entry.contains("summary_tokens"))
      ep.summary_tokens = entry.at("summary_tokens").get<std::vector<std::size_t>>();
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace milora
