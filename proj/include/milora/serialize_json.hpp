// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON (de)serialization for ModelConfig and the enums it uses. Kept apart
// from the run-config loader so the checkpoint format only depends on this.

#include <json.hpp>

#include "milora/model.hpp"

namespace milora {

inline std::string to_string(GateMode m) { return gate_mode_name(m); }

inline GateMode gate_mode_from_string(const std::string& s) {
  if (s == "dense") return GateMode::Dense;
  if (s == "topm") return GateMode::TopM;
  if (s == "uniform") return GateMode::UniformConstant;
  throw ConfigError("unknown gate_mode: " + s);
}

inline std::string to_string(AttentionMode m) {
  return m == AttentionMode::ScoreBias ? "score_bias" : "projection_update";
}

inline AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "score_bias") return AttentionMode::ScoreBias;
  if (s == "projection_update") return AttentionMode::ProjectionUpdate;
  throw ConfigError("unknown attention_mode: " + s);
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  throw ConfigError("unknown activation: " + s);
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d", c.d},
                        {"frames", c.frames},
                        {"experts", c.experts},
                        {"rank_fraction", c.rank_fraction},
                        {"gate_mode", to_string(c.gate_mode)},
                        {"top_m", c.top_m},
                        {"attention_mode", to_string(c.attention_mode)},
                        {"c_in", c.c_in},
                        {"h", c.h},
                        {"w", c.w},
                        {"c_out", c.c_out},
                        {"kh", c.kh},
                        {"kw", c.kw},
                        {"activation", to_string(c.activation)},
                        {"cross_modal", c.cross_modal},
                        {"vocab", c.vocab},
                        {"summary_len", c.summary_len},
                        {"ffn_hidden", c.ffn_hidden},
                        {"seed", c.seed},
                        {"enable_temporal_adapter", c.enable_temporal_adapter},
                        {"enable_spatial_adapter", c.enable_spatial_adapter}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
  };
  get("d", c.d);
  get("frames", c.frames);
  get("experts", c.experts);
  get("rank_fraction", c.rank_fraction);
  if (j.contains("gate_mode")) c.gate_mode = gate_mode_from_string(j.at("gate_mode"));
  get("top_m", c.top_m);
  if (j.contains("attention_mode"))
    c.attention_mode = attention_mode_from_string(j.at("attention_mode"));
  get("c_in", c.c_in);
  get("h", c.h);
  get("w", c.w);
  get("c_out", c.c_out);
  get("kh", c.kh);
  get("kw", c.kw);
  if (j.contains("activation")) c.activation = activation_from_string(j.at("activation"));
  get("cross_modal", c.cross_modal);
  get("vocab", c.vocab);
  get("summary_len", c.summary_len);
  get("ffn_hidden", c.ffn_hidden);
  get("seed", c.seed);
  get("enable_temporal_adapter", c.enable_temporal_adapter);
  get("enable_spatial_adapter", c.enable_spatial_adapter);
  return c;
}

inline const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys = {
      "d", "frames", "experts", "rank_fraction", "gate_mode", "top_m",
      "attention_mode", "c_in", "h", "w", "c_out", "kh", "kw", "activation",
      "cross_modal", "vocab", "summary_len", "ffn_hidden", "seed",
      "enable_temporal_adapter", "enable_spatial_adapter"};
  return keys;
}

}  // namespace milora
