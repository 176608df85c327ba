// SPDX-License-Identifier: Apache-2.0
#pragma once

// Adam with bias correction, global-norm gradient clipping, and the cosine
// learning-rate schedule with linear warm-up.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "milora/autograd.hpp"

namespace milora {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  // First/second moment per parameter name; populated lazily on first step.
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t step = 0;  // number of completed updates
};

struct ScheduleConfig {
  double lr_max = 3e-3;
  double lr_min = 3e-5;
  std::size_t total_steps = 0;
  double warmup_fraction = 0.10;

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(
        std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  }
};

// Linear ramp 0 -> lr_max over the warm-up span, then cosine decay from
// lr_max to lr_min over the remaining steps. Continuous at the boundary:
// the ramp reaches lr_max exactly where cos(0) starts the decay.
inline double lr_at_step(const ScheduleConfig& cfg, std::size_t t) {
  if (cfg.total_steps == 0) throw ConfigError("lr_at_step: total_steps is zero");
  if (cfg.lr_min > cfg.lr_max) throw ConfigError("lr_at_step: lr_min > lr_max");
  if (t > cfg.total_steps)
    throw ConfigError("lr_at_step: step " + std::to_string(t) + " beyond total " +
                      std::to_string(cfg.total_steps));
  std::size_t w = cfg.warmup_steps();
  if (t < w) {
    return cfg.lr_max * static_cast<double>(t) / static_cast<double>(w);
  }
  if (cfg.total_steps == w) return cfg.lr_max;
  double progress = static_cast<double>(t - w) / static_cast<double>(cfg.total_steps - w);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * progress));
}

// Global L2 norm over all gradients; scales every gradient by
// max_norm / norm when the norm exceeds max_norm. Returns the scale applied.
template <class T>
double clip_gradients(const std::vector<ParamRef<T>>& params, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.var.grad().data()) sq += static_cast<double>(g) * static_cast<double>(g);
  double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  double scale = max_norm / norm;
  for (const auto& p : params)
    for (T& g : p.var.grad().data()) g = static_cast<T>(static_cast<double>(g) * scale);
  return scale;
}

// One Adam update on a single tensor. `t` is the 1-based step index used for
// bias correction.
template <class T>
void adam_step_tensor(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m,
                      Tensor<T>& v, std::uint64_t t, double lr, const AdamConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
    throw ShapeError("adam_step: shape mismatch");
  if (t == 0) throw ConfigError("adam_step: step index must be >= 1");
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    double g = static_cast<double>(grad[i]);
    double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    double mhat = mi / bc1;
    double vhat = vi / bc2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) -
                              lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

// Applies one update across the trainable set, advancing the shared step
// counter. Parameters never listed here (frozen tensors) are never touched.
template <class T>
void adam_step(const std::vector<ParamRef<T>>& params, AdamState<T>& state,
               double lr, const AdamConfig& cfg) {
  state.step += 1;
  for (const auto& p : params) {
    auto [mit, inserted_m] = state.m.try_emplace(p.name, Tensor<T>::zeros(p.var.value().shape()));
    auto [vit, inserted_v] = state.v.try_emplace(p.name, Tensor<T>::zeros(p.var.value().shape()));
    adam_step_tensor(p.var.value(), p.var.grad(), mit->second, vit->second,
                     state.step, lr, cfg);
  }
}

}  // namespace milora
