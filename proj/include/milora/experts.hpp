// SPDX-License-Identifier: Apache-2.0
#pragma once

// Banks of low-rank expert pairs combined by a gate. A bank adapts one
// frozen weight matrix: delta = sum_k g_k(z) * B_k A_k, where the gate
// weights g(z) live on the K-simplex. B matrices start at zero so a fresh
// bank leaves the adapted layer's function unchanged.

#include <optional>
#include <string>
#include <vector>

#include "milora/autograd.hpp"
#include "milora/tensor.hpp"

namespace milora {

enum class GateMode {
  Dense,            // softmax over all K experts
  TopM,             // keep the m largest logits, softmax over the kept set
  UniformConstant,  // fixed 1/K weights, no gate parameters
};

inline const char* gate_mode_name(GateMode m) {
  switch (m) {
    case GateMode::Dense: return "dense";
    case GateMode::TopM: return "topm";
    case GateMode::UniformConstant: return "uniform";
  }
  return "?";
}

struct RankPolicy {
  double fraction = 0.1;  // p in (0, 1]
};

// r = ceil(p * min(d_out, d_in)), never below 1 for p > 0.
inline std::size_t rank_for(const RankPolicy& policy, std::size_t d_out,
                            std::size_t d_in) {
  if (d_out == 0 || d_in == 0) throw ConfigError("rank_for: zero dimension");
  if (policy.fraction <= 0.0 || policy.fraction > 1.0)
    throw ConfigError("rank_for: fraction must be in (0,1], got " +
                      std::to_string(policy.fraction));
  double m = static_cast<double>(std::min(d_out, d_in));
  auto r = static_cast<std::size_t>(std::ceil(policy.fraction * m));
  return std::max<std::size_t>(r, 1);
}

template <class T>
struct LowRankPair {
  Var<T> b;  // [d_out x r], zero-initialized
  Var<T> a;  // [r x d_in], scaled uniform noise
  std::size_t rank = 0;
};

template <class T>
struct ExpertBank {
  std::vector<LowRankPair<T>> experts;
  Var<T> gate;  // [K x d_gate]; undefined in uniform-constant mode
  GateMode mode = GateMode::Dense;
  std::size_t top_m = 1;
  std::size_t d_out = 0, d_in = 0, d_gate = 0;

  std::size_t num_experts() const { return experts.size(); }
};

template <class T>
ExpertBank<T> init_expert_bank(std::size_t k, std::size_t d_out, std::size_t d_in,
                               const RankPolicy& policy, std::size_t d_gate,
                               GateMode mode, std::size_t top_m,
                               std::uint64_t seed,
                               const std::string& name_prefix = "bank") {
  if (k == 0) throw ConfigError("init_expert_bank: K must be >= 1");
  if (d_out == 0 || d_in == 0 || d_gate == 0)
    throw ConfigError("init_expert_bank: zero dimension");
  if (mode == GateMode::TopM && (top_m == 0 || top_m > k))
    throw ConfigError("init_expert_bank: top_m must be in [1, K], got " +
                      std::to_string(top_m));
  ExpertBank<T> bank;
  bank.mode = mode;
  bank.top_m = top_m;
  bank.d_out = d_out;
  bank.d_in = d_in;
  bank.d_gate = d_gate;
  std::size_t r = rank_for(policy, d_out, d_in);
  double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (std::size_t i = 0; i < k; ++i) {
    LowRankPair<T> pair;
    pair.rank = r;
    pair.b = Var<T>(Tensor<T>::zeros({d_out, r}), /*requires_grad=*/true);
    Rng rng = Rng::for_name(seed, name_prefix + ".expert" + std::to_string(i) + ".a");
    pair.a = Var<T>(rand_uniform<T>(rng, {r, d_in}, -bound, bound),
                    /*requires_grad=*/true);
    bank.experts.push_back(std::move(pair));
  }
  if (mode != GateMode::UniformConstant) {
    // Zero gate weights: every input starts with uniform gating.
    bank.gate = Var<T>(Tensor<T>::zeros({k, d_gate}), /*requires_grad=*/true);
  }
  return bank;
}

// Spec-shaped convenience overload: dense gating over a d_in-sized z.
template <class T>
ExpertBank<T> init_expert_bank(std::size_t k, std::size_t d_out, std::size_t d_in,
                               const RankPolicy& policy, std::uint64_t seed) {
  return init_expert_bank<T>(k, d_out, d_in, policy, d_in, GateMode::Dense, 1, seed);
}

namespace detail {

// Indices of the m largest logits, ties broken toward the lowest index.
template <class T>
std::vector<bool> top_m_mask(const Tensor<T>& logits, std::size_t m) {
  std::size_t k = logits.numel();
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b];
  });
  std::vector<bool> keep(k, false);
  for (std::size_t i = 0; i < m; ++i) keep[idx[i]] = true;
  return keep;
}

}  // namespace detail

// Graph version: differentiable wrt gate weights (on the kept set for top-m).
template <class T>
Var<T> gate_weights_var(const ExpertBank<T>& bank, const Var<T>& z) {
  std::size_t k = bank.num_experts();
  if (bank.mode == GateMode::UniformConstant) {
    return Var<T>(Tensor<T>::full({k}, T(1) / static_cast<T>(k)));
  }
  if (z.value().ndim() != 1 || z.value().dim(0) != bank.d_gate)
    throw ShapeError("gate_weights: z shape " + shape_str(z.value().shape()) +
                     " does not match gate dim " + std::to_string(bank.d_gate));
  Var<T> logits = matvec(bank.gate, z);
  if (bank.mode == GateMode::Dense) {
    return masked_softmax(logits, std::vector<bool>(k, true));
  }
  return masked_softmax(logits, detail::top_m_mask(logits.value(), bank.top_m));
}

// Plain evaluation, no graph.
template <class T>
Tensor<T> gate_weights(const ExpertBank<T>& bank, const Tensor<T>& z) {
  return gate_weights_var(bank, Var<T>(z)).value();
}

// delta = sum_k g_k(z) B_k A_k, shape [d_out x d_in].
template <class T>
Var<T> delta_weight_var(const ExpertBank<T>& bank, const Var<T>& z) {
  Var<T> g = gate_weights_var(bank, z);
  std::vector<Var<T>> products;
  products.reserve(bank.num_experts());
  for (const auto& e : bank.experts) products.push_back(matmul(e.b, e.a));
  return weighted_sum(products, g);
}

template <class T>
Tensor<T> delta_weight(const ExpertBank<T>& bank, const Tensor<T>& z) {
  return delta_weight_var(bank, Var<T>(z)).value();
}

template <class T>
void append_bank_params(const ExpertBank<T>& bank, const std::string& prefix,
                        std::vector<ParamRef<T>>& out) {
  for (std::size_t i = 0; i < bank.experts.size(); ++i) {
    out.push_back({prefix + ".expert" + std::to_string(i) + ".b", bank.experts[i].b});
    out.push_back({prefix + ".expert" + std::to_string(i) + ".a", bank.experts[i].a});
  }
  if (bank.gate.defined()) out.push_back({prefix + ".gate", bank.gate});
}

}  // namespace milora
