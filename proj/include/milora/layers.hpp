// SPDX-License-Identifier: Apache-2.0
#pragma once

// The adapted computation blocks: temporal attention with a low-rank score
// modulation, spatial convolution with a low-rank kernel update, an
// alignment-guided cross-modal attention block, and a learnable fusion gate.

#include <utility>

#include "milora/experts.hpp"

namespace milora {

enum class AttentionMode {
  ScoreBias,         // S = (Q K^T + X delta X^T) / sqrt(d)
  ProjectionUpdate,  // K' = X (W_k + delta), S = Q K'^T / sqrt(d)
};

enum class Activation { Identity, Relu, Gelu };

template <class T>
Var<T> apply_activation(Activation act, const Var<T>& x) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::Relu: return relu(x);
    case Activation::Gelu: return gelu(x);
  }
  throw ConfigError("unknown activation");
}

// ---------------------------------------------------------------------------
// Temporal attention with expert modulation
// ---------------------------------------------------------------------------

template <class T>
struct TemporalAttentionAdapter {
  Var<T> w_q, w_k, w_v;       // frozen [d x d] projections
  ExpertBank<T> bank;         // experts over [d x d]
  AttentionMode mode = AttentionMode::ScoreBias;
  bool enabled = true;        // disabled: behaves as the frozen base layer
};

// X is [t x d]; z is the gate input (mean-pooled layer input, [d]).
template <class T>
Var<T> temporal_forward(const TemporalAttentionAdapter<T>& adapter, const Var<T>& X,
                        const Var<T>& z) {
  const auto& xv = X.value();
  std::size_t d = adapter.w_q.value().dim(0);
  if (xv.ndim() != 2 || xv.dim(1) != d)
    throw ShapeError("temporal_forward: input " + shape_str(xv.shape()) +
                     " does not match feature dim " + std::to_string(d));
  T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  Var<T> q = matmul(X, adapter.w_q);
  Var<T> v = matmul(X, adapter.w_v);
  Var<T> scores;
  if (!adapter.enabled) {
    Var<T> k = matmul(X, adapter.w_k);
    scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  } else if (adapter.mode == AttentionMode::ScoreBias) {
    // The [d x d] expert delta is lifted to a [t x t] bilinear score bias.
    Var<T> k = matmul(X, adapter.w_k);
    Var<T> delta = delta_weight_var(adapter.bank, z);
    Var<T> bias = matmul(matmul(X, delta), transpose(X));
    scores = scale(add(matmul(q, transpose(k)), bias), inv_sqrt_d);
  } else {
    Var<T> k = matmul(X, add(adapter.w_k, delta_weight_var(adapter.bank, z)));
    scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  }
  return matmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// Spatial convolution with expert kernel update
// ---------------------------------------------------------------------------

template <class T>
struct SpatialConvAdapter {
  Var<T> kernel;       // frozen [c_out x c_in x kh x kw]
  ExpertBank<T> bank;  // experts over the flattened kernel [c_out x c_in*kh*kw]
  Activation activation = Activation::Identity;
  bool enabled = true;
};

// Frozen kernel plus the reshaped expert delta.
template <class T>
Var<T> adapted_kernel(const SpatialConvAdapter<T>& adapter, const Var<T>& z) {
  if (!adapter.enabled) return adapter.kernel;
  Var<T> delta = delta_weight_var(adapter.bank, z);
  return add(adapter.kernel, reshape(delta, adapter.kernel.value().shape()));
}

// X is one [c_in x h x w] feature map.
template <class T>
Var<T> spatial_forward(const SpatialConvAdapter<T>& adapter, const Var<T>& X,
                       const Var<T>& z) {
  return apply_activation(adapter.activation, conv2d(X, adapted_kernel(adapter, z)));
}

// ---------------------------------------------------------------------------
// Cross-modal attention (alignment-guided)
// ---------------------------------------------------------------------------

template <class T>
struct CrossModalBlock {
  Var<T> w_q;   // frozen [2d x d], applied to the concatenated streams
  Var<T> w_kv;  // frozen [d x d] video key projection
  Var<T> w_kt;  // frozen [d x d] text key projection
  Var<T> w_vv;  // frozen [d x d] video value projection
};

template <class T>
struct CrossModalResult {
  Var<T> scores;    // [t x t]
  Var<T> attended;  // [t x d]
};

// Both streams must be pre-aligned to the same [t x d] shape.
template <class T>
CrossModalResult<T> cross_modal_attention(const CrossModalBlock<T>& block,
                                          const Var<T>& x_video, const Var<T>& x_text) {
  const auto& va = x_video.value();
  const auto& ta = x_text.value();
  if (!va.same_shape(ta))
    throw ShapeError("cross_modal_attention: stream shapes differ " +
                     shape_str(va.shape()) + " vs " + shape_str(ta.shape()));
  std::size_t d = va.dim(1);
  T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  Var<T> q = matmul(concat_cols(x_video, x_text), block.w_q);
  Var<T> keys = add(matmul(x_video, block.w_kv), matmul(x_text, block.w_kt));
  Var<T> scores = softmax_rows(scale(matmul(q, transpose(keys)), inv_sqrt_d));
  Var<T> attended = matmul(scores, matmul(x_video, block.w_vv));
  return {scores, attended};
}

// ---------------------------------------------------------------------------
// Fusion gate: y = alpha * y_t + (1 - alpha) * y_s, alpha = sigmoid(a)
// ---------------------------------------------------------------------------

template <class T>
struct FusionGate {
  Var<T> logit;  // trainable scalar a

  T alpha() const {
    T a = logit.value()[0];
    return a >= T(0) ? T(1) / (T(1) + std::exp(-a))
                     : std::exp(a) / (T(1) + std::exp(a));
  }
};

template <class T>
Var<T> fuse(const FusionGate<T>& gate, const Var<T>& y_temporal,
            const Var<T>& y_spatial) {
  return convex_blend(sigmoid(gate.logit), y_temporal, y_spatial);
}

}  // namespace milora
