// SPDX-License-Identifier: Apache-2.0
#pragma once

// Assembles the frozen backbone and the expert adapters into one pipeline:
// temporal attention -> output/feed-forward block -> per-frame spatial
// convolution -> fusion -> (importance head, token head). Owns the parameter
// registry that drives training, accounting, and persistence.

#include <optional>
#include <string>
#include <vector>

#include "milora/layers.hpp"

namespace milora {

struct ModelConfig {
  std::size_t d = 64;          // feature dim; must equal c_in*h*w
  std::size_t frames = 32;     // frames per episode
  std::size_t experts = 4;     // K
  double rank_fraction = 0.1;  // p
  GateMode gate_mode = GateMode::Dense;
  std::size_t top_m = 2;
  AttentionMode attention_mode = AttentionMode::ScoreBias;
  std::size_t c_in = 1, h = 8, w = 8;
  std::size_t c_out = 4, kh = 3, kw = 3;
  Activation activation = Activation::Gelu;
  bool cross_modal = false;
  std::size_t vocab = 64;
  std::size_t summary_len = 8;  // token head positions
  std::size_t ffn_hidden = 256;
  std::uint64_t seed = 42;
  bool enable_temporal_adapter = true;
  bool enable_spatial_adapter = true;

  std::size_t conv_h_out() const { return h - kh + 1; }
  std::size_t conv_w_out() const { return w - kw + 1; }
  std::size_t conv_flat() const { return c_out * conv_h_out() * conv_w_out(); }
  std::size_t kernel_flat_in() const { return c_in * kh * kw; }

  void validate() const {
    auto positive = [](std::size_t v, const char* field) {
      if (v == 0) throw ConfigError(std::string("config: ") + field + " must be positive");
    };
    positive(d, "d");
    positive(frames, "frames");
    if (experts == 0) throw ConfigError("config: experts (K) must be >= 1");
    positive(c_in, "c_in");
    positive(h, "h");
    positive(w, "w");
    positive(c_out, "c_out");
    positive(kh, "kh");
    positive(kw, "kw");
    positive(vocab, "vocab");
    positive(summary_len, "summary_len");
    positive(ffn_hidden, "ffn_hidden");
    if (c_in * h * w != d)
      throw ConfigError("config: c_in*h*w (" + std::to_string(c_in * h * w) +
                        ") must equal d (" + std::to_string(d) + ")");
    if (kh > h || kw > w) throw ConfigError("config: kernel larger than spatial input");
    if (rank_fraction <= 0.0 || rank_fraction > 1.0)
      throw ConfigError("config: rank_fraction must be in (0,1]");
    if (gate_mode == GateMode::TopM && (top_m == 0 || top_m > experts))
      throw ConfigError("config: top_m must be in [1, K]");
  }
};

// One registry entry per parameter tensor; order is fixed and identical to
// the checkpoint layout.
template <class T>
struct ParamEntry {
  std::string name;
  Var<T> var;
  bool trainable = false;
};

struct TensorSpec {
  std::string name;
  Shape shape;
  bool trainable = false;

  std::size_t count() const { return shape_numel(shape); }
};

// Expected tensor inventory, derived from the config by pure arithmetic.
// Build and census must stay in lockstep; tests compare them entry by entry.
inline std::vector<TensorSpec> param_census(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<TensorSpec> specs;
  auto frozen = [&](std::string name, Shape s) { specs.push_back({std::move(name), std::move(s), false}); };
  auto train = [&](std::string name, Shape s) { specs.push_back({std::move(name), std::move(s), true}); };

  frozen("backbone.pos_emb", {cfg.frames, cfg.d});
  frozen("backbone.attn.w_q", {cfg.d, cfg.d});
  frozen("backbone.attn.w_k", {cfg.d, cfg.d});
  frozen("backbone.attn.w_v", {cfg.d, cfg.d});
  frozen("backbone.attn.w_o", {cfg.d, cfg.d});
  frozen("backbone.ffn.w1", {cfg.d, cfg.ffn_hidden});
  frozen("backbone.ffn.b1", {cfg.ffn_hidden});
  frozen("backbone.ffn.w2", {cfg.ffn_hidden, cfg.d});
  frozen("backbone.ffn.b2", {cfg.d});
  frozen("backbone.conv.kernel", {cfg.c_out, cfg.c_in, cfg.kh, cfg.kw});
  frozen("backbone.spatial_proj", {cfg.conv_flat(), cfg.d});
  if (cfg.cross_modal) {
    frozen("backbone.cm.w_q", {2 * cfg.d, cfg.d});
    frozen("backbone.cm.w_kv", {cfg.d, cfg.d});
    frozen("backbone.cm.w_kt", {cfg.d, cfg.d});
    frozen("backbone.cm.w_vv", {cfg.d, cfg.d});
  }

  RankPolicy policy{cfg.rank_fraction};
  if (cfg.enable_temporal_adapter) {
    std::size_t r = rank_for(policy, cfg.d, cfg.d);
    for (std::size_t i = 0; i < cfg.experts; ++i) {
      train("temporal.expert" + std::to_string(i) + ".b", {cfg.d, r});
      train("temporal.expert" + std::to_string(i) + ".a", {r, cfg.d});
    }
    if (cfg.gate_mode != GateMode::UniformConstant)
      train("temporal.gate", {cfg.experts, cfg.d});
  }
  if (cfg.enable_spatial_adapter) {
    std::size_t r = rank_for(policy, cfg.c_out, cfg.kernel_flat_in());
    for (std::size_t i = 0; i < cfg.experts; ++i) {
      train("spatial.expert" + std::to_string(i) + ".b", {cfg.c_out, r});
      train("spatial.expert" + std::to_string(i) + ".a", {r, cfg.kernel_flat_in()});
    }
    if (cfg.gate_mode != GateMode::UniformConstant)
      train("spatial.gate", {cfg.experts, cfg.d});
  }
  train("fusion.logit", {1});
  train("head.importance.w", {cfg.d, 1});
  train("head.importance.b", {1});
  train("head.token.queries", {cfg.summary_len, cfg.d});
  train("head.token.w", {cfg.d, cfg.vocab});
  train("head.token.b", {cfg.vocab});
  if (cfg.cross_modal) train("text.embedding", {cfg.vocab, cfg.d});
  return specs;
}

// Exact integer accounting before the final division.
inline double trainable_fraction(const ModelConfig& cfg) {
  std::size_t trainable = 0, total = 0;
  for (const auto& s : param_census(cfg)) {
    total += s.count();
    if (s.trainable) trainable += s.count();
  }
  return static_cast<double>(trainable) / static_cast<double>(total);
}

template <class T>
struct ForwardGraph {
  Var<T> fused;              // [frames x d]
  Var<T> importance_logits;  // [frames]
  Var<T> importance;         // [frames], sigmoid outputs
  Var<T> token_logits;       // [summary_len x vocab]
};

template <class T>
struct SummaryOutput {
  Tensor<T> importance;      // [frames]
  Tensor<T> summary_logits;  // [summary_len x vocab]
  Tensor<T> fused;           // [frames x d]
};

template <class T>
class Model {
 public:
  static Model build(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;

    // Backbone init gains. Attention projections are drawn small so the
    // frozen score matrix mixes mildly; value/output/ffn paths preserve
    // activation variance.
    const double attn_gain = 0.7;
    const double sqrt_d = std::sqrt(static_cast<double>(cfg.d));

    auto draw_frozen = [&](const std::string& name, Shape shape, double sigma) {
      Rng rng = Rng::for_name(cfg.seed, name);
      Var<T> v(randn<T>(rng, std::move(shape), sigma), /*requires_grad=*/false);
      m.params_.push_back({name, v, false});
      return v;
    };
    // Value/output projections are drawn around the identity: a pretrained
    // backbone preserves its input features, and the per-frame channel
    // layout must survive for the spatial path to mean anything.
    auto draw_frozen_near_identity = [&](const std::string& name, std::size_t dim,
                                         double sigma) {
      Rng rng = Rng::for_name(cfg.seed, name);
      Tensor<T> t = randn<T>(rng, {dim, dim}, sigma);
      for (std::size_t i = 0; i < dim; ++i) t(i, i) += T(1);
      Var<T> v(std::move(t), /*requires_grad=*/false);
      m.params_.push_back({name, v, false});
      return v;
    };
    auto draw_train = [&](const std::string& name, Shape shape, double sigma) {
      Rng rng = Rng::for_name(cfg.seed, name);
      Var<T> v(randn<T>(rng, std::move(shape), sigma), /*requires_grad=*/true);
      m.params_.push_back({name, v, true});
      return v;
    };

    m.pos_emb_ = draw_frozen("backbone.pos_emb", {cfg.frames, cfg.d}, 1.0);
    m.temporal_.w_q = draw_frozen("backbone.attn.w_q", {cfg.d, cfg.d}, attn_gain / sqrt_d);
    m.temporal_.w_k = draw_frozen("backbone.attn.w_k", {cfg.d, cfg.d}, attn_gain / sqrt_d);
    m.temporal_.w_v = draw_frozen_near_identity("backbone.attn.w_v", cfg.d, 0.3 / sqrt_d);
    m.w_o_ = draw_frozen_near_identity("backbone.attn.w_o", cfg.d, 0.3 / sqrt_d);
    m.ffn_w1_ = draw_frozen("backbone.ffn.w1", {cfg.d, cfg.ffn_hidden}, 1.0 / sqrt_d);
    m.ffn_b1_ = draw_frozen("backbone.ffn.b1", {cfg.ffn_hidden}, 0.02);
    m.ffn_w2_ = draw_frozen("backbone.ffn.w2", {cfg.ffn_hidden, cfg.d},
                            1.0 / std::sqrt(static_cast<double>(cfg.ffn_hidden)));
    m.ffn_b2_ = draw_frozen("backbone.ffn.b2", {cfg.d}, 0.02);
    m.spatial_.kernel = draw_frozen("backbone.conv.kernel", {cfg.c_out, cfg.c_in, cfg.kh, cfg.kw},
                                    1.0 / std::sqrt(static_cast<double>(cfg.kernel_flat_in())));
    m.spatial_proj_ = draw_frozen("backbone.spatial_proj", {cfg.conv_flat(), cfg.d},
                                  1.0 / std::sqrt(static_cast<double>(cfg.conv_flat())));
    if (cfg.cross_modal) {
      CrossModalBlock<T> cm;
      cm.w_q = draw_frozen("backbone.cm.w_q", {2 * cfg.d, cfg.d},
                           1.0 / std::sqrt(2.0 * static_cast<double>(cfg.d)));
      cm.w_kv = draw_frozen("backbone.cm.w_kv", {cfg.d, cfg.d}, 1.0 / sqrt_d);
      cm.w_kt = draw_frozen("backbone.cm.w_kt", {cfg.d, cfg.d}, 1.0 / sqrt_d);
      cm.w_vv = draw_frozen("backbone.cm.w_vv", {cfg.d, cfg.d}, 1.0 / sqrt_d);
      m.cross_modal_ = cm;
    }

    RankPolicy policy{cfg.rank_fraction};
    auto register_bank = [&](const ExpertBank<T>& bank, const std::string& prefix) {
      for (std::size_t i = 0; i < bank.experts.size(); ++i) {
        m.params_.push_back({prefix + ".expert" + std::to_string(i) + ".b",
                             bank.experts[i].b, true});
        m.params_.push_back({prefix + ".expert" + std::to_string(i) + ".a",
                             bank.experts[i].a, true});
      }
      if (bank.gate.defined()) m.params_.push_back({prefix + ".gate", bank.gate, true});
    };
    m.temporal_.mode = cfg.attention_mode;
    m.temporal_.enabled = cfg.enable_temporal_adapter;
    if (cfg.enable_temporal_adapter) {
      m.temporal_.bank = init_expert_bank<T>(cfg.experts, cfg.d, cfg.d, policy, cfg.d,
                                             cfg.gate_mode, cfg.top_m, cfg.seed, "temporal");
      register_bank(m.temporal_.bank, "temporal");
    }
    m.spatial_.activation = cfg.activation;
    m.spatial_.enabled = cfg.enable_spatial_adapter;
    if (cfg.enable_spatial_adapter) {
      m.spatial_.bank = init_expert_bank<T>(cfg.experts, cfg.c_out, cfg.kernel_flat_in(),
                                            policy, cfg.d, cfg.gate_mode, cfg.top_m,
                                            cfg.seed, "spatial");
      register_bank(m.spatial_.bank, "spatial");
    }

    m.fusion_.logit = Var<T>(Tensor<T>::zeros({1}), /*requires_grad=*/true);
    m.params_.push_back({"fusion.logit", m.fusion_.logit, true});
    m.imp_w_ = draw_train("head.importance.w", {cfg.d, 1}, 0.5 / sqrt_d);
    m.imp_b_ = draw_train("head.importance.b", {1}, 0.02);
    m.tok_queries_ = draw_train("head.token.queries", {cfg.summary_len, cfg.d}, 1.0);
    m.tok_w_ = draw_train("head.token.w", {cfg.d, cfg.vocab}, 0.5 / sqrt_d);
    m.tok_b_ = draw_train("head.token.b", {cfg.vocab}, 0.02);
    if (cfg.cross_modal)
      m.text_embedding_ = draw_train("text.embedding", {cfg.vocab, cfg.d}, 0.5);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<ParamEntry<T>>& params() { return params_; }
  const std::vector<ParamEntry<T>>& params() const { return params_; }

  const ParamEntry<T>* find(const std::string& name) const {
    for (const auto& e : params_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::vector<ParamRef<T>> trainable_params() const {
    std::vector<ParamRef<T>> out;
    for (const auto& e : params_)
      if (e.trainable) out.push_back({e.name, e.var});
    return out;
  }

  double trainable_fraction() const {
    std::size_t trainable = 0, total = 0;
    for (const auto& e : params_) {
      total += e.var.value().numel();
      if (e.trainable) trainable += e.var.value().numel();
    }
    return static_cast<double>(trainable) / static_cast<double>(total);
  }

  // Full differentiable pipeline. `text_tokens` feeds the optional
  // cross-modal stage; `use_adapters=false` runs the frozen backbone alone.
  ForwardGraph<T> forward_graph(const Tensor<T>& frames,
                                const std::vector<std::size_t>* text_tokens = nullptr,
                                bool use_adapters = true) const {
    const ModelConfig& c = cfg_;
    if (frames.ndim() != 2 || frames.dim(0) != c.frames || frames.dim(1) != c.d)
      throw ShapeError("forward: frames " + shape_str(frames.shape()) +
                       " do not match config [" + std::to_string(c.frames) + "x" +
                       std::to_string(c.d) + "]");
    T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(c.d));

    Var<T> x = add(Var<T>(frames), pos_emb_);

    // Temporal block
    TemporalAttentionAdapter<T> temporal = temporal_;
    temporal.enabled = temporal_.enabled && use_adapters;
    Var<T> z_t = mean_axis0(x);
    Var<T> attn = temporal_forward(temporal, x, z_t);
    Var<T> u = matmul(attn, w_o_);
    Var<T> hidden = gelu(add_rowvec(matmul(u, ffn_w1_), ffn_b1_));
    Var<T> y_t = add(u, add_rowvec(matmul(hidden, ffn_w2_), ffn_b2_));

    if (c.cross_modal) {
      Var<T> x_text = embed_text(text_tokens);
      y_t = cross_modal_attention(*cross_modal_, y_t, x_text).attended;
    }

    // Spatial block: adapted kernel computed once, applied per frame.
    SpatialConvAdapter<T> spatial = spatial_;
    spatial.enabled = spatial_.enabled && use_adapters;
    Var<T> z_s = mean_axis0(y_t);
    Var<T> kernel = adapted_kernel(spatial, z_s);
    std::vector<Var<T>> spatial_rows;
    spatial_rows.reserve(c.frames);
    for (std::size_t t = 0; t < c.frames; ++t) {
      Var<T> frame = reshape(row(y_t, t), {c.c_in, c.h, c.w});
      Var<T> conv = apply_activation(c.activation, conv2d(frame, kernel));
      Var<T> flat = reshape(conv, {std::size_t(1), c.conv_flat()});
      spatial_rows.push_back(matmul(flat, spatial_proj_));
    }
    Var<T> y_s = stack_rows(spatial_rows);

    Var<T> fused = fuse(fusion_, y_t, y_s);

    ForwardGraph<T> out;
    out.fused = fused;
    Var<T> imp = add_rowvec(matmul(fused, imp_w_), imp_b_);
    out.importance_logits = reshape(imp, {c.frames});
    out.importance = sigmoid(out.importance_logits);

    std::vector<Var<T>> pooled;
    pooled.reserve(c.summary_len);
    for (std::size_t j = 0; j < c.summary_len; ++j) {
      Var<T> q = row(tok_queries_, j);
      Var<T> att = softmax_rows(scale(matmul(q, transpose(fused)), inv_sqrt_d));
      pooled.push_back(matmul(att, fused));
    }
    out.token_logits = add_rowvec(matmul(stack_rows(pooled), tok_w_), tok_b_);
    return out;
  }

  SummaryOutput<T> forward_summary(const Tensor<T>& frames,
                                   const std::vector<std::size_t>* text_tokens = nullptr,
                                   bool use_adapters = true) const {
    ForwardGraph<T> g = forward_graph(frames, text_tokens, use_adapters);
    return {g.importance.value(), g.token_logits.value(), g.fused.value()};
  }

  // Greedy per-position decode with pad/eos stripped.
  std::vector<int> decode_summary(const Tensor<T>& logits) const {
    std::vector<int> tokens;
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.dim(1); ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (best >= 2) tokens.push_back(static_cast<int>(best));
    }
    return tokens;
  }

  const TemporalAttentionAdapter<T>& temporal_adapter() const { return temporal_; }
  const SpatialConvAdapter<T>& spatial_adapter() const { return spatial_; }
  const FusionGate<T>& fusion_gate() const { return fusion_; }

 private:
  Var<T> embed_text(const std::vector<std::size_t>* tokens) const {
    const ModelConfig& c = cfg_;
    // Align token embeddings to the frame count by cyclic repetition; an
    // absent or empty stream falls back to the pad token.
    std::vector<Var<T>> rows;
    rows.reserve(c.frames);
    for (std::size_t t = 0; t < c.frames; ++t) {
      std::size_t tok = 0;
      if (tokens && !tokens->empty()) tok = (*tokens)[t % tokens->size()];
      if (tok >= c.vocab) throw ConfigError("text token id out of vocab");
      rows.push_back(row(text_embedding_, tok));
    }
    return stack_rows(rows);
  }

  ModelConfig cfg_;
  std::vector<ParamEntry<T>> params_;

  Var<T> pos_emb_, w_o_, ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_, spatial_proj_;
  Var<T> imp_w_, imp_b_, tok_queries_, tok_w_, tok_b_, text_embedding_;
  TemporalAttentionAdapter<T> temporal_;
  SpatialConvAdapter<T> spatial_;
  FusionGate<T> fusion_;
  std::optional<CrossModalBlock<T>> cross_modal_;
};

}  // namespace milora
