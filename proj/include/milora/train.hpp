// SPDX-License-Identifier: Apache-2.0
#pragma once

// Composite loss, early stopping, evaluation, and the training driver.
// Batch order is a pure function of (seed, stage, epoch) so an interrupted
// run resumed from a checkpoint replays the exact step sequence.

#include <charconv>
#include <cstdio>
#include <functional>
#include <limits>

#include "milora/checkpoint.hpp"
#include "milora/metrics.hpp"
#include "milora/model.hpp"
#include "milora/optim.hpp"
#include "milora/synthdata.hpp"

namespace milora {

struct TrainConfig {
  double lambda_temporal = 1e-4;
  double lambda_spatial = 1e-4;
  double lambda_gate = 1e-4;
  double lr_max = 3e-3;
  double lr_min = 3e-5;  // default 0.01 * lr_max
  double warmup_fraction = 0.10;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;
  double clip_norm = 1.0;
  AdamConfig adam;
  std::uint64_t seed = 42;
  double importance_threshold = 0.5;
  bool pretrain_enabled = false;
  double pretrain_fraction = 0.20;  // share of the step budget, when enabled
  std::size_t max_steps = 0;        // 0 = epoch-bounded; used for resume tests

  void validate() const {
    if (lambda_temporal < 0 || lambda_spatial < 0 || lambda_gate < 0)
      throw ConfigError("train: regularization coefficients must be >= 0");
    if (lr_min > lr_max) throw ConfigError("train: lr_min > lr_max");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw ConfigError("train: warmup_fraction must be in [0,1)");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs == 0) throw ConfigError("train: max_epochs must be >= 1");
    if (clip_norm <= 0.0) throw ConfigError("train: clip_norm must be positive");
    if (pretrain_fraction < 0.0 || pretrain_fraction >= 1.0)
      throw ConfigError("train: pretrain_fraction must be in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// Composite loss
// ---------------------------------------------------------------------------

template <class T>
struct LossResult {
  Var<T> total;
  // Contributions that sum exactly to the total.
  std::map<std::string, double> terms;  // sum, reg_temporal, reg_spatial, reg_gate
  double bce = 0.0;                     // diagnostics within the sum term
  double token_ce = 0.0;
};

template <class T>
std::vector<std::size_t> padded_targets(const Episode<T>& ep, const ModelConfig& cfg) {
  std::vector<std::size_t> targets;
  targets.reserve(cfg.summary_len);
  for (std::size_t tok : ep.summary_tokens) {
    if (targets.size() + 1 >= cfg.summary_len) break;  // room for eos
    if (tok >= cfg.vocab)
      throw ConfigError("episode token " + std::to_string(tok) + " exceeds vocab");
    targets.push_back(tok);
  }
  targets.push_back(kEosToken);
  while (targets.size() < cfg.summary_len) targets.push_back(kPadToken);
  return targets;
}

template <class T>
LossResult<T> composite_loss(const Model<T>& model, const std::vector<Episode<T>>& batch,
                             const TrainConfig& cfg) {
  if (batch.empty()) throw ConfigError("composite_loss: empty batch");
  const ModelConfig& mc = model.config();
  Var<T> bce_total, ce_total;
  for (const Episode<T>& ep : batch) {
    std::vector<std::size_t> targets = padded_targets(ep, mc);
    ForwardGraph<T> fg = model.forward_graph(
        ep.frames, mc.cross_modal ? &targets : nullptr);
    std::vector<T> labels(ep.importance.begin(), ep.importance.end());
    Var<T> bce = bce_with_logits(fg.importance_logits, labels);
    Var<T> ce = cross_entropy_rows(fg.token_logits, targets);
    bce_total = bce_total.defined() ? add(bce_total, bce) : bce;
    ce_total = ce_total.defined() ? add(ce_total, ce) : ce;
  }
  T inv_b = T(1) / static_cast<T>(batch.size());
  Var<T> l_sum = scale(add(bce_total, ce_total), inv_b);

  auto bank_reg = [](const ExpertBank<T>& bank) -> Var<T> {
    Var<T> acc;
    for (const auto& e : bank.experts) {
      Var<T> term = add(frobenius_sq(e.b), frobenius_sq(e.a));
      acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
  };

  LossResult<T> out;
  out.bce = static_cast<double>(bce_total.value()[0]) / batch.size();
  out.token_ce = static_cast<double>(ce_total.value()[0]) / batch.size();
  Var<T> total = l_sum;
  out.terms["sum"] = static_cast<double>(l_sum.value()[0]);

  double reg_t = 0.0, reg_s = 0.0, reg_g = 0.0;
  if (model.temporal_adapter().enabled && cfg.lambda_temporal > 0.0) {
    Var<T> reg = scale(bank_reg(model.temporal_adapter().bank),
                       static_cast<T>(cfg.lambda_temporal));
    reg_t = static_cast<double>(reg.value()[0]);
    total = add(total, reg);
  }
  if (model.spatial_adapter().enabled && cfg.lambda_spatial > 0.0) {
    Var<T> reg = scale(bank_reg(model.spatial_adapter().bank),
                       static_cast<T>(cfg.lambda_spatial));
    reg_s = static_cast<double>(reg.value()[0]);
    total = add(total, reg);
  }
  if (cfg.lambda_gate > 0.0) {
    Var<T> gate_sq;
    auto add_gate = [&](const ExpertBank<T>& bank) {
      if (!bank.gate.defined()) return;
      Var<T> g = frobenius_sq(bank.gate);
      gate_sq = gate_sq.defined() ? add(gate_sq, g) : g;
    };
    if (model.temporal_adapter().enabled) add_gate(model.temporal_adapter().bank);
    if (model.spatial_adapter().enabled) add_gate(model.spatial_adapter().bank);
    if (gate_sq.defined()) {
      Var<T> reg = scale(gate_sq, static_cast<T>(cfg.lambda_gate));
      reg_g = static_cast<double>(reg.value()[0]);
      total = add(total, reg);
    }
  }
  out.terms["reg_temporal"] = reg_t;
  out.terms["reg_spatial"] = reg_s;
  out.terms["reg_gate"] = reg_g;
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Early stopping: strict improvement resets the counter.
// ---------------------------------------------------------------------------

struct EarlyStopState {
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale_epochs = 0;
};

struct EarlyStopDecision {
  bool improved = false;
  bool stop = false;
};

inline EarlyStopDecision early_stop_update(EarlyStopState& state, double score,
                                           std::size_t patience) {
  EarlyStopDecision d;
  if (score > state.best) {
    state.best = score;
    state.stale_epochs = 0;
    d.improved = true;
  } else {
    state.stale_epochs += 1;
    d.stop = state.stale_epochs >= patience;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double frame_f1 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;

  double val_score() const { return 0.5 * (frame_f1 + rouge_l); }
};

template <class T>
EvalResult evaluate(const Model<T>& model, const std::vector<Episode<T>>& episodes,
                    double threshold = 0.5) {
  if (episodes.empty()) throw ConfigError("evaluate: empty evaluation set");
  EvalResult acc;
  for (const Episode<T>& ep : episodes) {
    std::vector<std::size_t> targets = padded_targets(ep, model.config());
    SummaryOutput<T> out = model.forward_summary(
        ep.frames, model.config().cross_modal ? &targets : nullptr);
    acc.frame_f1 += frame_f1(out.importance, ep.importance, threshold);
    TokenSequence cand;
    for (int tok : model.decode_summary(out.summary_logits)) cand.push_back(tok);
    TokenSequence ref(ep.summary_tokens.begin(), ep.summary_tokens.end());
    acc.rouge1 += rouge_n(cand, ref, 1).f1;
    acc.rouge2 += rouge_n(cand, ref, 2).f1;
    acc.rouge_l += rouge_l(cand, ref).f1;
  }
  double n = static_cast<double>(episodes.size());
  acc.frame_f1 /= n;
  acc.rouge1 /= n;
  acc.rouge2 /= n;
  acc.rouge_l /= n;
  return acc;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::map<std::string, double> loss_terms;
  double val_f1 = 0.0;
  double val_rouge_l = 0.0;
  double lr = 0.0;
};

using History = std::vector<EpochRecord>;

template <class T>
struct TrainOutput {
  History history;
  TrainState state;
  AdamState<T> opt;
  EarlyStopState early_stop;
  bool stopped_early = false;
};

// Called after each epoch; `is_best` marks a strict validation improvement.
template <class T>
using EpochCallback = std::function<void(const Model<T>&, const AdamState<T>&,
                                         const TrainState&, const EpochRecord&,
                                         bool is_best)>;

// Reconstructs trainer state from a loaded checkpoint so training continues
// exactly where it stopped.
template <class T>
TrainOutput<T> resume_output(LoadedCheckpoint<T>& ck) {
  TrainOutput<T> out;
  out.state = ck.state;
  out.opt = std::move(ck.opt);
  if (ck.state.best_val > -1.0) out.early_stop.best = ck.state.best_val;
  out.early_stop.stale_epochs = ck.state.stale_epochs;
  return out;
}

namespace detail {

inline std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::uint64_t stage,
                                                  std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(splitmix64(seed ^ splitmix64(0xB0A710ADull + stage * 0x9E3779B9ull + epoch)));
  rng.shuffle(perm.begin(), perm.end());
  return perm;
}

}  // namespace detail

template <class T>
TrainOutput<T> train(Model<T>& model, const std::vector<Episode<T>>& train_set,
                     const std::vector<Episode<T>>& val_set, const TrainConfig& cfg,
                     const std::vector<Episode<T>>& pretrain_set = {},
                     TrainOutput<T> resume = {}, EpochCallback<T> on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (val_set.empty()) throw ConfigError("train: empty validation set");
  if (cfg.pretrain_enabled && pretrain_set.empty())
    throw ConfigError("train: pretraining enabled but no warm-start set given");

  auto batches_of = [&](const std::vector<Episode<T>>& set) {
    return (set.size() + cfg.batch_size - 1) / cfg.batch_size;
  };
  const std::size_t steps_per_epoch = batches_of(train_set);
  const std::size_t task_steps = cfg.max_epochs * steps_per_epoch;
  std::size_t stage1_steps = 0;
  if (cfg.pretrain_enabled) {
    stage1_steps = static_cast<std::size_t>(std::ceil(
        cfg.pretrain_fraction * static_cast<double>(task_steps) /
        (1.0 - cfg.pretrain_fraction)));
  }
  ScheduleConfig sched{cfg.lr_max, cfg.lr_min, stage1_steps + task_steps,
                       cfg.warmup_fraction};

  TrainOutput<T> out = std::move(resume);
  std::vector<ParamRef<T>> trainables = model.trainable_params();

  auto run_step = [&](const std::vector<Episode<T>>& set,
                      const std::vector<std::size_t>& perm, std::size_t batch_idx,
                      double& loss_acc, std::map<std::string, double>& term_acc) {
    std::vector<Episode<T>> batch;
    std::size_t lo = batch_idx * cfg.batch_size;
    std::size_t hi = std::min(lo + cfg.batch_size, set.size());
    for (std::size_t i = lo; i < hi; ++i) batch.push_back(set[perm[i]]);
    for (auto& p : trainables) p.var.zero_grad();
    LossResult<T> loss = composite_loss(model, batch, cfg);
    T value = loss.total.value()[0];
    if (!std::isfinite(static_cast<double>(value)))
      throw NumericError("training abort: non-finite loss at step " +
                         std::to_string(out.state.step));
    backward(loss.total);
    clip_gradients(trainables, cfg.clip_norm);
    double lr = lr_at_step(sched, std::min(out.state.step + 1, sched.total_steps));
    adam_step(trainables, out.opt, lr, cfg.adam);
    out.state.step += 1;
    loss_acc += static_cast<double>(value);
    for (const auto& [k, v] : loss.terms) term_acc[k] += v;
    return lr;
  };

  // Stage 1: optional warm start on the mixture, no early stopping.
  if (cfg.pretrain_enabled) {
    const std::size_t stage1_spe = batches_of(pretrain_set);
    while (out.state.step < stage1_steps) {
      if (cfg.max_steps && out.state.step >= cfg.max_steps) return out;
      std::size_t pos = out.state.step;
      std::size_t epoch = pos / stage1_spe;
      auto perm = detail::epoch_permutation(cfg.seed, 1, epoch, pretrain_set.size());
      double loss_acc = 0.0;
      std::map<std::string, double> term_acc;
      run_step(pretrain_set, perm, pos % stage1_spe, loss_acc, term_acc);
    }
  }

  // Stage 2: task fine-tuning with per-epoch validation.
  while (true) {
    if (out.state.step < stage1_steps) break;  // stage 1 hit max_steps
    std::size_t pos = out.state.step - stage1_steps;
    std::size_t epoch = pos / steps_per_epoch;
    if (epoch >= cfg.max_epochs) break;
    if (cfg.max_steps && out.state.step >= cfg.max_steps) break;

    auto perm = detail::epoch_permutation(cfg.seed, 2, epoch, train_set.size());
    double loss_acc = 0.0;
    std::map<std::string, double> term_acc;
    double last_lr = 0.0;
    std::size_t batches_done = 0;
    bool epoch_complete = true;
    for (std::size_t b = pos % steps_per_epoch; b < steps_per_epoch; ++b) {
      if (cfg.max_steps && out.state.step >= cfg.max_steps) {
        epoch_complete = false;
        break;
      }
      last_lr = run_step(train_set, perm, b, loss_acc, term_acc);
      ++batches_done;
    }
    if (!epoch_complete) break;

    EvalResult val = evaluate(model, val_set, cfg.importance_threshold);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / static_cast<double>(batches_done);
    for (auto& [k, v] : term_acc) rec.loss_terms[k] = v / static_cast<double>(batches_done);
    rec.val_f1 = val.frame_f1;
    rec.val_rouge_l = val.rouge_l;
    rec.lr = last_lr;
    out.history.push_back(rec);

    EarlyStopDecision decision =
        early_stop_update(out.early_stop, val.val_score(), cfg.patience);
    out.state.best_val = out.early_stop.best;
    out.state.stale_epochs = out.early_stop.stale_epochs;
    if (on_epoch) on_epoch(model, out.opt, out.state, rec, decision.improved);
    if (decision.stop) {
      out.stopped_early = true;
      break;
    }
  }
  return out;
}

// Shortest decimal form that round-trips; identical runs produce identical
// bytes.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// History serialization: one JSON object per line, keys in fixed order.
inline std::string history_line(const EpochRecord& rec) {
  auto num = [](double v) { return format_double(v); };
  std::string terms;
  for (const auto& [k, v] : rec.loss_terms) {
    if (!terms.empty()) terms += ",";
    terms += "\"" + k + "\":" + num(v);
  }
  return "{\"epoch\":" + std::to_string(rec.epoch) +
         ",\"train_loss\":" + num(rec.train_loss) + ",\"loss_terms\":{" + terms +
         "},\"val_f1\":" + num(rec.val_f1) + ",\"val_rouge_l\":" + num(rec.val_rouge_l) +
         ",\"lr\":" + num(rec.lr) + "}";
}

inline void write_history(const History& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoError::Kind::NotFound, "cannot open " + path.string());
  for (const auto& rec : history) out << history_line(rec) << "\n";
}

}  // namespace milora
