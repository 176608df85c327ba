// SPDX-License-Identifier: Apache-2.0
#pragma once

// Token-sequence ROUGE (n-gram overlap and LCS) and frame-importance F1.
// Sequences are plain token ids; pad (0) and eos (1) are stripped before
// scoring. All outputs live in [0, 1].

#include <map>

#include "milora/tensor.hpp"

namespace milora {

using TokenSequence = std::vector<int>;

inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;

inline TokenSequence strip_special(const TokenSequence& seq) {
  TokenSequence out;
  out.reserve(seq.size());
  for (int t : seq)
    if (t != kPadToken && t != kEosToken) out.push_back(t);
  return out;
}

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline RougeScore rouge_from_counts(double overlap, double cand, double ref) {
  if (cand <= 0.0 || ref <= 0.0) return {};
  RougeScore s;
  s.precision = overlap / cand;
  s.recall = overlap / ref;
  s.f1 = (s.precision + s.recall) > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

// Clipped n-gram overlap.
inline RougeScore rouge_n(const TokenSequence& candidate, const TokenSequence& reference,
                          std::size_t n) {
  if (n == 0) throw ConfigError("rouge_n: n must be >= 1");
  TokenSequence cand = strip_special(candidate);
  TokenSequence ref = strip_special(reference);
  if (cand.size() < n || ref.size() < n) return {};
  auto grams = [n](const TokenSequence& s) {
    std::map<TokenSequence, std::size_t> m;
    for (std::size_t i = 0; i + n <= s.size(); ++i)
      ++m[TokenSequence(s.begin() + i, s.begin() + i + n)];
    return m;
  };
  auto cg = grams(cand);
  auto rg = grams(ref);
  std::size_t overlap = 0;
  for (const auto& [g, c] : cg) {
    auto it = rg.find(g);
    if (it != rg.end()) overlap += std::min(c, it->second);
  }
  return rouge_from_counts(static_cast<double>(overlap),
                           static_cast<double>(cand.size() - n + 1),
                           static_cast<double>(ref.size() - n + 1));
}

// Longest common subsequence length via dynamic programming.
inline std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline RougeScore rouge_l(const TokenSequence& candidate, const TokenSequence& reference) {
  TokenSequence cand = strip_special(candidate);
  TokenSequence ref = strip_special(reference);
  if (cand.empty() || ref.empty()) return {};
  double lcs = static_cast<double>(lcs_length(cand, ref));
  return rouge_from_counts(lcs, static_cast<double>(cand.size()),
                           static_cast<double>(ref.size()));
}

// Binarize predictions at `threshold`, then standard F1 against 0/1 labels.
// Both sides empty scores 1; empty predictions against positives score 0.
template <class T>
double frame_f1(const Tensor<T>& predicted, const std::vector<int>& labels,
                double threshold = 0.5) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw ConfigError("frame_f1: threshold must be in (0,1)");
  if (predicted.numel() != labels.size())
    throw ShapeError("frame_f1: prediction/label length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool pred = static_cast<double>(predicted[i]) > threshold;
    bool truth = labels[i] != 0;
    if (pred && truth) ++tp;
    else if (pred && !truth) ++fp;
    else if (!pred && truth) ++fn;
  }
  std::size_t denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace milora
