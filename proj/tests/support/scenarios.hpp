// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Scenario builders shared by the unit tests and the acceptance binary.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "specpv/specpv.hpp"

namespace specpv::testing {

inline std::vector<int> random_prompt(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> p(len);
  for (auto& t : p) t = static_cast<int>(rng.uniform_index(vocab));
  return p;
}

/// Four layers, width 16, for fast statistical tests.
inline ModelConfig micro_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = 16;
  c.n_heads = 1;
  c.head_dim = 16;
  c.rope.head_dim = 16;
  c.ffn_dim = 32;
  return c;
}

inline double total_variation(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return 0.5 * s;
}

struct SamplingTrialResult {
  std::vector<double> empirical;  // first emitted token after the prefix
  std::vector<double> target;     // target distribution at the prefix
};

/// Repeats one draft-verify-accept step from a fixed prefix and records the
/// first token it emits. The drafter is a noisy copy of the target so that
/// q differs from p.
inline SamplingTrialResult sampling_trials(const TinyTransformer& model, std::span<const int> prefix,
                                           std::size_t depth, double agreement, double temperature,
                                           std::size_t trials, std::uint64_t seed) {
  const auto& cfg = model.config();
  PagedKVCache full(KVCacheShape::for_model(cfg));
  // K/V for all but the last prefix token; the last one is re-run each step.
  std::vector<std::size_t> pos(prefix.size() - 1);
  std::iota(pos.begin(), pos.end(), 0);
  FeatureBundle taps;
  if (!pos.empty()) taps = model.forward(prefix.first(pos.size()), pos, full).taps;
  const std::size_t base = full.length();
  MockNoisyDrafter drafter(model, agreement);
  drafter.commit(prefix, taps);
  SamplingConfig s{false, temperature, seed};
  Rng rng(seed);
  const auto tmpl = TreeTemplate::chain(depth);
  std::vector<double> counts(cfg.vocab_size, 0.0);
  std::vector<double> target;
  for (std::size_t t = 0; t < trials; ++t) {
    const CandidateTree tree = drafter.draft(tmpl, s, rng);
    const auto out = verify(model, tree, prefix.last(1), prefix.size() - 1, full, false);
    if (target.empty()) target = softmax_tempered(out.logits.row(0), temperature);
    const Acceptance acc = post_evaluate(tree, out.logits, s, rng);
    const int first = acc.tokens.empty() ? acc.bonus : acc.tokens.front();
    counts[static_cast<std::size_t>(first)] += 1.0;
    full.truncate(base);
  }
  for (auto& c : counts) c /= static_cast<double>(trials);
  return {counts, target};
}


// Exhaustive rank: a block is kept iff fewer than `slots` blocks beat it.
inline std::vector<std::size_t> brute_force_retrieval(const PagedKVCache& c, std::size_t layer, const Tensor2D& q, const SelectionConfig& cfg) {
  const std::size_t nb = c.block_count(layer), bs = c.block_size();
  const std::size_t n_sink = std::min(cfg.n_sink, nb), n_local = std::min(cfg.n_local, nb - n_sink);
  std::size_t fixed = 0;
  for (std::size_t b = 0; b < n_sink; ++b) fixed += c.block(layer, b).filled;
  for (std::size_t b = nb - n_local; b < nb; ++b) fixed += c.block(layer, b).filled;
  const std::size_t slots = cfg.budget_tokens > fixed ? (cfg.budget_tokens - fixed) / bs : 0;
  std::vector<double> score(nb, 0.0);
  for (std::size_t b = n_sink; b < nb - n_local; ++b) {
    const auto blk = c.block(layer, b);
    std::vector<double> per_query;
    for (std::size_t j = 0; j < q.rows; ++j) {
      double total = 0.0;
      const std::size_t hd = c.shape().head_dim;
      for (std::size_t h = 0; h < c.dim() / hd; ++h) {
        double qmax = 0.0, qmin = 0.0, elem = 0.0;
        for (std::size_t d = h * hd; d < (h + 1) * hd; ++d) {
          double mx = blk.keys.row(0)[d], mn = mx;
          for (std::size_t r = 1; r < blk.filled; ++r) {
            mx = std::max<double>(mx, blk.keys.row(r)[d]);
            mn = std::min<double>(mn, blk.keys.row(r)[d]);
          }
          qmax += q.at(j, d) * mx;
          qmin += q.at(j, d) * mn;
          elem += std::max(q.at(j, d) * mx, q.at(j, d) * mn);
        }
        total += cfg.variant == ScoreVariant::kAsWritten ? std::max(qmax, qmin) : elem;
      }
      per_query.push_back(total);
    }
    double red = 0.0;
    if (cfg.reduction == Reduction::kMax) red = *std::max_element(per_query.begin(), per_query.end());
    if (cfg.reduction == Reduction::kLast) red = per_query.back();
    if (cfg.reduction == Reduction::kMean) {
      red = std::accumulate(per_query.begin(), per_query.end(), 0.0) / static_cast<double>(per_query.size());
    }
    score[b] = red;
  }
  std::vector<std::size_t> kept;
  for (std::size_t b = n_sink; b < nb - n_local; ++b) {
    std::size_t better = 0;
    for (std::size_t o = n_sink; o < nb - n_local; ++o) {
      if (score[o] > score[b] || (score[o] == score[b] && o < b)) ++better;
    }
    if (better < slots) kept.push_back(b);
  }
  return kept;
}

}  // namespace specpv::testing
