// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Speculative generation with partial verification: chunked prefill, mode
// selection (Full / Partial / Refresh), tree verification, acceptance,
// eviction, and per-step accounting.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "specpv/drafter.hpp"
#include "specpv/kvstore.hpp"
#include "specpv/model.hpp"
#include "specpv/numerics.hpp"

namespace specpv {

/// Extra buffer slots beyond one verification step.
inline constexpr std::size_t kBufferMargin = 20;

struct CacheConfig {
  std::size_t budget = kUnlimitedBudget;  // partial cache token budget; unlimited disables partial verification
  std::size_t n_sink = 2;
  std::size_t n_local = 4;
  std::size_t block_size = 16;
  std::size_t buffer_cap = 0;  // 0: template nodes + kBufferMargin
  ScoreVariant variant = ScoreVariant::kAsWritten;
  Reduction reduction = Reduction::kMean;
};

struct GenerationConfig {
  std::size_t max_length = 16384;
  std::size_t max_new_tokens = 256;
  SamplingConfig sampling{};
  CacheConfig cache{};
  TreeTemplate tree = TreeTemplate::eagle_like();
  std::size_t chunk_size = 64;
  OffloadCostModel offload{};
  double compute_flops_per_s = 1e12;

  /// Tokens forwarded by one verification step: the last committed token
  /// plus every tree node.
  std::size_t step_tokens() const { return tree.size() + 1; }
  std::size_t effective_buffer_cap() const {
    return cache.buffer_cap != 0 ? cache.buffer_cap : tree.size() + kBufferMargin;
  }

  void validate() const {
    tree.validate();
    if (chunk_size == 0) throw std::invalid_argument("GenerationConfig: chunk_size must be positive");
    if (max_length == 0) throw std::invalid_argument("GenerationConfig: max_length must be positive");
    if (!sampling.greedy && !tree.is_chain()) {
      throw std::invalid_argument("stochastic verification supports chain templates only");
    }
    if (!sampling.greedy && !(sampling.temperature > 0.0)) {
      throw std::invalid_argument("GenerationConfig: temperature must be positive");
    }
    if (effective_buffer_cap() < step_tokens()) {
      throw std::invalid_argument("GenerationConfig: buffer_cap smaller than one verification step");
    }
    if (cache.budget != kUnlimitedBudget && cache.budget < (cache.n_sink + cache.n_local) * cache.block_size) {
      throw std::invalid_argument("budget smaller than sink + local blocks");
    }
    if (!(compute_flops_per_s > 0.0)) throw std::invalid_argument("compute_flops_per_s must be positive");
    offload.validate();
  }
};

struct StepRecord {
  VerifyMode mode = VerifyMode::kFull;
  std::size_t drafted = 0;
  std::size_t accepted = 0;  // drafted tokens accepted; the bonus token is not counted
  std::size_t emitted = 0;   // tokens appended to the sequence by this step
  double draft_time_s = 0.0;
  double verify_time_s = 0.0;
  double modeled_draft_s = 0.0;
  double modeled_verify_s = 0.0;
  std::size_t cumulative_length = 0;

  double measured_time() const { return draft_time_s + verify_time_s; }
  double modeled_time() const { return modeled_draft_s + modeled_verify_s; }
};

// ---------------------------------------------------------------------------
// Mode selection
// ---------------------------------------------------------------------------

inline VerifyMode select_mode(std::size_t seq_len, std::size_t budget, std::size_t buffer_occupancy,
                              std::size_t incoming_nodes, std::size_t buffer_cap, bool partial_initialized) {
  if (budget == kUnlimitedBudget || seq_len < budget) {
    return VerifyMode::kFull;
  }
  if (!partial_initialized || buffer_occupancy + incoming_nodes > buffer_cap) {
    return VerifyMode::kRefresh;
  }
  return VerifyMode::kPartial;
}

// ---------------------------------------------------------------------------
// Acceptance
// ---------------------------------------------------------------------------

struct Acceptance {
  std::vector<std::size_t> path;  // accepted node indices, root to leaf
  std::vector<int> tokens;        // tokens of the accepted nodes
  int bonus = -1;                 // extra token from the target at the deepest accepted node
};

/// min(1, p(t) / q(t)).
inline double speculative_accept_probability(std::span<const double> p, std::span<const double> q, std::size_t t) {
  if (q[t] <= 0.0) return 1.0;
  return std::min(1.0, p[t] / q[t]);
}

/// normalize(max(0, p - q)); falls back to p when the residual vanishes.
inline std::vector<double> residual_distribution(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("residual_distribution: size mismatch");
  std::vector<double> r(p.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r[i] = std::max(0.0, p[i] - q[i]);
    sum += r[i];
  }
  if (!(sum > 0.0)) return {p.begin(), p.end()};
  for (auto& x : r) x /= sum;
  return r;
}

/// `logits` row 0 belongs to the last committed token (the root's parent);
/// row 1 + i belongs to tree node i.
inline Acceptance post_evaluate(const CandidateTree& tree, const Tensor2D& logits, const SamplingConfig& sampling,
                                Rng& rng) {
  if (logits.rows != tree.size() + 1) {
    throw std::invalid_argument("post_evaluate: one logits row per node plus the root parent required");
  }
  Acceptance acc;
  if (sampling.greedy) {
    std::size_t row = 0;
    int parent = -1;
    for (;;) {
      const int target = static_cast<int>(argmax(logits.row(row)));
      std::optional<std::size_t> next;
      for (std::size_t i = 0; i < tree.size(); ++i) {
        if (tree.shape.parent[i] == parent && tree.tokens[i] == target) {
          next = i;
          break;
        }
      }
      if (!next) {
        acc.bonus = target;
        return acc;
      }
      acc.path.push_back(*next);
      acc.tokens.push_back(tree.tokens[*next]);
      row = *next + 1;
      parent = static_cast<int>(*next);
    }
  }
  if (!tree.shape.is_chain()) {
    throw std::invalid_argument("stochastic verification supports chain templates only");
  }
  if (tree.draft_dist.size() != tree.size()) {
    throw std::invalid_argument("post_evaluate: sampling requires per-node draft distributions");
  }
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const auto p = softmax_tempered(logits.row(i), sampling.temperature);
    const auto& q = tree.draft_dist[i];
    const auto t = static_cast<std::size_t>(tree.tokens[i]);
    if (rng.uniform() < speculative_accept_probability(p, q, t)) {
      acc.path.push_back(i);
      acc.tokens.push_back(tree.tokens[i]);
      continue;
    }
    acc.bonus = static_cast<int>(rng.categorical(residual_distribution(p, q)));
    return acc;
  }
  acc.bonus = static_cast<int>(rng.categorical(softmax_tempered(logits.row(tree.size()), sampling.temperature)));
  return acc;
}

/// Next token from one logits row under the sampling configuration.
inline int sample_token(std::span<const float> logits, const SamplingConfig& sampling, Rng& rng) {
  if (sampling.greedy) return static_cast<int>(argmax(logits));
  return static_cast<int>(rng.categorical(softmax_tempered(logits, sampling.temperature)));
}

// ---------------------------------------------------------------------------
// Prefill
// ---------------------------------------------------------------------------

struct PrefillResult {
  FeatureBundle taps;     // one per prompt token
  Tensor2D last_logits;   // [1 x vocab] for the final prompt token
  int first_token = -1;
};

/// Fills `full` with the prompt in chunks; the result does not depend on
/// the chunk size. When a drafter is given it is committed through the
/// first generated token.
inline PrefillResult chunk_prefill(const TinyTransformer& model, Drafter* drafter, std::span<const int> prompt,
                                   std::size_t chunk_size, PagedKVCache& full, std::size_t max_length,
                                   const SamplingConfig& sampling, Rng& rng) {
  if (prompt.empty()) throw std::invalid_argument("empty prompt");
  if (chunk_size == 0) throw std::invalid_argument("chunk_size must be positive");
  if (prompt.size() > max_length) throw std::invalid_argument("prompt exceeds max length");
  if (full.length() != 0) throw std::logic_error("chunk_prefill: cache not empty");
  PrefillResult out;
  out.taps.reserve(prompt.size());
  for (std::size_t start = 0; start < prompt.size(); start += chunk_size) {
    const std::size_t n = std::min(chunk_size, prompt.size() - start);
    std::vector<std::size_t> positions(n);
    std::iota(positions.begin(), positions.end(), start);
    auto fwd = model.forward(prompt.subspan(start, n), positions, full);
    for (auto& t : fwd.taps) out.taps.push_back(std::move(t));
    if (start + n == prompt.size()) {
      out.last_logits = Tensor2D(1, fwd.logits.cols, std::vector<float>(fwd.logits.row(n - 1).begin(),
                                                                      fwd.logits.row(n - 1).end()));
    }
  }
  out.first_token = sample_token(out.last_logits.row(0), sampling, rng);
  if (drafter != nullptr) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.push_back(out.first_token);
    drafter->commit(seq, out.taps);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

struct VerifyOutput {
  Tensor2D logits;                // rows: chain (buffer tokens then last committed token), then tree nodes
  FeatureBundle taps;             // same row order
  std::vector<Tensor2D> queries;  // per layer; Refresh only
  std::size_t chain_len = 0;      // rows before the first tree node
  std::size_t context_len = 0;    // keys visible before this step's rows
};

/// Mask for `chain` causal rows followed by the tree rows.
inline BoolMatrix verification_mask(const TreeTemplate& tmpl, std::size_t context, std::size_t chain) {
  const std::size_t n = tmpl.size();
  BoolMatrix mask(chain + n, context + chain + n);
  for (std::size_t i = 0; i < chain; ++i) {
    for (std::size_t j = 0; j < context + i + 1; ++j) mask.set(i, j);
  }
  const BoolMatrix tree = build_tree_mask(tmpl, context + chain);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < tree.cols(); ++j) mask.set(chain + i, j, tree.get(i, j));
  }
  return mask;
}

/// Runs the target on `chain` tokens (consecutive positions from
/// chain_start) followed by the candidate tree against `view`.
inline VerifyOutput verify(const TinyTransformer& model, const CandidateTree& candidates, std::span<const int> chain,
                           std::size_t chain_start, KVView& view, bool capture_queries) {
  const std::size_t ctx = view.context_length();
  std::vector<int> tokens(chain.begin(), chain.end());
  std::vector<std::size_t> positions(chain.size());
  std::iota(positions.begin(), positions.end(), chain_start);
  tokens.insert(tokens.end(), candidates.tokens.begin(), candidates.tokens.end());
  positions.insert(positions.end(), candidates.positions.begin(), candidates.positions.end());
  const BoolMatrix mask = verification_mask(candidates.shape, ctx, chain.size());
  // Siblings share positions; a paged cache takes them as consecutive slots.
  auto* paged = dynamic_cast<PagedKVCache*>(&view);
  std::optional<StagingKVView> staged;
  if (paged != nullptr) staged.emplace(*paged);
  KVView& target = staged ? static_cast<KVView&>(*staged) : view;
  auto fwd = model.forward(tokens, positions, target, &mask, capture_queries);
  return {std::move(fwd.logits), std::move(fwd.taps), std::move(fwd.queries), chain.size(), ctx};
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerationResult {
  std::vector<int> tokens;  // prompt followed by generated tokens
  std::size_t prompt_len = 0;
  std::vector<StepRecord> steps;
  double prefill_time_s = 0.0;

  std::span<const int> generated() const { return std::span<const int>(tokens).subspan(prompt_len); }
};

/// State handed to an observer after every verification step.
struct StepInspection {
  const StepRecord& record;
  const PagedKVCache& full;
  const PartialCache* partial;
  const Drafter& drafter;
  std::span<const int> sequence;
};

using StepObserver = std::function<void(const StepInspection&)>;

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Appends accepted + bonus tokens, honoring the new-token limit and EOS.
/// Returns the number appended and whether generation is finished.
inline std::pair<std::size_t, bool> append_tokens(std::vector<int>& y, std::span<const int> tokens,
                                                  std::size_t prompt_len, const GenerationConfig& cfg,
                                                  std::int32_t eos) {
  std::size_t appended = 0;
  for (int t : tokens) {
    y.push_back(t);
    ++appended;
    if ((eos >= 0 && t == eos) || y.size() - prompt_len >= cfg.max_new_tokens || y.size() >= cfg.max_length) {
      return {appended, true};
    }
  }
  return {appended, false};
}

}  // namespace detail

inline GenerationResult generate(const TinyTransformer& model, Drafter& drafter, std::span<const int> prompt,
                                 const GenerationConfig& cfg, const StepObserver& observer = {}) {
  cfg.validate();
  const auto& mc = model.config();
  if (prompt.size() >= cfg.max_length) throw std::invalid_argument("prompt exceeds max length");
  if (cfg.max_new_tokens == 0) throw std::invalid_argument("max_new_tokens must be positive");
  Rng rng(cfg.sampling.seed);
  PagedKVCache full(KVCacheShape::for_model(mc, cfg.cache.block_size));
  std::optional<PartialCache> partial;
  const SelectionConfig selection{cfg.cache.budget, cfg.cache.n_sink, cfg.cache.n_local, cfg.cache.variant,
                                  cfg.cache.reduction};
  const std::size_t buffer_cap = cfg.effective_buffer_cap();
  const std::size_t depth = cfg.tree.max_depth();

  GenerationResult result;
  result.prompt_len = prompt.size();
  auto t0 = std::chrono::steady_clock::now();
  const PrefillResult pre = chunk_prefill(model, &drafter, prompt, cfg.chunk_size, full, cfg.max_length,
                                          cfg.sampling, rng);
  drafter.take_modeled_flops();
  result.prefill_time_s = detail::seconds_since(t0);
  std::vector<int>& y = result.tokens;
  y.assign(prompt.begin(), prompt.end());
  bool done = detail::append_tokens(y, std::span<const int>(&pre.first_token, 1), prompt.size(), cfg, mc.eos_token)
                  .second;

  while (!done) {
    const std::size_t L = y.size();
    if (L - 1 + depth + 1 > mc.max_positions) {
      throw std::out_of_range("tree template deeper than remaining position budget");
    }
    const std::size_t occupancy = partial ? partial->buffer_occupancy() : 0;
    if (full.length() + occupancy != L - 1) {
      throw std::logic_error("cache bookkeeping out of sync with committed sequence");
    }
    StepRecord rec;

    t0 = std::chrono::steady_clock::now();
    const CandidateTree tree = drafter.draft(cfg.tree, cfg.sampling, rng);
    rec.draft_time_s = detail::seconds_since(t0);
    rec.modeled_draft_s = drafter.take_modeled_flops() / cfg.compute_flops_per_s;
    rec.drafted = tree.size();

    t0 = std::chrono::steady_clock::now();
    rec.mode = select_mode(L, cfg.cache.budget, occupancy, cfg.step_tokens(), buffer_cap, partial.has_value());

    // Rows of the chain: buffered tokens (Refresh only) then the last committed token.
    const std::size_t chain_start = rec.mode == VerifyMode::kRefresh ? full.length() : L - 1;
    const std::span<const int> chain = std::span<const int>(y).subspan(chain_start, L - chain_start);
    KVView& view = rec.mode == VerifyMode::kPartial ? static_cast<KVView&>(*partial) : static_cast<KVView&>(full);
    if (rec.mode == VerifyMode::kRefresh && partial) {
      partial->truncate_buffer(0);
    }
    const VerifyOutput out = verify(model, tree, chain, chain_start, view, rec.mode == VerifyMode::kRefresh);

    Tensor2D eval(tree.size() + 1, out.logits.cols);
    for (std::size_t r = 0; r <= tree.size(); ++r) {
      std::copy_n(out.logits.row(out.chain_len - 1 + r).begin(), eval.cols, eval.data.begin() + r * eval.cols);
    }
    const Acceptance acc = post_evaluate(tree, eval, cfg.sampling, rng);
    rec.accepted = acc.path.size();

    // Keep chain rows and the accepted path; drop every other tree row.
    std::vector<std::size_t> keep(out.chain_len);
    std::iota(keep.begin(), keep.end(), 0);
    for (auto node : acc.path) keep.push_back(out.chain_len + node);
    std::vector<int> emitted = acc.tokens;
    emitted.push_back(acc.bonus);
    const auto [appended, finished] = detail::append_tokens(y, emitted, prompt.size(), cfg, mc.eos_token);
    rec.emitted = appended;
    done = finished;
    // Positions with valid K/V after this step; tokens cut by a stop
    // condition are dropped with their rows.
    const std::size_t committed_kv = std::min(L + acc.path.size(), y.size() - 1);
    if (rec.mode == VerifyMode::kPartial) {
      partial->retain_buffer_rows(partial->buffer_occupancy() - (out.chain_len + tree.size()), keep);
    } else {
      full.retain_rows(chain_start, keep);
    }
    evict_rejected(full, rec.mode == VerifyMode::kPartial ? &*partial : nullptr, nullptr, committed_kv, L - 1);
    drafter.truncate(L);

    if (rec.mode == VerifyMode::kRefresh) {
      // Re-select with the queries of the rows that stay committed.
      std::vector<Tensor2D> kept_queries;
      kept_queries.reserve(out.queries.size());
      for (const auto& q : out.queries) {
        Tensor2D rows(keep.size(), q.cols);
        for (std::size_t i = 0; i < keep.size(); ++i) {
          std::copy_n(q.row(keep[i]).begin(), q.cols, rows.data.begin() + i * q.cols);
        }
        kept_queries.push_back(std::move(rows));
      }
      partial = partial ? refresh_partial(full, *partial, kept_queries, committed_kv)
                        : select_partial(full, kept_queries, selection, buffer_cap);
    }

    FeatureBundle feats;
    feats.push_back(out.taps[out.chain_len - 1]);
    for (auto node : acc.path) feats.push_back(out.taps[out.chain_len + node]);
    if (!done) {
      drafter.commit(std::span<const int>(y).first(std::min(y.size(), committed_kv + 1)), feats);
    }
    rec.verify_time_s = detail::seconds_since(t0);

    const std::size_t rows = out.chain_len + tree.size();
    const double compute = forward_flops(mc, mc.n_layers, rows, out.context_len) / cfg.compute_flops_per_s;
    ModeledStep ms;
    ms.mode = rec.mode;
    ms.tokens_in_step = rows;
    ms.n_layers = mc.n_layers;
    const std::size_t row_bytes = 2 * mc.n_layers * mc.dim * sizeof(float);
    if (rec.mode == VerifyMode::kPartial) {
      ms.partial_cache_bytes = out.context_len * row_bytes;
    } else {
      ms.full_cache_bytes = out.context_len * row_bytes;
    }
    rec.modeled_verify_s = modeled_step_time(ms, cfg.offload, compute);
    rec.cumulative_length = y.size();
    result.steps.push_back(rec);
    if (observer) {
      observer(StepInspection{result.steps.back(), full, partial ? &*partial : nullptr, drafter, y});
    }
  }
  return result;
}

/// One token per forward against the full cache.
inline GenerationResult autoregressive_generate(const TinyTransformer& model, std::span<const int> prompt,
                                                const GenerationConfig& cfg) {
  cfg.validate();
  const auto& mc = model.config();
  if (prompt.size() >= cfg.max_length) throw std::invalid_argument("prompt exceeds max length");
  if (cfg.max_new_tokens == 0) throw std::invalid_argument("max_new_tokens must be positive");
  Rng rng(cfg.sampling.seed);
  PagedKVCache full(KVCacheShape::for_model(mc, cfg.cache.block_size));
  GenerationResult result;
  result.prompt_len = prompt.size();
  auto t0 = std::chrono::steady_clock::now();
  const PrefillResult pre = chunk_prefill(model, nullptr, prompt, cfg.chunk_size, full, cfg.max_length,
                                          cfg.sampling, rng);
  result.prefill_time_s = detail::seconds_since(t0);
  std::vector<int>& y = result.tokens;
  y.assign(prompt.begin(), prompt.end());
  bool done = detail::append_tokens(y, std::span<const int>(&pre.first_token, 1), prompt.size(), cfg, mc.eos_token)
                  .second;
  const std::size_t row_bytes = 2 * mc.n_layers * mc.dim * sizeof(float);
  while (!done) {
    if (y.size() > mc.max_positions) throw std::out_of_range("position overflow");
    StepRecord rec;
    t0 = std::chrono::steady_clock::now();
    const std::size_t ctx = full.length();
    const int last = y.back();
    const std::size_t pos = y.size() - 1;
    const auto fwd = model.forward(std::span<const int>(&last, 1), std::span<const std::size_t>(&pos, 1), full);
    const int next = sample_token(fwd.logits.row(0), cfg.sampling, rng);
    const auto [appended, finished] = detail::append_tokens(y, std::span<const int>(&next, 1), prompt.size(), cfg,
                                                            mc.eos_token);
    done = finished;
    rec.verify_time_s = detail::seconds_since(t0);
    rec.emitted = appended;
    ModeledStep ms;
    ms.mode = VerifyMode::kFull;
    ms.tokens_in_step = 1;
    ms.n_layers = mc.n_layers;
    ms.full_cache_bytes = ctx * row_bytes;
    rec.modeled_verify_s =
        modeled_step_time(ms, cfg.offload, forward_flops(mc, mc.n_layers, 1, ctx) / cfg.compute_flops_per_s);
    rec.cumulative_length = y.size();
    result.steps.push_back(rec);
  }
  return result;
}

}  // namespace specpv
