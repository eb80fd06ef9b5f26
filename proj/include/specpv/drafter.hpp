// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Self-speculative draft modules. A drafter keeps its own state in step with
// the committed sequence (commit / truncate) and proposes a candidate tree
// for the target to verify.

#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "specpv/kvstore.hpp"
#include "specpv/model.hpp"
#include "specpv/numerics.hpp"

namespace specpv {

// ---------------------------------------------------------------------------
// Tree templates
// ---------------------------------------------------------------------------

/// Shape of a candidate tree. parent[i] == -1 marks a child of the root
/// sentinel (the last committed token). Nodes are stored level by level:
/// parents precede children and depth never decreases with the index.
struct TreeTemplate {
  std::vector<int> parent;

  static TreeTemplate chain(std::size_t depth) {
    if (depth == 0) {
      throw std::invalid_argument("chain depth must be positive");
    }
    TreeTemplate t;
    for (std::size_t i = 0; i < depth; ++i) t.parent.push_back(static_cast<int>(i) - 1);
    return t;
  }

  /// Complete binary tree with `depth` levels (2 + 4 + ... + 2^depth nodes).
  static TreeTemplate binary(std::size_t depth) {
    if (depth == 0) {
      throw std::invalid_argument("binary depth must be positive");
    }
    TreeTemplate t;
    t.parent = {-1, -1};
    std::size_t level_begin = 0;
    std::size_t level_end = 2;
    for (std::size_t d = 1; d < depth; ++d) {
      for (std::size_t p = level_begin; p < level_end; ++p) {
        t.parent.push_back(static_cast<int>(p));
        t.parent.push_back(static_cast<int>(p));
      }
      level_begin = level_end;
      level_end = t.parent.size();
    }
    return t;
  }

  /// Depth 4, ten nodes: three root children; the best two of them carry
  /// 2 and 1 children; the best two of those carry 2 and 1; one leaf below.
  static TreeTemplate eagle_like() { return {{-1, -1, -1, 0, 0, 1, 3, 3, 4, 6}}; }

  std::size_t size() const { return parent.size(); }

  void validate() const {
    if (parent.empty()) {
      throw std::invalid_argument("tree template is empty");
    }
    for (std::size_t i = 0; i < parent.size(); ++i) {
      if (parent[i] < -1 || parent[i] >= static_cast<int>(i)) {
        throw std::invalid_argument("tree template has a cyclic or forward parent link at node " + std::to_string(i));
      }
    }
    const auto d = depths();
    for (std::size_t i = 1; i < d.size(); ++i) {
      if (d[i] < d[i - 1]) {
        throw std::invalid_argument("tree template nodes must be stored level by level");
      }
    }
  }

  std::vector<std::size_t> depths() const {
    std::vector<std::size_t> d(parent.size(), 0);
    for (std::size_t i = 0; i < parent.size(); ++i) {
      if (parent[i] >= 0) d[i] = d[static_cast<std::size_t>(parent[i])] + 1;
    }
    return d;
  }

  std::size_t max_depth() const {
    const auto d = depths();
    return d.empty() ? 0 : *std::max_element(d.begin(), d.end()) + 1;
  }

  /// Index of each node among its siblings, in storage order.
  std::vector<std::size_t> sibling_ranks() const {
    std::vector<std::size_t> rank(parent.size());
    std::vector<std::size_t> seen(parent.size() + 1, 0);
    for (std::size_t i = 0; i < parent.size(); ++i) {
      rank[i] = seen[static_cast<std::size_t>(parent[i] + 1)]++;
    }
    return rank;
  }

  bool has_children(std::size_t node) const {
    return std::find(parent.begin(), parent.end(), static_cast<int>(node)) != parent.end();
  }

  bool is_chain() const {
    for (std::size_t i = 0; i < parent.size(); ++i) {
      if (parent[i] != static_cast<int>(i) - 1) return false;
    }
    return true;
  }

  bool operator==(const TreeTemplate&) const = default;
};

/// Row n allows every context column, the columns of n's ancestors and n.
inline BoolMatrix build_tree_mask(const TreeTemplate& tmpl, std::size_t context_len) {
  tmpl.validate();
  const std::size_t n = tmpl.size();
  BoolMatrix mask(n, context_len + n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < context_len; ++j) mask.set(i, j);
    for (int a = static_cast<int>(i); a >= 0; a = tmpl.parent[static_cast<std::size_t>(a)]) {
      mask.set(i, context_len + static_cast<std::size_t>(a));
    }
  }
  return mask;
}

struct SamplingConfig {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Draft output. positions[i] = committed_len + depth[i].
struct CandidateTree {
  TreeTemplate shape;
  std::vector<int> tokens;
  std::vector<std::size_t> positions;
  std::vector<float> draft_prob;                // q(token) under the drafter
  std::vector<std::vector<double>> draft_dist;  // full q per node; sampling mode only

  std::size_t size() const { return tokens.size(); }
};

/// Tokens ordered by descending logit, ties to the lower id.
inline std::vector<int> ranked_tokens(std::span<const float> logits, std::size_t k) {
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)]
               ? logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)]
               : a < b;
  });
  idx.resize(k);
  return idx;
}

// ---------------------------------------------------------------------------
// Drafter interface
// ---------------------------------------------------------------------------

class Drafter : public Truncatable {
 public:
  /// Brings the draft state up to `sequence` (every committed token, the
  /// last one included). `features` must cover the target taps of positions
  /// [length() - 1, sequence.size() - 2] for drafters that consume them.
  virtual void commit(std::span<const int> sequence, const FeatureBundle& features) = 0;

  /// Proposes a tree for the token after the committed sequence.
  virtual CandidateTree draft(const TreeTemplate& tmpl, const SamplingConfig& sampling, Rng& rng) = 0;

  virtual std::string name() const = 0;

  /// FLOPs of the draft module work since the last call (commit + draft),
  /// charged as a one-layer draft module regardless of implementation.
  double take_modeled_flops() {
    const double f = flops_;
    flops_ = 0.0;
    return f;
  }

 protected:
  double flops_ = 0.0;
};

/// Shared level-by-level tree expansion. Subclasses supply root logits
/// (from commit) and logits for a level of freshly chosen nodes.
class TreeDrafterBase : public Drafter {
 public:
  CandidateTree draft(const TreeTemplate& tmpl, const SamplingConfig& sampling, Rng& rng) override {
    tmpl.validate();
    if (!sampling.greedy && !tmpl.is_chain()) {
      throw std::invalid_argument("stochastic drafting supports chain templates only");
    }
    if (root_logits_.empty()) {
      throw std::logic_error("draft before commit");
    }
    const std::size_t committed = length();
    const std::size_t n = tmpl.size();
    const auto depth = tmpl.depths();
    const auto rank = tmpl.sibling_ranks();
    CandidateTree tree;
    tree.shape = tmpl;
    tree.tokens.resize(n);
    tree.positions.resize(n);
    tree.draft_prob.resize(n);
    if (!sampling.greedy) tree.draft_dist.resize(n);
    node_logits_.assign(n, {});

    const BoolMatrix full_mask = build_tree_mask(tmpl, committed);
    std::size_t begin = 0;
    while (begin < n) {
      std::size_t end = begin;
      while (end < n && depth[end] == depth[begin]) ++end;
      bool expand = false;
      for (std::size_t i = begin; i < end; ++i) {
        const int p = tmpl.parent[i];
        const std::vector<float>& parent_logits = p < 0 ? root_logits_ : node_logits_[static_cast<std::size_t>(p)];
        choose(tree, i, parent_logits, rank[i], sampling, rng);
        tree.positions[i] = committed + depth[i];
        expand = expand || tmpl.has_children(i);
      }
      if (expand) {
        BoolMatrix level_mask(end - begin, committed + end);
        for (std::size_t r = begin; r < end; ++r) {
          for (std::size_t c = 0; c < committed + end; ++c) level_mask.set(r - begin, c, full_mask.get(r, c));
        }
        forward_level(tree, tmpl, begin, end, level_mask);
      }
      begin = end;
    }
    return tree;
  }

 protected:
  /// Picks node i's token from its parent's logits.
  virtual void choose(CandidateTree& tree, std::size_t i, const std::vector<float>& parent_logits, std::size_t rank,
                      const SamplingConfig& sampling, Rng& rng) {
    if (sampling.greedy) {
      const auto ranked = ranked_tokens(parent_logits, rank + 1);
      const int tok = ranked[std::min(rank, ranked.size() - 1)];
      tree.tokens[i] = tok;
      tree.draft_prob[i] = softmax(parent_logits)[static_cast<std::size_t>(tok)];
      return;
    }
    auto q = softmax_tempered(parent_logits, sampling.temperature);
    const auto tok = rng.categorical(q);
    tree.tokens[i] = static_cast<int>(tok);
    tree.draft_prob[i] = static_cast<float>(q[tok]);
    tree.draft_dist[i] = std::move(q);
  }

  /// Runs nodes [begin, end) (one level) and fills node_logits_ for them.
  virtual void forward_level(const CandidateTree& tree, const TreeTemplate& tmpl, std::size_t begin,
                             std::size_t end, const BoolMatrix& level_mask) = 0;

  std::vector<float> root_logits_;
  std::vector<std::vector<float>> node_logits_;
};

// ---------------------------------------------------------------------------
// EAGLE-style draft module
// ---------------------------------------------------------------------------

/// Fusion projection of concatenated taps followed by the token embedding:
/// W_fuse * taps + embedding. No bias.
inline std::vector<float> fuse_features(const Tensor2D& fusion, std::span<const float> taps,
                                        std::span<const float> token_embedding, std::size_t expected_taps = 3) {
  if (token_embedding.empty() || taps.size() != expected_taps * token_embedding.size()) {
    throw std::invalid_argument("fuse_features: wrong tap count");
  }
  if (fusion.cols != taps.size() || fusion.rows != token_embedding.size()) {
    throw std::invalid_argument("fuse_features: fusion projection shape mismatch");
  }
  std::vector<float> out(fusion.rows);
  for (std::size_t r = 0; r < fusion.rows; ++r) {
    out[r] = static_cast<float>(dot(fusion.row(r).data(), taps.data(), taps.size()) +
                                static_cast<double>(token_embedding[r]));
  }
  return out;
}

struct DraftWeights {
  Tensor2D fusion;  // [dim x taps*dim]
  LayerWeights layer;
};

inline DraftWeights init_draft_weights(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  DraftWeights w;
  w.fusion = random_matrix(cfg.dim, cfg.feature_dim(), rng);
  w.layer = random_layer(cfg.dim, cfg.ffn_dim, rng);
  return w;
}

/// One decoder layer over fused target features, sharing the target's
/// embedding, final norm and output head. Draft position p consumes the
/// taps of position p-1 with the embedding of token p and predicts p+1;
/// inside the tree a node's own draft hidden state stands in for the taps.
class EagleDrafter : public TreeDrafterBase {
 public:
  EagleDrafter(const TinyTransformer& target, DraftWeights weights)
      : target_(target),
        weights_(std::move(weights)),
        cache_(KVCacheShape{1, target.config().n_heads, target.config().head_dim, 16}) {
    const auto& c = target.config();
    if (weights_.fusion.rows != c.dim || weights_.fusion.cols != c.feature_dim()) {
      throw std::invalid_argument("EagleDrafter: fusion shape mismatch");
    }
  }

  std::string name() const override { return "eagle-like"; }
  std::size_t length() const override { return committed_; }

  void truncate(std::size_t length) override {
    if (length > committed_) return;
    cache_.truncate(length);
    committed_ = length;
    node_hidden_.clear();
  }

  const DraftWeights& weights() const { return weights_; }

  void commit(std::span<const int> sequence, const FeatureBundle& features) override {
    if (cache_.length() > committed_) {
      cache_.truncate(committed_);  // drop staged tree rows
    }
    if (sequence.size() <= committed_) return;
    const auto& c = target_.config();
    const std::size_t first = committed_;
    const std::size_t count = sequence.size() - first;
    Tensor2D input(count, c.dim);
    std::vector<std::size_t> positions(count);
    const std::vector<float> zeros(c.feature_dim(), 0.0f);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t p = first + i;
      positions[i] = p;
      std::span<const float> taps = zeros;
      if (p > 0) taps = find_feature(features, p - 1);
      const int tok = sequence[p];
      target_.check_token(tok);
      const auto fused = fuse_features(weights_.fusion, taps, target_.embedding().row(static_cast<std::size_t>(tok)),
                                       c.feature_tap_layers.size());
      std::copy(fused.begin(), fused.end(), input.data.data() + i * c.dim);
    }
    block_forward(weights_.layer, target_.block_shape(), target_.rope(), input, positions, cache_, 0, nullptr);
    committed_ = sequence.size();
    root_hidden_.assign(input.row(count - 1).begin(), input.row(count - 1).end());
    const Tensor2D last(1, c.dim, root_hidden_);
    const Tensor2D logits = target_.logits_from_hidden(last);
    root_logits_.assign(logits.data.begin(), logits.data.end());
    flops_ += draft_flops(count, first) + 2.0 * static_cast<double>(count * c.dim * c.feature_dim());
  }

 protected:
  void forward_level(const CandidateTree& tree, const TreeTemplate& tmpl, std::size_t begin, std::size_t end,
                     const BoolMatrix& level_mask) override {
    const auto& c = target_.config();
    if (begin == 0) {
      cache_.truncate(committed_);  // rows staged by an earlier draft
      node_hidden_.assign(tmpl.size(), {});
    }
    const std::size_t n = end - begin;
    Tensor2D input(n, c.dim);
    std::vector<std::size_t> positions(n);
    for (std::size_t i = begin; i < end; ++i) {
      const int p = tmpl.parent[i];
      const std::vector<float>& base = p < 0 ? root_hidden_ : node_hidden_[static_cast<std::size_t>(p)];
      const auto emb = target_.embedding().row(static_cast<std::size_t>(tree.tokens[i]));
      for (std::size_t d = 0; d < c.dim; ++d) input.at(i - begin, d) = base[d] + emb[d];
      positions[i - begin] = tree.positions[i];
    }
    const std::size_t ctx = cache_.length();
    StagingKVView staging(cache_);
    block_forward(weights_.layer, target_.block_shape(), target_.rope(), input, positions, staging, 0, &level_mask);
    const Tensor2D logits = target_.logits_from_hidden(input);
    for (std::size_t i = begin; i < end; ++i) {
      node_hidden_[i].assign(input.row(i - begin).begin(), input.row(i - begin).end());
      node_logits_[i].assign(logits.row(i - begin).begin(), logits.row(i - begin).end());
    }
    flops_ += draft_flops(n, ctx);
  }

 private:
  static std::span<const float> find_feature(const FeatureBundle& features, std::size_t position) {
    for (const auto& f : features) {
      if (f.position == position) return f.values;
    }
    throw std::invalid_argument("EagleDrafter: missing target features for position " + std::to_string(position));
  }

  double draft_flops(std::size_t n, std::size_t ctx) const { return forward_flops(target_.config(), 1, n, ctx); }

  const TinyTransformer& target_;
  DraftWeights weights_;
  PagedKVCache cache_;
  std::size_t committed_ = 0;
  std::vector<float> root_hidden_;
  std::vector<std::vector<float>> node_hidden_;
};

// ---------------------------------------------------------------------------
// Mock drafters
// ---------------------------------------------------------------------------

/// Drafts with the target model itself on a private full cache, so chain
/// drafts are the target's own greedy continuation.
class MockIdenticalDrafter : public TreeDrafterBase {
 public:
  explicit MockIdenticalDrafter(const TinyTransformer& target)
      : target_(target), cache_(KVCacheShape::for_model(target.config())) {}

  std::string name() const override { return "mock-identical"; }
  std::size_t length() const override { return committed_; }

  void truncate(std::size_t length) override {
    if (length > committed_) return;
    cache_.truncate(length);
    stale_root_ = stale_root_ || length < committed_;
    committed_ = length;
  }

  void commit(std::span<const int> sequence, const FeatureBundle& /*features*/) override {
    if (cache_.length() > committed_) cache_.truncate(committed_);
    if (sequence.size() <= committed_ && !stale_root_) return;
    // Re-run the last committed token when the root logits went stale.
    std::size_t first = committed_;
    if (stale_root_ && first == sequence.size() && first > 0) {
      --first;
      cache_.truncate(first);
    }
    const std::size_t count = sequence.size() - first;
    std::vector<std::size_t> positions(count);
    std::iota(positions.begin(), positions.end(), first);
    const auto out = target_.forward(sequence.subspan(first, count), positions, cache_);
    committed_ = sequence.size();
    root_logits_.assign(out.logits.row(count - 1).begin(), out.logits.row(count - 1).end());
    stale_root_ = false;
    flops_ += forward_flops(target_.config(), 1, count, first);
  }

 protected:
  void forward_level(const CandidateTree& tree, const TreeTemplate& /*tmpl*/, std::size_t begin, std::size_t end,
                     const BoolMatrix& level_mask) override {
    if (begin == 0) cache_.truncate(committed_);
    const std::size_t n = end - begin;
    const std::size_t ctx = cache_.length();
    std::vector<std::size_t> positions(tree.positions.begin() + static_cast<std::ptrdiff_t>(begin),
                                       tree.positions.begin() + static_cast<std::ptrdiff_t>(end));
    StagingKVView staging(cache_);
    const auto out = target_.forward(std::span<const int>(tree.tokens).subspan(begin, n), positions, staging,
                                     &level_mask);
    for (std::size_t i = begin; i < end; ++i) {
      node_logits_[i].assign(out.logits.row(i - begin).begin(), out.logits.row(i - begin).end());
    }
    flops_ += forward_flops(target_.config(), 1, n, ctx);
  }

  const TinyTransformer& target_;
  PagedKVCache cache_;
  std::size_t committed_ = 0;
  bool stale_root_ = false;
};

/// Copies the target's greedy token with probability p, otherwise a
/// uniformly random token. Lower-ranked siblings follow the target ranking.
class MockNoisyDrafter : public MockIdenticalDrafter {
 public:
  MockNoisyDrafter(const TinyTransformer& target, double p) : MockIdenticalDrafter(target), p_(p) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("MockNoisyDrafter: p must be in [0, 1]");
    }
  }

  std::string name() const override { return "mock-noisy"; }
  double agreement() const { return p_; }

 protected:
  void choose(CandidateTree& tree, std::size_t i, const std::vector<float>& parent_logits, std::size_t rank,
              const SamplingConfig& sampling, Rng& rng) override {
    const std::size_t vocab = parent_logits.size();
    const int greedy = static_cast<int>(argmax(parent_logits));
    if (!sampling.greedy) {
      std::vector<double> q(vocab, (1.0 - p_) / static_cast<double>(vocab));
      q[static_cast<std::size_t>(greedy)] += p_;
      const auto tok = rng.categorical(q);
      tree.tokens[i] = static_cast<int>(tok);
      tree.draft_prob[i] = static_cast<float>(q[tok]);
      tree.draft_dist[i] = std::move(q);
      return;
    }
    if (rank > 0) {
      MockIdenticalDrafter::choose(tree, i, parent_logits, rank, sampling, rng);
      return;
    }
    const bool copy = rng.uniform() < p_;
    const int tok = copy ? greedy : static_cast<int>(rng.uniform_index(vocab));
    tree.tokens[i] = tok;
    tree.draft_prob[i] = static_cast<float>((tok == greedy ? p_ : 0.0) + (1.0 - p_) / static_cast<double>(vocab));
  }

 private:
  double p_;
};

/// Uniform tokens independent of any input; no forward passes.
class MockRandomDrafter : public Drafter {
 public:
  explicit MockRandomDrafter(std::size_t vocab) : vocab_(vocab) {
    if (vocab == 0) throw std::invalid_argument("MockRandomDrafter: empty vocabulary");
  }

  std::string name() const override { return "mock-random"; }
  std::size_t length() const override { return committed_; }
  void truncate(std::size_t length) override { committed_ = std::min(committed_, length); }
  void commit(std::span<const int> sequence, const FeatureBundle&) override {
    committed_ = std::max(committed_, sequence.size());
  }

  CandidateTree draft(const TreeTemplate& tmpl, const SamplingConfig& sampling, Rng& rng) override {
    tmpl.validate();
    if (!sampling.greedy && !tmpl.is_chain()) {
      throw std::invalid_argument("stochastic drafting supports chain templates only");
    }
    CandidateTree tree;
    tree.shape = tmpl;
    const auto depth = tmpl.depths();
    const float q = 1.0f / static_cast<float>(vocab_);
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
      tree.tokens.push_back(static_cast<int>(rng.uniform_index(vocab_)));
      tree.positions.push_back(committed_ + depth[i]);
      tree.draft_prob.push_back(q);
      if (!sampling.greedy) tree.draft_dist.emplace_back(vocab_, 1.0 / static_cast<double>(vocab_));
    }
    return tree;
  }

 private:
  std::size_t vocab_;
  std::size_t committed_ = 0;
};

enum class DrafterKind { kEagleLike, kMockIdentical, kMockNoisy, kMockRandom };

inline const char* to_string(DrafterKind k) {
  switch (k) {
    case DrafterKind::kEagleLike: return "eagle-like";
    case DrafterKind::kMockIdentical: return "mock-identical";
    case DrafterKind::kMockNoisy: return "mock-noisy";
    case DrafterKind::kMockRandom: return "mock-random";
  }
  return "eagle-like";
}

inline DrafterKind drafter_kind_from_string(const std::string& s) {
  if (s == "eagle-like") return DrafterKind::kEagleLike;
  if (s == "mock-identical") return DrafterKind::kMockIdentical;
  if (s == "mock-noisy") return DrafterKind::kMockNoisy;
  if (s == "mock-random") return DrafterKind::kMockRandom;
  throw std::invalid_argument("unknown drafter kind: " + s);
}

struct DrafterSpec {
  DrafterKind kind = DrafterKind::kMockIdentical;
  double agreement = 0.9;     // mock-noisy
  std::uint64_t seed = 1234;  // eagle-like weights
};

inline std::unique_ptr<Drafter> make_drafter(const TinyTransformer& target, const DrafterSpec& spec) {
  switch (spec.kind) {
    case DrafterKind::kEagleLike:
      return std::make_unique<EagleDrafter>(target, init_draft_weights(target.config(), spec.seed));
    case DrafterKind::kMockIdentical: return std::make_unique<MockIdenticalDrafter>(target);
    case DrafterKind::kMockNoisy: return std::make_unique<MockNoisyDrafter>(target, spec.agreement);
    case DrafterKind::kMockRandom: return std::make_unique<MockRandomDrafter>(target.config().vocab_size);
  }
  throw std::invalid_argument("unknown drafter kind");
}

}  // namespace specpv
