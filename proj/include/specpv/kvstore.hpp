// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Block-paged full KV cache with per-block key summaries, the four-segment
// partial cache (sink | retrieval | local | buffer), block scoring and
// selection, rollback, and the offload cost model.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "specpv/io.hpp"
#include "specpv/model.hpp"
#include "specpv/numerics.hpp"

namespace specpv {

inline constexpr std::size_t kUnlimitedBudget = std::numeric_limits<std::size_t>::max();

/// Anything that can be cut back to a prefix of `length` positions.
class Truncatable {
 public:
  virtual ~Truncatable() = default;
  virtual std::size_t length() const = 0;
  virtual void truncate(std::size_t length) = 0;
};

struct KVCacheShape {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  std::size_t block_size = 16;

  std::size_t dim() const { return n_heads * head_dim; }

  static KVCacheShape for_model(const ModelConfig& cfg, std::size_t block_size = 16) {
    return {cfg.n_layers, cfg.n_heads, cfg.head_dim, block_size};
  }
};

/// Element-wise extrema of a block's key rows (all heads concatenated).
struct BlockSummary {
  std::vector<float> key_max;
  std::vector<float> key_min;

  bool operator==(const BlockSummary&) const = default;
};

inline BlockSummary summarize_block(MatrixView keys) {
  if (keys.rows == 0) {
    throw std::invalid_argument("empty block");
  }
  BlockSummary s;
  s.key_max.assign(keys.row(0), keys.row(0) + keys.cols);
  s.key_min = s.key_max;
  for (std::size_t r = 1; r < keys.rows; ++r) {
    const float* row = keys.row(r);
    for (std::size_t d = 0; d < keys.cols; ++d) {
      s.key_max[d] = std::max(s.key_max[d], row[d]);
      s.key_min[d] = std::min(s.key_min[d], row[d]);
    }
  }
  return s;
}

/// Logical view of one block of one layer.
struct KVBlock {
  std::size_t block_id = 0;
  std::size_t layer = 0;
  std::size_t capacity = 0;
  std::size_t filled = 0;
  std::size_t first_position = 0;
  MatrixView keys;
  MatrixView values;
};

class PagedKVCache : public KVView, public Truncatable {
 public:
  PagedKVCache() = default;
  explicit PagedKVCache(KVCacheShape shape)
      : shape_(shape), keys_(shape.n_layers), values_(shape.n_layers), summaries_(shape.n_layers) {
    if (shape.n_layers == 0 || shape.dim() == 0 || shape.block_size == 0) {
      throw std::invalid_argument("PagedKVCache: invalid shape");
    }
  }

  const KVCacheShape& shape() const { return shape_; }
  std::size_t dim() const { return shape_.dim(); }
  std::size_t block_size() const { return shape_.block_size; }

  std::size_t length(std::size_t layer) const { return keys_[layer].size() / dim(); }

  /// Committed length; layers can differ only in the middle of a forward.
  std::size_t length() const override {
    std::size_t n = length(0);
    for (std::size_t l = 1; l < shape_.n_layers; ++l) n = std::min(n, length(l));
    return n;
  }

  std::size_t block_count(std::size_t layer) const {
    return (length(layer) + shape_.block_size - 1) / shape_.block_size;
  }

  KVBlock block(std::size_t layer, std::size_t id) const {
    if (id >= block_count(layer)) {
      throw std::out_of_range("block id out of range");
    }
    const std::size_t first = id * shape_.block_size;
    const std::size_t filled = std::min(shape_.block_size, length(layer) - first);
    return {id,
            layer,
            shape_.block_size,
            filled,
            first,
            {keys_[layer].data() + first * dim(), filled, dim(), dim()},
            {values_[layer].data() + first * dim(), filled, dim(), dim()}};
  }

  const BlockSummary& summary(std::size_t layer, std::size_t id) const { return summaries_.at(layer).at(id); }

  /// Appends rows at positions [length(layer), ...). Every touched block's
  /// summary is brought up to date.
  void append_kv(std::size_t layer, const Tensor2D& k, const Tensor2D& v, std::span<const std::size_t> positions) {
    if (layer >= shape_.n_layers) {
      throw std::out_of_range("append_kv: layer out of range");
    }
    if (k.rows != v.rows || k.rows != positions.size() || k.cols != dim() || v.cols != dim()) {
      throw std::invalid_argument("append_kv: shape mismatch");
    }
    const std::size_t start = length(layer);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (positions[i] != start + i) {
        throw std::invalid_argument("append_kv: non-contiguous positions (expected " + std::to_string(start + i) +
                                    ", got " + std::to_string(positions[i]) + ")");
      }
    }
    keys_[layer].insert(keys_[layer].end(), k.data.begin(), k.data.end());
    values_[layer].insert(values_[layer].end(), v.data.begin(), v.data.end());
    auto& sums = summaries_[layer];
    for (std::size_t i = 0; i < k.rows; ++i) {
      const std::size_t pos = start + i;
      const std::size_t id = pos / shape_.block_size;
      const float* row = k.data.data() + i * dim();
      if (id == sums.size()) {
        sums.push_back({std::vector<float>(row, row + dim()), std::vector<float>(row, row + dim())});
        continue;
      }
      auto& s = sums[id];
      for (std::size_t d = 0; d < dim(); ++d) {
        s.key_max[d] = std::max(s.key_max[d], row[d]);
        s.key_min[d] = std::min(s.key_min[d], row[d]);
      }
    }
  }

  // KVView
  std::size_t context_length() const override { return length(); }
  void write(std::size_t layer, const Tensor2D& k, const Tensor2D& v, std::span<const std::size_t> positions) override {
    append_kv(layer, k, v, positions);
  }
  MatrixView keys(std::size_t layer) const override { return {keys_[layer].data(), length(layer), dim(), dim()}; }
  MatrixView values(std::size_t layer) const override {
    return {values_[layer].data(), length(layer), dim(), dim()};
  }

  std::span<const float> key_row(std::size_t layer, std::size_t pos) const {
    return {keys_[layer].data() + pos * dim(), dim()};
  }
  std::span<const float> value_row(std::size_t layer, std::size_t pos) const {
    return {values_[layer].data() + pos * dim(), dim()};
  }

  /// Drops every position >= new_length in all layers and recomputes the
  /// trailing block summary from the remaining rows.
  void truncate(std::size_t new_length) override {
    for (std::size_t l = 0; l < shape_.n_layers; ++l) {
      if (new_length >= length(l)) continue;
      keys_[l].resize(new_length * dim());
      values_[l].resize(new_length * dim());
      const std::size_t blocks = block_count(l);
      summaries_[l].resize(blocks);
      if (blocks > 0) {
        summaries_[l].back() = summarize_block(block(l, blocks - 1).keys);
      }
    }
  }

  /// Tree compaction: rows at start + keep[i] move to start + i, then the
  /// cache is truncated to start + keep.size(). `keep` must be increasing.
  void retain_rows(std::size_t start, std::span<const std::size_t> keep) {
    for (std::size_t l = 0; l < shape_.n_layers; ++l) {
      for (std::size_t i = 0; i < keep.size(); ++i) {
        if (i > 0 && keep[i] <= keep[i - 1]) {
          throw std::invalid_argument("retain_rows: offsets must be increasing");
        }
        const std::size_t src = start + keep[i];
        const std::size_t dst = start + i;
        if (src >= length(l)) {
          throw std::out_of_range("retain_rows: offset beyond cache length");
        }
        if (src == dst) continue;
        std::copy_n(keys_[l].begin() + src * dim(), dim(), keys_[l].begin() + dst * dim());
        std::copy_n(values_[l].begin() + src * dim(), dim(), values_[l].begin() + dst * dim());
      }
    }
    // Moved rows invalidate summaries from the first moved block onwards.
    const std::size_t new_len = start + keep.size();
    for (std::size_t l = 0; l < shape_.n_layers; ++l) {
      keys_[l].resize(std::min(keys_[l].size(), new_len * dim()));
      values_[l].resize(std::min(values_[l].size(), new_len * dim()));
      const std::size_t blocks = block_count(l);
      summaries_[l].resize(blocks);
      for (std::size_t b = start / shape_.block_size; b < blocks; ++b) {
        summaries_[l][b] = summarize_block(block(l, b).keys);
      }
    }
  }

  /// Bytes of K and V across all layers.
  std::size_t bytes() const { return 2 * shape_.n_layers * length() * dim() * sizeof(float); }

 private:
  KVCacheShape shape_;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  std::vector<std::vector<BlockSummary>> summaries_;
};

/// Appends tree-staged rows to a paged cache. Siblings share positions, so
/// rows go into consecutive slots instead of being checked for contiguity;
/// rotary phases were already applied with the true positions.
class StagingKVView : public KVView {
 public:
  explicit StagingKVView(PagedKVCache& cache) : cache_(cache) {}

  std::size_t context_length() const override { return cache_.length(); }
  void write(std::size_t layer, const Tensor2D& k, const Tensor2D& v, std::span<const std::size_t> positions) override {
    std::vector<std::size_t> slots(positions.size());
    std::iota(slots.begin(), slots.end(), cache_.length(layer));
    cache_.append_kv(layer, k, v, slots);
  }
  MatrixView keys(std::size_t layer) const override { return cache_.keys(layer); }
  MatrixView values(std::size_t layer) const override { return cache_.values(layer); }

 private:
  PagedKVCache& cache_;
};

// ---------------------------------------------------------------------------
// Block scoring
// ---------------------------------------------------------------------------

enum class ScoreVariant { kAsWritten, kElementwise };
enum class Reduction { kMax, kMean, kLast };

inline const char* to_string(ScoreVariant v) { return v == ScoreVariant::kAsWritten ? "as-written" : "elementwise"; }

inline const char* to_string(Reduction r) {
  switch (r) {
    case Reduction::kMax: return "max";
    case Reduction::kMean: return "mean";
    case Reduction::kLast: return "last";
  }
  return "mean";
}

inline ScoreVariant score_variant_from_string(const std::string& s) {
  if (s == "as-written") return ScoreVariant::kAsWritten;
  if (s == "elementwise") return ScoreVariant::kElementwise;
  throw std::invalid_argument("unknown score variant: " + s);
}

inline Reduction reduction_from_string(const std::string& s) {
  if (s == "max") return Reduction::kMax;
  if (s == "mean") return Reduction::kMean;
  if (s == "last") return Reduction::kLast;
  throw std::invalid_argument("unknown reduction: " + s);
}

/// Score of one query against one block, summed over heads. `head_dim == 0`
/// treats the whole vector as a single head.
///   as-written:  max(q . K_max, q . K_min) per head
///   elementwise: sum_d max(q_d K_max_d, q_d K_min_d) per head
inline double query_block_score(std::span<const float> q, const BlockSummary& s, ScoreVariant variant,
                                std::size_t head_dim = 0) {
  if (q.size() != s.key_max.size() || q.size() != s.key_min.size()) {
    throw std::invalid_argument("score_block: dimension mismatch");
  }
  const std::size_t hd = head_dim == 0 ? q.size() : head_dim;
  if (q.size() % hd != 0) {
    throw std::invalid_argument("score_block: head_dim does not divide query width");
  }
  double total = 0.0;
  for (std::size_t h = 0; h < q.size() / hd; ++h) {
    const float* qh = q.data() + h * hd;
    const float* hi = s.key_max.data() + h * hd;
    const float* lo = s.key_min.data() + h * hd;
    if (variant == ScoreVariant::kAsWritten) {
      total += std::max(dot(qh, hi, hd), dot(qh, lo, hd));
    } else {
      double acc = 0.0;
      for (std::size_t d = 0; d < hd; ++d) {
        acc += std::max(static_cast<double>(qh[d]) * hi[d], static_cast<double>(qh[d]) * lo[d]);
      }
      total += acc;
    }
  }
  return total;
}

inline double reduce_scores(std::span<const double> scores, Reduction reduction) {
  if (scores.empty()) {
    throw std::invalid_argument("score_block: no queries");
  }
  switch (reduction) {
    case Reduction::kMax: return *std::max_element(scores.begin(), scores.end());
    case Reduction::kMean: {
      double sum = 0.0;
      for (double s : scores) sum += s;
      return sum / static_cast<double>(scores.size());
    }
    case Reduction::kLast: return scores.back();
  }
  return 0.0;
}

/// Block importance for the query rows (in verification order).
inline double score_block(MatrixView queries, const BlockSummary& s, ScoreVariant variant, Reduction reduction,
                          std::size_t head_dim = 0) {
  if (queries.rows == 0) {
    throw std::invalid_argument("score_block: no queries");
  }
  std::vector<double> per_query(queries.rows);
  for (std::size_t j = 0; j < queries.rows; ++j) {
    per_query[j] = query_block_score({queries.row(j), queries.cols}, s, variant, head_dim);
  }
  return reduce_scores(per_query, reduction);
}

// ---------------------------------------------------------------------------
// Selection and the partial cache
// ---------------------------------------------------------------------------

struct SelectionConfig {
  std::size_t budget_tokens = 512;
  std::size_t n_sink = 2;
  std::size_t n_local = 4;
  ScoreVariant variant = ScoreVariant::kAsWritten;
  Reduction reduction = Reduction::kMean;
};

/// Block ids per segment, each ascending.
struct LayerSelection {
  std::vector<std::size_t> sink;
  std::vector<std::size_t> retrieval;
  std::vector<std::size_t> local;

  bool operator==(const LayerSelection&) const = default;
};

/// Sink and local blocks are fixed; middle blocks are ranked by score
/// (descending, ties to the lower id) and the best that fit the remaining
/// budget are kept. The trailing, possibly partial, block is always local.
inline LayerSelection select_blocks(const PagedKVCache& cache, std::size_t layer, MatrixView queries,
                                    const SelectionConfig& cfg) {
  const std::size_t bs = cache.block_size();
  if (cfg.budget_tokens < (cfg.n_sink + cfg.n_local) * bs) {
    throw std::invalid_argument("budget smaller than sink + local blocks");
  }
  const std::size_t nb = cache.block_count(layer);
  LayerSelection sel;
  const std::size_t n_sink = std::min(cfg.n_sink, nb);
  const std::size_t n_local = std::min(cfg.n_local, nb - n_sink);
  std::size_t fixed_tokens = 0;
  for (std::size_t b = 0; b < n_sink; ++b) {
    sel.sink.push_back(b);
    fixed_tokens += cache.block(layer, b).filled;
  }
  for (std::size_t b = nb - n_local; b < nb; ++b) {
    sel.local.push_back(b);
    fixed_tokens += cache.block(layer, b).filled;
  }
  const std::size_t middle_begin = n_sink;
  const std::size_t middle_end = nb - n_local;
  const std::size_t slots = (cfg.budget_tokens - std::min(cfg.budget_tokens, fixed_tokens)) / bs;
  if (middle_end <= middle_begin || slots == 0) {
    return sel;
  }
  if (slots >= middle_end - middle_begin) {
    for (std::size_t b = middle_begin; b < middle_end; ++b) sel.retrieval.push_back(b);
    return sel;
  }
  std::vector<std::pair<double, std::size_t>> ranked;
  ranked.reserve(middle_end - middle_begin);
  for (std::size_t b = middle_begin; b < middle_end; ++b) {
    ranked.emplace_back(score_block(queries, cache.summary(layer, b), cfg.variant, cfg.reduction,
                                    cache.shape().head_dim),
                        b);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t i = 0; i < slots; ++i) sel.retrieval.push_back(ranked[i].second);
  std::sort(sel.retrieval.begin(), sel.retrieval.end());
  return sel;
}

/// On-device partial KV cache: copies of the selected sink, retrieval and
/// local blocks followed by a buffer of tokens verified only against this
/// partial context. All four segments form one contiguous attention context.
class PartialCache : public KVView {
 public:
  PartialCache() = default;

  PartialCache(const PagedKVCache& full, std::vector<LayerSelection> selections, const SelectionConfig& cfg,
               std::size_t buffer_cap)
      : cfg_(cfg),
        buffer_cap_(buffer_cap),
        dim_(full.dim()),
        block_size_(full.block_size()),
        selections_(std::move(selections)),
        keys_(full.shape().n_layers),
        values_(full.shape().n_layers),
        positions_(full.shape().n_layers) {
    if (selections_.size() != full.shape().n_layers) {
      throw std::invalid_argument("PartialCache: one selection per layer required");
    }
    for (std::size_t l = 0; l < selections_.size(); ++l) {
      const auto& sel = selections_[l];
      for (const auto* seg : {&sel.sink, &sel.retrieval, &sel.local}) {
        for (auto id : *seg) {
          const KVBlock b = full.block(l, id);
          for (std::size_t r = 0; r < b.filled; ++r) {
            keys_[l].insert(keys_[l].end(), b.keys.row(r), b.keys.row(r) + dim_);
            values_[l].insert(values_[l].end(), b.values.row(r), b.values.row(r) + dim_);
            positions_[l].push_back(b.first_position + r);
          }
        }
      }
      if (positions_[l].size() != positions_[0].size()) {
        throw std::invalid_argument("PartialCache: layers selected different token counts");
      }
    }
    segment_length_ = positions_[0].size();
    check_contiguity();
  }

  const SelectionConfig& selection_config() const { return cfg_; }
  const std::vector<LayerSelection>& selections() const { return selections_; }
  std::size_t buffer_cap() const { return buffer_cap_; }
  std::size_t segment_length() const { return segment_length_; }
  std::size_t retrieval_tokens(std::size_t layer) const {
    return selections_[layer].retrieval.size() * block_size_;
  }
  std::size_t buffer_occupancy() const { return buffer_positions_.size(); }
  const std::vector<std::size_t>& buffer_positions() const { return buffer_positions_; }
  std::size_t n_layers() const { return keys_.size(); }

  /// Token positions of every row of `layer`, in attention order.
  std::vector<std::size_t> positions(std::size_t layer) const {
    std::vector<std::size_t> out = positions_[layer];
    out.insert(out.end(), buffer_positions_.begin(), buffer_positions_.end());
    return out;
  }

  std::size_t rows(std::size_t layer) const { return keys_[layer].size() / dim_; }

  // KVView
  std::size_t context_length() const override {
    std::size_t n = rows(0);
    for (std::size_t l = 1; l < keys_.size(); ++l) n = std::min(n, rows(l));
    return n;
  }

  void write(std::size_t layer, const Tensor2D& k, const Tensor2D& v, std::span<const std::size_t> positions) override {
    if (layer >= keys_.size() || k.cols != dim_ || v.cols != dim_ || k.rows != v.rows ||
        k.rows != positions.size()) {
      throw std::invalid_argument("PartialCache::write: shape mismatch");
    }
    const std::size_t buffered = rows(layer) - segment_length_;
    if (buffered + positions.size() > buffer_cap_) {
      throw std::length_error("buffer overflow: " + std::to_string(buffered + positions.size()) + " > cap " +
                              std::to_string(buffer_cap_));
    }
    if (buffered == buffer_positions_.size()) {
      // First layer of this forward records the positions. Tree siblings may
      // share a position, so only ordering against committed rows is checked
      // here; retain_buffer_rows re-checks the compacted result.
      const auto committed = this->positions(layer);
      for (auto p : positions) {
        if (!committed.empty() && p <= committed.back()) {
          throw std::logic_error("partial view violates contiguity");
        }
        buffer_positions_.push_back(p);
      }
    }
    keys_[layer].insert(keys_[layer].end(), k.data.begin(), k.data.end());
    values_[layer].insert(values_[layer].end(), v.data.begin(), v.data.end());
  }

  MatrixView keys(std::size_t layer) const override { return {keys_[layer].data(), rows(layer), dim_, dim_}; }
  MatrixView values(std::size_t layer) const override { return {values_[layer].data(), rows(layer), dim_, dim_}; }

  std::span<const float> key_row(std::size_t layer, std::size_t row) const {
    return {keys_[layer].data() + row * dim_, dim_};
  }
  std::span<const float> value_row(std::size_t layer, std::size_t row) const {
    return {values_[layer].data() + row * dim_, dim_};
  }

  /// Removes buffered tokens at positions >= first_invalid.
  void truncate_buffer(std::size_t first_invalid) {
    std::size_t keep = 0;
    while (keep < buffer_positions_.size() && buffer_positions_[keep] < first_invalid) ++keep;
    buffer_positions_.resize(keep);
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      keys_[l].resize((segment_length_ + keep) * dim_);
      values_[l].resize((segment_length_ + keep) * dim_);
    }
  }

  /// Tree compaction inside the buffer: buffer rows at start + keep[i] move
  /// to start + i; the buffer is cut after the last kept row. Positions of
  /// kept rows are rewritten to be consecutive from the start row.
  void retain_buffer_rows(std::size_t start, std::span<const std::size_t> keep) {
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      for (std::size_t i = 0; i < keep.size(); ++i) {
        const std::size_t src = segment_length_ + start + keep[i];
        const std::size_t dst = segment_length_ + start + i;
        if (src >= rows(l)) {
          throw std::out_of_range("retain_buffer_rows: offset beyond buffer");
        }
        if (src == dst) continue;
        std::copy_n(keys_[l].begin() + src * dim_, dim_, keys_[l].begin() + dst * dim_);
        std::copy_n(values_[l].begin() + src * dim_, dim_, values_[l].begin() + dst * dim_);
      }
      keys_[l].resize((segment_length_ + start + keep.size()) * dim_);
      values_[l].resize((segment_length_ + start + keep.size()) * dim_);
    }
    const std::size_t first_pos = buffer_positions_.at(start);
    buffer_positions_.resize(start + keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) buffer_positions_[start + i] = first_pos + i;
    check_contiguity();
  }

  void check_contiguity() const {
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      const auto pos = positions(l);
      for (std::size_t i = 1; i < pos.size(); ++i) {
        if (pos[i] <= pos[i - 1]) {
          throw std::logic_error("partial view violates contiguity");
        }
      }
    }
  }

  std::size_t bytes() const { return 2 * keys_.size() * context_length() * dim_ * sizeof(float); }

 private:
  SelectionConfig cfg_;
  std::size_t buffer_cap_ = 0;
  std::size_t dim_ = 0;
  std::size_t block_size_ = 16;
  std::vector<LayerSelection> selections_;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  std::vector<std::vector<std::size_t>> positions_;
  std::vector<std::size_t> buffer_positions_;
  std::size_t segment_length_ = 0;
};

/// Selects blocks per layer with that layer's query rows and copies them
/// into a fresh partial cache with an empty buffer.
inline PartialCache select_partial(const PagedKVCache& cache, std::span<const Tensor2D> queries,
                                   const SelectionConfig& cfg, std::size_t buffer_cap) {
  const std::size_t n_layers = cache.shape().n_layers;
  if (queries.size() != n_layers) {
    throw std::invalid_argument("select_partial: one query matrix per layer required");
  }
  std::vector<LayerSelection> selections;
  selections.reserve(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    selections.push_back(select_blocks(cache, l, queries[l], cfg));
  }
  return {cache, std::move(selections), cfg, buffer_cap};
}

/// Rebuilds the partial view from an up-to-date full cache.
inline PartialCache refresh_partial(const PagedKVCache& cache, const PartialCache& view,
                                    std::span<const Tensor2D> queries, std::size_t committed_length) {
  if (cache.length() != committed_length) {
    throw std::logic_error("refresh_partial: full cache lags accepted tokens (" + std::to_string(cache.length()) +
                           " != " + std::to_string(committed_length) + ")");
  }
  return select_partial(cache, queries, view.selection_config(), view.buffer_cap());
}

/// Removes all entries at positions >= first_invalid from the full cache,
/// the partial buffer and the draft store.
inline void evict_rejected(PagedKVCache& full, PartialCache* partial, Truncatable* draft, std::size_t first_invalid,
                           std::size_t commit_point) {
  if (first_invalid < commit_point) {
    throw std::invalid_argument("evict_rejected: position " + std::to_string(first_invalid) +
                                " precedes commit point " + std::to_string(commit_point));
  }
  full.truncate(std::min(full.length(), first_invalid));
  if (partial != nullptr) {
    partial->truncate_buffer(first_invalid);
  }
  if (draft != nullptr) {
    draft->truncate(std::min(draft->length(), first_invalid));
  }
}

// ---------------------------------------------------------------------------
// Offload cost model
// ---------------------------------------------------------------------------

enum class VerifyMode { kFull, kPartial, kRefresh };

inline const char* to_string(VerifyMode m) {
  switch (m) {
    case VerifyMode::kFull: return "full";
    case VerifyMode::kPartial: return "partial";
    case VerifyMode::kRefresh: return "refresh";
  }
  return "full";
}

inline VerifyMode verify_mode_from_string(const std::string& s) {
  if (s == "full") return VerifyMode::kFull;
  if (s == "partial") return VerifyMode::kPartial;
  if (s == "refresh") return VerifyMode::kRefresh;
  throw std::invalid_argument("unknown verify mode: " + s);
}

/// Full cache in host memory, partial and draft caches on device by default.
struct OffloadCostModel {
  double bandwidth_bytes_per_s = 16e9;
  double per_transfer_latency_s = 10e-6;
  bool full_offloaded = true;
  bool partial_offloaded = false;

  void validate() const {
    if (!(bandwidth_bytes_per_s > 0.0) || !(per_transfer_latency_s >= 0.0)) {
      throw std::invalid_argument("OffloadCostModel: bandwidth must be positive and latency non-negative");
    }
  }
};

struct ModeledStep {
  VerifyMode mode = VerifyMode::kFull;
  std::size_t tokens_in_step = 0;
  std::size_t full_cache_bytes = 0;     // bytes of the full cache read by this step
  std::size_t partial_cache_bytes = 0;  // bytes of the partial cache read by this step
  std::size_t n_layers = 1;
};

/// compute + per off-device cache touched: bytes / bandwidth + latency per layer.
inline double modeled_step_time(const ModeledStep& step, const OffloadCostModel& cost, double compute_time_s) {
  cost.validate();
  if (compute_time_s < 0.0) {
    throw std::invalid_argument("modeled_step_time: negative compute time");
  }
  double t = compute_time_s;
  auto transfer = [&](std::size_t bytes) {
    return static_cast<double>(bytes) / cost.bandwidth_bytes_per_s +
           cost.per_transfer_latency_s * static_cast<double>(step.n_layers);
  };
  const bool touches_full = step.mode != VerifyMode::kPartial;
  if (touches_full && cost.full_offloaded) {
    t += transfer(step.full_cache_bytes);
  }
  if (step.mode != VerifyMode::kFull && cost.partial_offloaded) {
    t += transfer(step.partial_cache_bytes);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Debug dump (docs/cache-dump.md)
// ---------------------------------------------------------------------------

inline void dump_cache(const PagedKVCache& cache, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("cannot open for writing: " + path);
  }
  io::Writer w(os);
  w.bytes("SPKV", 4);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(cache.shape().n_layers));
  w.u32(static_cast<std::uint32_t>(cache.shape().n_heads));
  w.u32(static_cast<std::uint32_t>(cache.shape().head_dim));
  w.u32(static_cast<std::uint32_t>(cache.block_size()));
  for (std::size_t l = 0; l < cache.shape().n_layers; ++l) {
    const auto nb = cache.block_count(l);
    w.u32(static_cast<std::uint32_t>(nb));
    for (std::size_t b = 0; b < nb; ++b) {
      const KVBlock blk = cache.block(l, b);
      w.u32(static_cast<std::uint32_t>(blk.first_position));
      w.u32(static_cast<std::uint32_t>(blk.filled));
      Tensor2D k(blk.filled, cache.dim()), v(blk.filled, cache.dim());
      for (std::size_t r = 0; r < blk.filled; ++r) {
        std::copy_n(blk.keys.row(r), cache.dim(), k.data.data() + r * cache.dim());
        std::copy_n(blk.values.row(r), cache.dim(), v.data.data() + r * cache.dim());
      }
      const std::string base = "layer" + std::to_string(l) + ".block" + std::to_string(b);
      w.tensor(base + ".k", k);
      w.tensor(base + ".v", v);
    }
  }
}

}  // namespace specpv
