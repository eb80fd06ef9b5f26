// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "specpv/io.hpp"
#include "specpv/numerics.hpp"

namespace specpv {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t dim = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 256;
  RopeConfig rope{};
  std::vector<std::size_t> feature_tap_layers{0, 1, 3};
  std::size_t max_positions = 16384;
  double norm_eps = 1e-5;
  std::int32_t eos_token = -1;  // negative: no end-of-sequence token

  void validate() const {
    if (vocab_size == 0 || dim == 0 || n_layers == 0 || n_heads == 0 || head_dim == 0 || ffn_dim == 0) {
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
    if (dim != n_heads * head_dim) {
      throw std::invalid_argument("ModelConfig: dim must equal n_heads * head_dim");
    }
    if (rope.head_dim != head_dim) {
      throw std::invalid_argument("ModelConfig: rope.head_dim must equal head_dim");
    }
    rope.validate();
    if (feature_tap_layers.empty()) {
      throw std::invalid_argument("ModelConfig: feature_tap_layers must not be empty");
    }
    for (std::size_t i = 0; i < feature_tap_layers.size(); ++i) {
      if (feature_tap_layers[i] >= n_layers) {
        throw std::invalid_argument("ModelConfig: feature tap layer out of range");
      }
      if (i > 0 && feature_tap_layers[i] <= feature_tap_layers[i - 1]) {
        throw std::invalid_argument("ModelConfig: feature_tap_layers must be sorted and unique");
      }
    }
    if (eos_token >= static_cast<std::int32_t>(vocab_size)) {
      throw std::invalid_argument("ModelConfig: eos_token outside vocabulary");
    }
    if (max_positions == 0 || !(norm_eps > 0.0)) {
      throw std::invalid_argument("ModelConfig: invalid max_positions or norm_eps");
    }
  }

  std::size_t feature_dim() const { return feature_tap_layers.size() * dim; }

  /// Embedding + per-layer (2 norms, 4 attention projections, 3 FFN
  /// projections) + final norm + untied output head.
  std::size_t parameter_count() const {
    const std::size_t per_layer = 2 * dim + 4 * dim * dim + 3 * dim * ffn_dim;
    return vocab_size * dim + n_layers * per_layer + dim + vocab_size * dim;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Desk-scale default configuration with an optional vocabulary size.
inline ModelConfig tiny_config(std::size_t vocab = 256) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  return cfg;
}

struct LayerWeights {
  Tensor2D attn_norm;  // [1 x dim]
  Tensor2D wq, wk, wv, wo;
  Tensor2D ffn_norm;  // [1 x dim]
  Tensor2D w_gate, w_up;  // [ffn x dim]
  Tensor2D w_down;        // [dim x ffn]

  bool operator==(const LayerWeights&) const = default;
};

/// Hidden states tapped for one token, concatenated in tap order.
struct Feature {
  std::size_t position = 0;
  std::vector<float> values;

  bool operator==(const Feature&) const = default;
};

using FeatureBundle = std::vector<Feature>;

/// Key/value context that a forward pass attends over. `write` appends the
/// new tokens' (post-rotary) keys and values for one layer; afterwards
/// `keys(layer)` and `values(layer)` cover context followed by the new rows.
class KVView {
 public:
  virtual ~KVView() = default;
  virtual std::size_t context_length() const = 0;
  virtual void write(std::size_t layer, const Tensor2D& keys, const Tensor2D& values,
                     std::span<const std::size_t> positions) = 0;
  virtual MatrixView keys(std::size_t layer) const = 0;
  virtual MatrixView values(std::size_t layer) const = 0;
};

struct BlockShape {
  std::size_t dim = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  double norm_eps = 1e-5;
};

/// Causal mask over `context` visible keys followed by `n` new tokens.
inline BoolMatrix causal_mask(std::size_t context, std::size_t n) {
  BoolMatrix m(n, context + n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < context + i + 1; ++j) {
      m.set(i, j);
    }
  }
  return m;
}

/// One pre-norm decoder block (attention + SiLU-gated FFN) applied to
/// `hidden` in place. Writes the block's K/V into `view` at `layer_slot`.
inline void block_forward(const LayerWeights& w, const BlockShape& shape, const RotaryEmbedding& rope,
                          Tensor2D& hidden, std::span<const std::size_t> positions, KVView& view,
                          std::size_t layer_slot, const BoolMatrix* mask, Tensor2D* queries_out = nullptr) {
  const std::size_t n = hidden.rows;
  const Tensor2D xn = rmsnorm_rows(hidden, w.attn_norm.data, shape.norm_eps);
  Tensor2D q = matmul_nt(xn, w.wq);
  Tensor2D k = matmul_nt(xn, w.wk);
  Tensor2D v = matmul_nt(xn, w.wv);
  for (std::size_t i = 0; i < n; ++i) {
    rope.apply(q.data.data() + i * shape.dim, shape.n_heads, positions[i]);
    rope.apply(k.data.data() + i * shape.dim, shape.n_heads, positions[i]);
  }
  view.write(layer_slot, k, v, positions);
  const MatrixView keys = view.keys(layer_slot);
  const MatrixView values = view.values(layer_slot);
  if (mask != nullptr && (mask->rows() != n || mask->cols() != keys.rows)) {
    throw std::invalid_argument("mask shape mismatch");
  }
  BoolMatrix causal;
  const BoolMatrix* effective = mask;
  if (effective == nullptr && n > 1) {
    causal = causal_mask(keys.rows - n, n);
    effective = &causal;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
  const Tensor2D attn = multihead_attention(q, keys, values, effective, shape.n_heads, scale);
  const Tensor2D proj = matmul_nt(attn, w.wo);
  for (std::size_t i = 0; i < hidden.data.size(); ++i) {
    hidden.data[i] += proj.data[i];
  }
  const Tensor2D xn2 = rmsnorm_rows(hidden, w.ffn_norm.data, shape.norm_eps);
  Tensor2D gate = matmul_nt(xn2, w.w_gate);
  const Tensor2D up = matmul_nt(xn2, w.w_up);
  for (std::size_t i = 0; i < gate.data.size(); ++i) {
    gate.data[i] = silu(gate.data[i]) * up.data[i];
  }
  const Tensor2D down = matmul_nt(gate, w.w_down);
  for (std::size_t i = 0; i < hidden.data.size(); ++i) {
    hidden.data[i] += down.data[i];
  }
  if (queries_out != nullptr) {
    *queries_out = std::move(q);
  }
}

struct ForwardResult {
  Tensor2D logits;                // [n_tokens x vocab]
  FeatureBundle taps;             // one per input token
  std::vector<Tensor2D> queries;  // per layer, post-rotary; empty unless requested
};

/// Decoder-only transformer with feature taps. Immutable once built.
class TinyTransformer {
 public:
  TinyTransformer() = default;
  TinyTransformer(ModelConfig cfg, Tensor2D embedding, std::vector<LayerWeights> layers, Tensor2D final_norm,
                  Tensor2D lm_head)
      : cfg_(std::move(cfg)),
        embedding_(std::move(embedding)),
        layers_(std::move(layers)),
        final_norm_(std::move(final_norm)),
        lm_head_(std::move(lm_head)) {
    cfg_.validate();
    rope_ = RotaryEmbedding(cfg_.rope);
    check_shapes();
  }

  const ModelConfig& config() const { return cfg_; }
  const Tensor2D& embedding() const { return embedding_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Tensor2D& final_norm() const { return final_norm_; }
  const Tensor2D& lm_head() const { return lm_head_; }
  const RotaryEmbedding& rope() const { return rope_; }
  BlockShape block_shape() const { return {cfg_.dim, cfg_.n_heads, cfg_.head_dim, cfg_.norm_eps}; }

  /// Final norm + output head.
  Tensor2D logits_from_hidden(const Tensor2D& hidden) const {
    return matmul_nt(rmsnorm_rows(hidden, final_norm_.data, cfg_.norm_eps), lm_head_);
  }

  Tensor2D embed(std::span<const int> tokens) const {
    Tensor2D h(tokens.size(), cfg_.dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      check_token(tokens[i]);
      std::copy_n(embedding_.data.data() + static_cast<std::size_t>(tokens[i]) * cfg_.dim, cfg_.dim,
                  h.data.data() + i * cfg_.dim);
    }
    return h;
  }

  void check_token(int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= cfg_.vocab_size) {
      throw std::invalid_argument("token id outside vocabulary: " + std::to_string(token));
    }
  }

  /// Runs `tokens` at `positions` against `view`. With no mask the new
  /// tokens are causal among themselves and see the whole context. Every
  /// input token gets a logits row.
  ForwardResult forward(std::span<const int> tokens, std::span<const std::size_t> positions, KVView& view,
                        const BoolMatrix* tree_mask = nullptr, bool capture_queries = false) const {
    if (tokens.size() != positions.size()) {
      throw std::invalid_argument("forward: tokens/positions length mismatch");
    }
    if (tokens.empty()) {
      throw std::invalid_argument("forward: no tokens");
    }
    for (auto p : positions) {
      if (p >= cfg_.max_positions) {
        throw std::out_of_range("position overflow: " + std::to_string(p) + " >= rope limit " +
                                std::to_string(cfg_.max_positions));
      }
    }
    const std::size_t ctx = view.context_length();
    if (tree_mask != nullptr && (tree_mask->rows() != tokens.size() || tree_mask->cols() != ctx + tokens.size())) {
      throw std::invalid_argument("mask shape mismatch");
    }
    ForwardResult out;
    out.taps.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      out.taps[i].position = positions[i];
      out.taps[i].values.resize(cfg_.feature_dim());
    }
    if (capture_queries) {
      out.queries.resize(cfg_.n_layers);
    }
    Tensor2D hidden = embed(tokens);
    const BlockShape shape = block_shape();
    std::size_t tap = 0;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      block_forward(layers_[l], shape, rope_, hidden, positions, view, l, tree_mask,
                    capture_queries ? &out.queries[l] : nullptr);
      if (tap < cfg_.feature_tap_layers.size() && cfg_.feature_tap_layers[tap] == l) {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
          std::copy_n(hidden.data.data() + i * cfg_.dim, cfg_.dim, out.taps[i].values.data() + tap * cfg_.dim);
        }
        ++tap;
      }
    }
    out.logits = logits_from_hidden(hidden);
    return out;
  }

  bool operator==(const TinyTransformer& o) const {
    return cfg_ == o.cfg_ && embedding_ == o.embedding_ && layers_ == o.layers_ && final_norm_ == o.final_norm_ &&
           lm_head_ == o.lm_head_;
  }

  /// Tensors in checkpoint order.
  std::vector<std::pair<std::string, const Tensor2D*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor2D*>> out;
    out.emplace_back("tok_embeddings", &embedding_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const auto& w = layers_[l];
      out.emplace_back(p + "attn_norm", &w.attn_norm);
      out.emplace_back(p + "wq", &w.wq);
      out.emplace_back(p + "wk", &w.wk);
      out.emplace_back(p + "wv", &w.wv);
      out.emplace_back(p + "wo", &w.wo);
      out.emplace_back(p + "ffn_norm", &w.ffn_norm);
      out.emplace_back(p + "w_gate", &w.w_gate);
      out.emplace_back(p + "w_up", &w.w_up);
      out.emplace_back(p + "w_down", &w.w_down);
    }
    out.emplace_back("final_norm", &final_norm_);
    out.emplace_back("lm_head", &lm_head_);
    return out;
  }

 private:
  void check_shapes() const {
    auto expect = [](const Tensor2D& t, std::size_t r, std::size_t c, const char* what) {
      if (t.rows != r || t.cols != c || t.data.size() != r * c) {
        throw std::invalid_argument(std::string("weight shape mismatch: ") + what);
      }
    };
    const auto& c = cfg_;
    expect(embedding_, c.vocab_size, c.dim, "tok_embeddings");
    if (layers_.size() != c.n_layers) {
      throw std::invalid_argument("weight shape mismatch: layer count");
    }
    for (const auto& w : layers_) {
      expect(w.attn_norm, 1, c.dim, "attn_norm");
      expect(w.wq, c.dim, c.dim, "wq");
      expect(w.wk, c.dim, c.dim, "wk");
      expect(w.wv, c.dim, c.dim, "wv");
      expect(w.wo, c.dim, c.dim, "wo");
      expect(w.ffn_norm, 1, c.dim, "ffn_norm");
      expect(w.w_gate, c.ffn_dim, c.dim, "w_gate");
      expect(w.w_up, c.ffn_dim, c.dim, "w_up");
      expect(w.w_down, c.dim, c.ffn_dim, "w_down");
    }
    expect(final_norm_, 1, c.dim, "final_norm");
    expect(lm_head_, c.vocab_size, c.dim, "lm_head");
  }

  ModelConfig cfg_;
  Tensor2D embedding_;
  std::vector<LayerWeights> layers_;
  Tensor2D final_norm_;
  Tensor2D lm_head_;
  RotaryEmbedding rope_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the column count.
inline Tensor2D random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor2D t(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  for (auto& v : t.data) {
    v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return t;
}

inline LayerWeights random_layer(std::size_t dim, std::size_t ffn_dim, Rng& rng) {
  LayerWeights w;
  w.attn_norm = Tensor2D(1, dim, 1.0f);
  w.wq = random_matrix(dim, dim, rng);
  w.wk = random_matrix(dim, dim, rng);
  w.wv = random_matrix(dim, dim, rng);
  w.wo = random_matrix(dim, dim, rng);
  w.ffn_norm = Tensor2D(1, dim, 1.0f);
  w.w_gate = random_matrix(ffn_dim, dim, rng);
  w.w_up = random_matrix(ffn_dim, dim, rng);
  w.w_down = random_matrix(dim, ffn_dim, rng);
  return w;
}

inline TinyTransformer init_random(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  // Embedding rows have fan-in 1.
  Tensor2D embedding(cfg.vocab_size, cfg.dim);
  for (auto& v : embedding.data) {
    v = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  std::vector<LayerWeights> layers;
  layers.reserve(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    layers.push_back(random_layer(cfg.dim, cfg.ffn_dim, rng));
  }
  Tensor2D final_norm(1, cfg.dim, 1.0f);
  Tensor2D lm_head = random_matrix(cfg.vocab_size, cfg.dim, rng);
  return {cfg, std::move(embedding), std::move(layers), std::move(final_norm), std::move(lm_head)};
}

/// Approximate multiply-add count of one forward over `n_tokens` new tokens
/// attending to `context` earlier keys, times two (FLOPs).
inline double forward_flops(const ModelConfig& cfg, std::size_t n_layers, std::size_t n_tokens, std::size_t context,
                            bool with_head = true) {
  const double d = static_cast<double>(cfg.dim);
  const double per_token_layer = 2.0 * (4.0 * d * d + 3.0 * d * static_cast<double>(cfg.ffn_dim));
  const double keys_seen = static_cast<double>(context) + static_cast<double>(n_tokens);
  const double attn = 4.0 * keys_seen * d;
  const double head = with_head ? 2.0 * static_cast<double>(cfg.vocab_size) * d : 0.0;
  return static_cast<double>(n_tokens) * (static_cast<double>(n_layers) * (per_token_layer + attn) + head);
}

// ---------------------------------------------------------------------------
// Checkpoint format (docs/checkpoint.md)
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'C', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_model_config(io::Writer& w, const ModelConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.vocab_size));
  w.u32(static_cast<std::uint32_t>(c.dim));
  w.u32(static_cast<std::uint32_t>(c.n_layers));
  w.u32(static_cast<std::uint32_t>(c.n_heads));
  w.u32(static_cast<std::uint32_t>(c.head_dim));
  w.u32(static_cast<std::uint32_t>(c.ffn_dim));
  w.u32(static_cast<std::uint32_t>(c.max_positions));
  w.i32(c.eos_token);
  w.u32(static_cast<std::uint32_t>(c.feature_tap_layers.size()));
  for (auto t : c.feature_tap_layers) {
    w.u32(static_cast<std::uint32_t>(t));
  }
  w.u32(static_cast<std::uint32_t>(c.rope.scaling_mode));
  w.u32(static_cast<std::uint32_t>(c.rope.original_context));
  w.f64(c.rope.theta_base);
  w.f64(c.rope.scaling_factor);
  w.f64(c.rope.low_freq_cutoff);
  w.f64(c.rope.high_freq_cutoff);
  w.f64(c.norm_eps);
}

inline ModelConfig read_model_config(io::Reader& r) {
  r.context("config block");
  ModelConfig c;
  c.vocab_size = r.u32();
  c.dim = r.u32();
  c.n_layers = r.u32();
  c.n_heads = r.u32();
  c.head_dim = r.u32();
  c.ffn_dim = r.u32();
  c.max_positions = r.u32();
  c.eos_token = r.i32();
  const auto n_taps = r.u32();
  if (n_taps > 64) {
    throw io::FormatError("implausible feature tap count");
  }
  c.feature_tap_layers.resize(n_taps);
  for (auto& t : c.feature_tap_layers) {
    t = r.u32();
  }
  const auto mode = r.u32();
  if (mode > 2) {
    throw io::FormatError("unknown rope scaling mode");
  }
  c.rope.scaling_mode = static_cast<RopeScaling>(mode);
  c.rope.original_context = r.u32();
  c.rope.theta_base = r.f64();
  c.rope.scaling_factor = r.f64();
  c.rope.low_freq_cutoff = r.f64();
  c.rope.high_freq_cutoff = r.f64();
  c.norm_eps = r.f64();
  c.rope.head_dim = c.head_dim;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(std::string("invalid config block: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const TinyTransformer& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("cannot open for writing: " + path);
  }
  io::Writer w(os);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  write_model_config(w, model.config());
  const auto tensors = model.named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.tensor(name, *t);
  }
}

inline TinyTransformer load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("cannot open for reading: " + path);
  }
  io::Reader r(is);
  r.context("magic");
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw io::FormatError("bad magic");
  }
  r.context("version");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const ModelConfig cfg = read_model_config(r);

  // Build a name -> slot table from a placeholder model of the right shape.
  Tensor2D embedding, final_norm, lm_head;
  std::vector<LayerWeights> layers(cfg.n_layers);
  std::map<std::string, Tensor2D*> slots{{"tok_embeddings", &embedding}, {"final_norm", &final_norm},
                                         {"lm_head", &lm_head}};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& w = layers[l];
    slots[p + "attn_norm"] = &w.attn_norm;
    slots[p + "wq"] = &w.wq;
    slots[p + "wk"] = &w.wk;
    slots[p + "wv"] = &w.wv;
    slots[p + "wo"] = &w.wo;
    slots[p + "ffn_norm"] = &w.ffn_norm;
    slots[p + "w_gate"] = &w.w_gate;
    slots[p + "w_up"] = &w.w_up;
    slots[p + "w_down"] = &w.w_down;
  }
  r.context("tensor count");
  const auto count = r.u32();
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.name();
    const auto it = slots.find(name);
    if (it == slots.end()) {
      throw io::FormatError("unknown tensor name '" + name + "'");
    }
    if (seen[name]) {
      throw io::FormatError("duplicate tensor '" + name + "'");
    }
    seen[name] = true;
    *it->second = r.tensor_body(name);
  }
  for (const auto& [name, slot] : slots) {
    if (!seen[name]) {
      throw io::FormatError("missing tensor '" + name + "'");
    }
  }
  try {
    return {cfg, std::move(embedding), std::move(layers), std::move(final_norm), std::move(lm_head)};
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(e.what());
  }
}

}  // namespace specpv
