// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace specpv {

// ---------------------------------------------------------------------------
// Dense storage
// ---------------------------------------------------------------------------

/// Row-major 32-bit float matrix.
struct Tensor2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Tensor2D() = default;
  Tensor2D(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
  Tensor2D(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw std::invalid_argument("Tensor2D: data length does not match shape");
    }
  }

  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Tensor2D&) const = default;
};

/// Non-owning strided view; rows are `stride` floats apart.
struct MatrixView {
  const float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  MatrixView() = default;
  MatrixView(const float* d, std::size_t r, std::size_t c, std::size_t s) : data(d), rows(r), cols(c), stride(s) {}
  MatrixView(const Tensor2D& t) : data(t.data.data()), rows(t.rows), cols(t.cols), stride(t.cols) {}  // NOLINT

  const float* row(std::size_t r) const { return data + r * stride; }

  /// Column slice [first, first + count).
  MatrixView columns(std::size_t first, std::size_t count) const { return {data + first, rows, count, stride}; }
};

/// Attention mask; true means "may attend".
class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), cells_(rows * cols, fill ? 1 : 0) {}

  static BoolMatrix ones(std::size_t rows, std::size_t cols) { return {rows, cols, true}; }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool get(std::size_t r, std::size_t c) const { return cells_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v = true) { cells_[r * cols_ + c] = v ? 1 : 0; }
  std::size_t count_row(std::size_t r) const {
    return static_cast<std::size_t>(std::count(cells_.begin() + r * cols_, cells_.begin() + (r + 1) * cols_, 1));
  }

  bool operator==(const BoolMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> cells_;
};

// ---------------------------------------------------------------------------
// Kernels. Double accumulation over 8 fixed lanes (docs/determinism.md).
// ---------------------------------------------------------------------------

inline double dot(const float* a, const float* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) {
      acc[k] += static_cast<double>(a[i + k]) * static_cast<double>(b[i + k]);
    }
  }
  for (std::size_t k = 0; i < n && k < 8; ++i, ++k) {
    acc[k] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: length mismatch");
  }
  return dot(a.data(), b.data(), a.size());
}

/// out[n x w.rows] = x[n x k] * w[w.rows x k]^T
inline Tensor2D matmul_nt(MatrixView x, MatrixView w) {
  if (x.cols != w.cols) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  }
  Tensor2D out(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const float* xr = x.row(i);
    float* orow = out.data.data() + i * out.cols;
    for (std::size_t j = 0; j < w.rows; ++j) {
      orow[j] = static_cast<float>(dot(xr, w.row(j), x.cols));
    }
  }
  return out;
}

inline std::vector<float> softmax(std::span<const float> v) {
  if (v.empty()) {
    throw std::invalid_argument("empty logits");
  }
  const float mx = *std::max_element(v.begin(), v.end());
  std::vector<double> e(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp(static_cast<double>(v[i]) - static_cast<double>(mx));
    sum += e[i];
  }
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>(e[i] / sum);
  }
  return out;
}

/// Softmax of logits / temperature, in double precision.
inline std::vector<double> softmax_tempered(std::span<const float> logits, double temperature) {
  if (logits.empty()) {
    throw std::invalid_argument("empty logits");
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("softmax_tempered: temperature must be positive");
  }
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    sum += p[i];
  }
  for (auto& x : p) {
    x /= sum;
  }
  return p;
}

/// Index of the maximum; ties go to the lowest index.
inline std::size_t argmax(std::span<const float> v) {
  if (v.empty()) {
    throw std::invalid_argument("empty logits");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) {
      best = i;
    }
  }
  return best;
}

inline void rmsnorm_into(const float* x, const float* weight, std::size_t n, double eps, float* out) {
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ss += static_cast<double>(x[i]) * x[i];
  }
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>(static_cast<double>(x[i]) * weight[i] * inv);
  }
}

inline std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> weight, double eps) {
  if (x.size() != weight.size()) {
    throw std::invalid_argument("rmsnorm: length mismatch");
  }
  if (x.empty()) {
    throw std::invalid_argument("rmsnorm: empty input");
  }
  if (eps < 0.0) {
    throw std::invalid_argument("rmsnorm: eps must be non-negative");
  }
  std::vector<float> out(x.size());
  double ss = 0.0;
  for (float v : x) {
    ss += static_cast<double>(v) * v;
  }
  const double denom = std::sqrt(ss / static_cast<double>(x.size()) + eps);
  if (denom == 0.0) {
    return out;  // zero input with eps == 0
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(x[i]) * weight[i] / denom);
  }
  return out;
}

inline Tensor2D rmsnorm_rows(const Tensor2D& x, std::span<const float> weight, double eps) {
  if (weight.size() != x.cols) {
    throw std::invalid_argument("rmsnorm: length mismatch");
  }
  Tensor2D out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    rmsnorm_into(x.data.data() + r * x.cols, weight.data(), x.cols, eps, out.data.data() + r * x.cols);
  }
  return out;
}

inline float silu(float x) { return static_cast<float>(static_cast<double>(x) / (1.0 + std::exp(-static_cast<double>(x)))); }

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

enum class RopeScaling { kNone, kLinear, kYarnLike };

struct RopeConfig {
  std::size_t head_dim = 16;
  double theta_base = 10000.0;
  RopeScaling scaling_mode = RopeScaling::kNone;
  double scaling_factor = 1.0;
  // NTK-by-parts ramp bounds, in rotations per original context window.
  double low_freq_cutoff = 1.0;
  double high_freq_cutoff = 32.0;
  std::size_t original_context = 2048;

  void validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw std::invalid_argument("RopeConfig: head_dim must be even and positive");
    }
    if (!(theta_base > 0.0)) {
      throw std::invalid_argument("RopeConfig: theta_base must be positive");
    }
    if (!(scaling_factor >= 1.0)) {
      throw std::invalid_argument("RopeConfig: scaling_factor must be >= 1");
    }
    if (scaling_mode == RopeScaling::kNone && scaling_factor != 1.0) {
      throw std::invalid_argument("RopeConfig: scaling_factor must be 1 when scaling is disabled");
    }
    if (!(low_freq_cutoff < high_freq_cutoff) || original_context == 0) {
      throw std::invalid_argument("RopeConfig: invalid yarn-like cutoffs");
    }
  }

  bool operator==(const RopeConfig&) const = default;
};

inline const char* to_string(RopeScaling s) {
  switch (s) {
    case RopeScaling::kNone: return "none";
    case RopeScaling::kLinear: return "linear";
    case RopeScaling::kYarnLike: return "yarn-like";
  }
  return "none";
}

inline RopeScaling rope_scaling_from_string(const std::string& s) {
  if (s == "none") return RopeScaling::kNone;
  if (s == "linear") return RopeScaling::kLinear;
  if (s == "yarn-like") return RopeScaling::kYarnLike;
  throw std::invalid_argument("unknown rope scaling mode: " + s);
}

/// Per-pair angular frequencies after scaling. Linear scaling is applied to
/// the position instead (see rope_effective_position) so that it is exact.
inline std::vector<double> rope_frequencies(const RopeConfig& cfg) {
  cfg.validate();
  const std::size_t half = cfg.head_dim / 2;
  std::vector<double> freqs(half);
  for (std::size_t i = 0; i < half; ++i) {
    const double base = std::pow(cfg.theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(cfg.head_dim));
    if (cfg.scaling_mode != RopeScaling::kYarnLike) {
      freqs[i] = base;
      continue;
    }
    const double wavelength = 2.0 * std::numbers::pi / base;
    const double rotations = static_cast<double>(cfg.original_context) / wavelength;
    const double ramp =
        std::clamp((rotations - cfg.low_freq_cutoff) / (cfg.high_freq_cutoff - cfg.low_freq_cutoff), 0.0, 1.0);
    freqs[i] = base / cfg.scaling_factor * (1.0 - ramp) + base * ramp;
  }
  return freqs;
}

inline double rope_effective_position(const RopeConfig& cfg, double position) {
  return cfg.scaling_mode == RopeScaling::kLinear ? position / cfg.scaling_factor : position;
}

/// Rotates interleaved pairs (2i, 2i+1) in place.
inline void rope_rotate(float* vec, std::span<const double> freqs, double position) {
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    const double angle = position * freqs[i];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = vec[2 * i];
    const double x1 = vec[2 * i + 1];
    vec[2 * i] = static_cast<float>(x0 * c - x1 * s);
    vec[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
  }
}

inline std::vector<float> rope_apply(std::span<const float> vec, std::size_t position, const RopeConfig& cfg) {
  if (vec.size() != cfg.head_dim) {
    throw std::invalid_argument("rope_apply: vector length != head_dim");
  }
  const auto freqs = rope_frequencies(cfg);
  std::vector<float> out(vec.begin(), vec.end());
  if (position == 0) {
    return out;
  }
  rope_rotate(out.data(), freqs, rope_effective_position(cfg, static_cast<double>(position)));
  return out;
}

/// Precomputed frequencies for repeated application inside a model.
class RotaryEmbedding {
 public:
  RotaryEmbedding() = default;
  explicit RotaryEmbedding(const RopeConfig& cfg) : cfg_(cfg), freqs_(rope_frequencies(cfg)) {}

  /// Rotates every head slice of a row of n_heads * head_dim floats.
  void apply(float* row, std::size_t n_heads, std::size_t position) const {
    if (position == 0) {
      return;
    }
    const double pos = rope_effective_position(cfg_, static_cast<double>(position));
    for (std::size_t h = 0; h < n_heads; ++h) {
      rope_rotate(row + h * cfg_.head_dim, freqs_, pos);
    }
  }

  const RopeConfig& config() const { return cfg_; }

 private:
  RopeConfig cfg_;
  std::vector<double> freqs_;
};

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head masked attention. Head h uses columns [h*head_dim, (h+1)*head_dim)
/// of Q, K and V. Masked keys are skipped entirely, so an all-true mask and no
/// mask take the same arithmetic path.
inline Tensor2D multihead_attention(MatrixView q, MatrixView k, MatrixView v, const BoolMatrix* mask,
                                    std::size_t n_heads, double scale) {
  if (n_heads == 0 || q.cols % n_heads != 0 || q.cols != k.cols || k.cols != v.cols || k.rows != v.rows) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  if (mask != nullptr && (mask->rows() != q.rows || mask->cols() != k.rows)) {
    throw std::invalid_argument("attention: mask shape mismatch");
  }
  const std::size_t hd = q.cols / n_heads;
  Tensor2D out(q.rows, q.cols);
  std::vector<double> scores(k.rows);
  std::vector<double> acc(hd);
  for (std::size_t i = 0; i < q.rows; ++i) {
    bool any = false;
    if (mask != nullptr) {
      for (std::size_t j = 0; j < k.rows && !any; ++j) {
        any = mask->get(i, j);
      }
    } else {
      any = k.rows > 0;
    }
    if (!any) {
      throw std::invalid_argument("isolated query");
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
      const float* qh = q.row(i) + h * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k.rows; ++j) {
        if (mask != nullptr && !mask->get(i, j)) {
          continue;
        }
        scores[j] = dot(qh, k.row(j) + h * hd, hd) * scale;
        mx = std::max(mx, scores[j]);
      }
      double sum = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < k.rows; ++j) {
        if (mask != nullptr && !mask->get(i, j)) {
          continue;
        }
        const double w = std::exp(scores[j] - mx);
        sum += w;
        const float* vj = v.row(j) + h * hd;
        for (std::size_t d = 0; d < hd; ++d) {
          acc[d] += w * vj[d];
        }
      }
      float* o = out.data.data() + i * out.cols + h * hd;
      for (std::size_t d = 0; d < hd; ++d) {
        o[d] = static_cast<float>(acc[d] / sum);
      }
    }
  }
  return out;
}

/// Single-head attention: softmax(Q K^T * scale, masked) V.
inline Tensor2D masked_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, const BoolMatrix& mask,
                                 double scale) {
  if (q.cols != k.cols || k.rows != v.rows) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  // Value width may differ from key width for the single-head form.
  if (v.cols == k.cols) {
    return multihead_attention(q, k, v, &mask, 1, scale);
  }
  Tensor2D out(q.rows, v.cols);
  if (mask.rows() != q.rows || mask.cols() != k.rows) {
    throw std::invalid_argument("attention: mask shape mismatch");
  }
  for (std::size_t i = 0; i < q.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> s(k.rows);
    bool any = false;
    for (std::size_t j = 0; j < k.rows; ++j) {
      if (!mask.get(i, j)) continue;
      any = true;
      s[j] = dot(q.row(i), k.row(j)) * scale;
      mx = std::max(mx, s[j]);
    }
    if (!any) {
      throw std::invalid_argument("isolated query");
    }
    double sum = 0.0;
    std::vector<double> acc(v.cols, 0.0);
    for (std::size_t j = 0; j < k.rows; ++j) {
      if (!mask.get(i, j)) continue;
      const double w = std::exp(s[j] - mx);
      sum += w;
      for (std::size_t d = 0; d < v.cols; ++d) acc[d] += w * v.at(j, d);
    }
    for (std::size_t d = 0; d < v.cols; ++d) out.at(i, d) = static_cast<float>(acc[d] / sum);
  }
  return out;
}

inline Tensor2D attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, double scale) {
  return multihead_attention(q, k, v, nullptr, 1, scale);
}

// ---------------------------------------------------------------------------
// Deterministic RNG: splitmix64 seeding followed by xoshiro256**.
// Constants are listed in docs/determinism.md.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t x = seed;
    for (auto& s : state_) {
      s = splitmix64(x);
    }
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) {
      throw std::invalid_argument("uniform_index: empty range");
    }
    const auto i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return std::min(i, n - 1);
  }

  /// Draws index i with probability weights[i] / sum(weights).
  template <typename T>
  std::size_t categorical(std::span<const T> weights) {
    double total = 0.0;
    std::size_t last_positive = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] < 0 || !std::isfinite(static_cast<double>(weights[i]))) {
        throw std::invalid_argument("categorical: weights must be finite and non-negative");
      }
      total += static_cast<double>(weights[i]);
      if (weights[i] > 0) {
        last_positive = i;
      }
    }
    if (!(total > 0.0)) {
      throw std::invalid_argument("categorical: weights sum to zero");
    }
    const double u = uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      cum += static_cast<double>(weights[i]);
      if (u < cum) {
        return i;
      }
    }
    return last_positive;
  }

  std::size_t categorical(const std::vector<double>& w) { return categorical(std::span<const double>(w)); }
  std::size_t categorical(const std::vector<float>& w) { return categorical(std::span<const float>(w)); }

 private:
  std::uint64_t state_[4];
};

}  // namespace specpv
