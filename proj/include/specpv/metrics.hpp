// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Speedup, accept length and ROUGE-L.

#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

#include "specpv/engine.hpp"

namespace specpv {

/// Throughput of a method relative to autoregressive decoding.
inline double speedup_alpha(double tokens, double time_method, double time_ar) {
  if (!(time_method > 0.0) || !(time_ar > 0.0)) {
    throw std::invalid_argument("speedup_alpha: times must be positive");
  }
  return (tokens / time_method) / (tokens / time_ar);
}

/// Micro-average over runs: total tokens / total time for each side.
inline double speedup_alpha(double tokens_method, double time_method, double tokens_ar, double time_ar) {
  if (!(time_method > 0.0) || !(time_ar > 0.0) || !(tokens_ar > 0.0)) {
    throw std::invalid_argument("speedup_alpha: times and baseline tokens must be positive");
  }
  return (tokens_method / time_method) / (tokens_ar / time_ar);
}

/// Mean accepted drafts per verification step; zero-accept steps count.
inline double accept_length_tau(std::span<const StepRecord> records) {
  if (records.empty()) throw std::invalid_argument("accept_length_tau: no steps");
  double sum = 0.0;
  for (const auto& r : records) sum += static_cast<double>(r.accepted);
  return sum / static_cast<double>(records.size());
}

inline double accept_length_tau(std::span<const std::size_t> accepted) {
  if (accepted.empty()) throw std::invalid_argument("accept_length_tau: no steps");
  double sum = 0.0;
  for (auto a : accepted) sum += static_cast<double>(a);
  return sum / static_cast<double>(accepted.size());
}

inline std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS F1 in [0, 100].
inline double rouge_l(std::span<const int> candidate, std::span<const int> reference) {
  if (candidate.empty() || reference.empty()) throw std::invalid_argument("rouge_l: empty input");
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 100.0 * 2.0 * p * r / (p + r);
}

}  // namespace specpv
