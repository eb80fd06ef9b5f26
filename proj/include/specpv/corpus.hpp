// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministic synthetic token streams with periodically planted motifs.

#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "specpv/numerics.hpp"

namespace specpv {

struct CorpusConfig {
  std::size_t motif_length = 24;
  std::size_t period = 256;
  std::size_t first_motif = 32;
};

/// Filler is a random walk over token ids; a fixed motif is overwritten at
/// first_motif + k * period for every k that fits.
inline std::vector<int> gen_corpus(std::uint64_t seed, std::size_t n_tokens, std::size_t vocab,
                                   const CorpusConfig& cfg = {}) {
  if (n_tokens == 0) throw std::invalid_argument("gen_corpus: n_tokens must be positive");
  if (vocab < 2) throw std::invalid_argument("gen_corpus: vocab must be at least 2");
  if (cfg.motif_length == 0 || cfg.period < cfg.motif_length) {
    throw std::invalid_argument("gen_corpus: motif must fit in its period");
  }
  Rng rng(seed);
  std::vector<int> motif(cfg.motif_length);
  for (auto& t : motif) t = static_cast<int>(rng.uniform_index(vocab));
  std::vector<int> out(n_tokens);
  std::size_t cur = rng.uniform_index(vocab);
  for (auto& t : out) {
    // Mostly small steps.
    const std::size_t step = rng.uniform() < 0.7 ? 1 + rng.uniform_index(3) : rng.uniform_index(vocab);
    cur = (cur + step) % vocab;
    t = static_cast<int>(cur);
  }
  for (std::size_t p = cfg.first_motif; p + cfg.motif_length <= n_tokens; p += cfg.period) {
    std::copy(motif.begin(), motif.end(), out.begin() + static_cast<std::ptrdiff_t>(p));
  }
  return out;
}

}  // namespace specpv
