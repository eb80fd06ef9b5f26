// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "specpv/drafter.hpp"
#include "specpv/kvstore.hpp"
#include "specpv/model.hpp"

namespace specpv {
namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("specpv_model_test_" + name);
}

ForwardResult run(const TinyTransformer& m, const std::vector<int>& tokens, std::size_t first_pos,
                  PagedKVCache& cache, const BoolMatrix* mask = nullptr) {
  std::vector<std::size_t> pos(tokens.size());
  std::iota(pos.begin(), pos.end(), first_pos);
  return m.forward(tokens, pos, cache, mask);
}

TEST(ModelConfig, ParameterCountClosedForm) {
  const auto cfg = tiny_config();
  // 2*V*d + L*(2d + 4d^2 + 3*d*ffn) + d for V=256, d=64, L=4, ffn=256.
  EXPECT_EQ(cfg.parameter_count(), 295488u);
  const auto model = init_random(cfg, 1);
  std::size_t total = 0;
  for (const auto& [name, t] : model.named_tensors()) total += t->data.size();
  EXPECT_EQ(total, cfg.parameter_count());
}

TEST(ModelConfig, RejectsInconsistentShapes) {
  auto cfg = tiny_config();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.feature_tap_layers = {0, 4};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Model, DeterministicPerSeed) {
  const auto a = init_random(tiny_config(), 5);
  const auto b = init_random(tiny_config(), 5);
  const auto c = init_random(tiny_config(), 6);
  const std::vector<int> probe{1, 2, 3, 250};
  auto logits = [&](const TinyTransformer& m) {
    PagedKVCache cache(KVCacheShape::for_model(m.config()));
    return run(m, probe, 0, cache).logits;
  };
  EXPECT_EQ(logits(a), logits(b));
  EXPECT_NE(logits(a), logits(c));
}

TEST(Model, BatchEqualsIncremental) {
  const auto m = init_random(tiny_config(), 2);
  const std::vector<int> toks{17, 3, 99};
  PagedKVCache batch(KVCacheShape::for_model(m.config()));
  const auto all = run(m, toks, 0, batch);
  PagedKVCache inc(KVCacheShape::for_model(m.config()));
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto one = run(m, {toks[i]}, i, inc);
    for (std::size_t c = 0; c < one.logits.cols; ++c) ASSERT_EQ(one.logits.at(0, c), all.logits.at(i, c));
    EXPECT_EQ(one.taps[0].values, all.taps[i].values);
  }
  EXPECT_EQ(batch.length(), 3u);
}

TEST(Model, TapsComeFromConfiguredLayers) {
  const auto m = init_random(tiny_config(), 2);
  PagedKVCache cache(KVCacheShape::for_model(m.config()));
  const auto out = run(m, {4, 5}, 0, cache);
  ASSERT_EQ(out.taps.size(), 2u);
  EXPECT_EQ(out.taps[1].position, 1u);
  EXPECT_EQ(out.taps[1].values.size(), 3 * m.config().dim);
}

TEST(Model, TreeSiblingsWithSameTokenAgree) {
  const auto m = init_random(tiny_config(), 3);
  PagedKVCache cache(KVCacheShape::for_model(m.config()));
  run(m, {10, 11, 12}, 0, cache);
  TreeTemplate t;
  t.parent = {-1, -1};
  const BoolMatrix mask = build_tree_mask(t, cache.length());
  StagingKVView staging(cache);
  const std::vector<int> toks{42, 42};
  const std::vector<std::size_t> pos{3, 3};
  const auto out = m.forward(toks, pos, staging, &mask);
  for (std::size_t c = 0; c < out.logits.cols; ++c) ASSERT_EQ(out.logits.at(0, c), out.logits.at(1, c));
}

TEST(Model, Errors) {
  auto cfg = tiny_config();
  cfg.max_positions = 8;
  const auto m = init_random(cfg, 1);
  PagedKVCache cache(KVCacheShape::for_model(cfg));
  EXPECT_THROW(run(m, {1}, 8, cache), std::out_of_range);
  EXPECT_THROW(run(m, {256}, 0, cache), std::invalid_argument);
  const BoolMatrix bad(1, 3);
  EXPECT_THROW(run(m, {1}, 0, cache, &bad), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto cfg = tiny_config(64);
  cfg.rope.scaling_mode = RopeScaling::kYarnLike;
  cfg.rope.scaling_factor = 4.0;
  cfg.eos_token = 7;
  const auto m = init_random(cfg, 21);
  const auto path = temp_path("roundtrip.bin");
  save_checkpoint(m, path.string());
  const auto back = load_checkpoint(path.string());
  EXPECT_TRUE(back == m);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagic) {
  const auto path = temp_path("magic.bin");
  save_checkpoint(init_random(tiny_config(32), 1), path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_checkpoint(path.string());
    FAIL() << "expected FormatError";
  } catch (const io::FormatError& e) {
    EXPECT_STREQ(e.what(), "bad magic");
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncationNamesTheTensor) {
  const auto path = temp_path("trunc.bin");
  save_checkpoint(init_random(tiny_config(32), 1), path.string());
  // Cut inside the final tensor (lm_head).
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 100);
  try {
    load_checkpoint(path.string());
    FAIL() << "expected FormatError";
  } catch (const io::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("lm_head"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
}

TEST(ForwardFlops, GrowsWithContext) {
  const auto cfg = tiny_config();
  EXPECT_LT(forward_flops(cfg, 4, 1, 10), forward_flops(cfg, 4, 1, 1000));
  EXPECT_DOUBLE_EQ(forward_flops(cfg, 4, 2, 0), 2.0 * forward_flops(cfg, 4, 1, 0) + 2.0 * 4.0 * 4.0 * 64.0);
}

}  // namespace
}  // namespace specpv
