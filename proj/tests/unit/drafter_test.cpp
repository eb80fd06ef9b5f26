// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "specpv/drafter.hpp"
#include "specpv/engine.hpp"
#include "specpv/metrics.hpp"
#include "support/scenarios.hpp"

namespace specpv {
namespace {

using testing::micro_config;

TEST(TreeTemplate, Shapes) {
  EXPECT_EQ(TreeTemplate::chain(4).size(), 4u);
  EXPECT_TRUE(TreeTemplate::chain(4).is_chain());
  EXPECT_EQ(TreeTemplate::binary(2).size(), 6u);
  EXPECT_EQ(TreeTemplate::binary(2).max_depth(), 2u);
  const auto e = TreeTemplate::eagle_like();
  EXPECT_EQ(e.size(), 10u);
  EXPECT_EQ(e.max_depth(), 4u);
  EXPECT_FALSE(e.is_chain());
  EXPECT_EQ(e.sibling_ranks(), (std::vector<std::size_t>{0, 1, 2, 0, 1, 0, 0, 1, 0, 0}));
}

TEST(TreeTemplate, RejectsBadLinks) {
  EXPECT_THROW((TreeTemplate{{-1, 2, 1}}).validate(), std::invalid_argument);
  EXPECT_THROW((TreeTemplate{{-1, 0, -1}}).validate(), std::invalid_argument);
  EXPECT_THROW((TreeTemplate{{}}).validate(), std::invalid_argument);
  EXPECT_THROW(TreeTemplate::chain(0), std::invalid_argument);
}

TEST(TreeMask, ChainIsLowerTriangular) {
  const auto m = build_tree_mask(TreeTemplate::chain(3), 2);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(m.get(i, 0));
    EXPECT_TRUE(m.get(i, 1));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.get(i, 2 + j), j <= i);
  }
}

TEST(TreeMask, SiblingsDoNotSeeEachOther) {
  const auto m = build_tree_mask(TreeTemplate{{-1, -1}}, 0);
  EXPECT_TRUE(m.get(0, 0));
  EXPECT_FALSE(m.get(0, 1));
  EXPECT_FALSE(m.get(1, 0));
  EXPECT_TRUE(m.get(1, 1));
}

TEST(TreeMask, RowCountIsContextPlusAncestors) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    TreeTemplate t;
    const std::size_t n = 1 + rng.uniform_index(20);
    // Random level-ordered tree: each node's parent is at the previous level.
    std::vector<std::size_t> depth;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == 0 || rng.uniform() < 0.4) {
        t.parent.push_back(-1);
        depth.push_back(0);
      } else {
        const std::size_t p = rng.uniform_index(i);
        t.parent.push_back(static_cast<int>(p));
        depth.push_back(depth[p] + 1);
      }
    }
    // Reorder by depth (stable) to satisfy level order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return depth[a] < depth[b]; });
    std::vector<int> where(n);
    for (std::size_t i = 0; i < n; ++i) where[order[i]] = static_cast<int>(i);
    TreeTemplate sorted;
    for (auto o : order) sorted.parent.push_back(t.parent[o] < 0 ? -1 : where[static_cast<std::size_t>(t.parent[o])]);
    const std::size_t ctx = rng.uniform_index(10);
    const auto m = build_tree_mask(sorted, ctx);
    const auto d = sorted.depths();
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(m.count_row(i), ctx + d[i] + 1);
  }
}

TEST(RankedTokens, TiesToLowerId) {
  const std::vector<float> l{1.0f, 5.0f, 5.0f, 2.0f};
  EXPECT_EQ(ranked_tokens(l, 3), (std::vector<int>{1, 2, 3}));
}

TEST(Fuse, ZeroInZeroOut) {
  const auto w = init_draft_weights(tiny_config(), 3);
  const std::vector<float> taps(192, 0.0f), emb(64, 0.0f);
  for (float v : fuse_features(w.fusion, taps, emb)) EXPECT_EQ(v, 0.0f);
}

TEST(Fuse, LinearInTaps) {
  const auto w = init_draft_weights(tiny_config(), 3);
  Rng rng(4);
  std::vector<float> taps(192), scaled(192);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    taps[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    scaled[i] = 4.0f * taps[i];
  }
  const std::vector<float> zero(64, 0.0f);
  const auto a = fuse_features(w.fusion, taps, zero);
  const auto b = fuse_features(w.fusion, scaled, zero);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], 4.0f * a[i]);
}

TEST(Fuse, WrongTapCount) {
  const auto w = init_draft_weights(tiny_config(), 3);
  const std::vector<float> taps(128, 0.0f), emb(64, 0.0f);
  EXPECT_THROW(fuse_features(w.fusion, taps, emb), std::invalid_argument);
}

TEST(Fuse, PinnedProbe) {
  // Reference values from an independent float64 evaluation of the same
  // seeded weights.
  const auto w = init_draft_weights(tiny_config(), 1234);
  std::vector<float> taps(192), emb(64);
  for (std::size_t i = 0; i < taps.size(); ++i) taps[i] = static_cast<float>(static_cast<int>(i % 7) - 3) / 4.0f;
  for (std::size_t r = 0; r < emb.size(); ++r) emb[r] = static_cast<float>(static_cast<int>(r % 5) - 2) / 8.0f;
  const float expected[8] = {-0.0565487072f, -0.199302748f, -0.288463205f, 0.642519653f,
                             0.364322335f,   -0.0695406869f, -0.118677698f, -0.0889135152f};
  const auto out = fuse_features(w.fusion, taps, emb);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[i], expected[i], 1e-6) << i;
}

TEST(MockIdentical, ChainEqualsGreedyContinuation) {
  const auto model = init_random(tiny_config(), 8);
  const std::vector<int> prompt{5, 9, 100, 3, 77};
  GenerationConfig g;
  g.max_new_tokens = 7;
  const auto ar = autoregressive_generate(model, prompt, g);
  MockIdenticalDrafter d(model);
  std::vector<int> seq = prompt;
  seq.push_back(ar.tokens[prompt.size()]);
  d.commit(seq, {});
  Rng rng(0);
  const auto tree = d.draft(TreeTemplate::chain(6), {}, rng);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(tree.tokens[i], ar.tokens[prompt.size() + 1 + i]);
    EXPECT_EQ(tree.positions[i], seq.size() + i);
  }
}

TEST(Drafter, ChainOneSitsAtCommittedLength) {
  const auto model = init_random(tiny_config(), 8);
  const std::vector<int> seq{1, 2, 3};
  Rng rng(0);
  for (auto kind : {DrafterKind::kEagleLike, DrafterKind::kMockIdentical, DrafterKind::kMockNoisy,
                    DrafterKind::kMockRandom}) {
    auto d = make_drafter(model, {kind, 0.5, 1});
    PagedKVCache cache(KVCacheShape::for_model(model.config()));
    const std::vector<std::size_t> pos{0, 1, 2};
    const auto fwd = model.forward(seq, pos, cache);
    d->commit(seq, fwd.taps);
    const auto tree = d->draft(TreeTemplate::chain(1), {}, rng);
    ASSERT_EQ(tree.size(), 1u) << d->name();
    EXPECT_EQ(tree.positions[0], 3u) << d->name();
  }
}

TEST(EagleDrafter, DeterministicAndRollbackSafe) {
  const auto model = init_random(tiny_config(), 2);
  const std::vector<int> seq{4, 8, 15, 16, 23, 42};
  PagedKVCache cache(KVCacheShape::for_model(model.config()));
  std::vector<std::size_t> pos(seq.size());
  std::iota(pos.begin(), pos.end(), 0);
  const auto fwd = model.forward(seq, pos, cache);
  EagleDrafter a(model, init_draft_weights(model.config(), 7));
  EagleDrafter b(model, init_draft_weights(model.config(), 7));
  a.commit(seq, fwd.taps);
  b.commit(std::span<const int>(seq).first(3), fwd.taps);
  b.commit(seq, fwd.taps);
  Rng r1(0), r2(0);
  const auto ta = a.draft(TreeTemplate::eagle_like(), {}, r1);
  const auto tb = b.draft(TreeTemplate::eagle_like(), {}, r2);
  EXPECT_EQ(ta.tokens, tb.tokens);
  // Drafting twice from the same state gives the same tree.
  const auto tc = a.draft(TreeTemplate::eagle_like(), {}, r1);
  EXPECT_EQ(ta.tokens, tc.tokens);
  a.truncate(4);
  a.commit(seq, fwd.taps);
  const auto td = a.draft(TreeTemplate::eagle_like(), {}, r1);
  EXPECT_EQ(ta.tokens, td.tokens);
  EXPECT_GT(a.take_modeled_flops(), 0.0);
}

TEST(EagleDrafter, MissingFeaturesThrow) {
  const auto model = init_random(tiny_config(), 2);
  EagleDrafter d(model, init_draft_weights(model.config(), 7));
  const std::vector<int> seq{1, 2};
  EXPECT_THROW(d.commit(seq, {}), std::invalid_argument);
}

TEST(MockRandom, AcceptLengthMatchesGeometricModel) {
  // Uniform drafts match the target's argmax with probability 1/V per node.
  const std::size_t vocab = 4, depth = 4;
  const auto model = init_random(micro_config(vocab), 3);
  GenerationConfig g;
  g.tree = TreeTemplate::chain(depth);
  g.max_new_tokens = 200;
  std::vector<StepRecord> all;
  for (std::uint64_t run = 0; all.size() < 10000; ++run) {
    g.sampling.seed = run;
    MockRandomDrafter d(vocab);
    const std::vector<int> prompt{static_cast<int>(run % vocab), 1, 2};
    const auto r = generate(model, d, prompt, g);
    all.insert(all.end(), r.steps.begin(), r.steps.end());
  }
  const double v = 1.0 / static_cast<double>(vocab);
  double mean = 0.0, second = 0.0;
  for (std::size_t k = 1; k <= depth; ++k) {
    mean += std::pow(v, static_cast<double>(k));
    second += static_cast<double>(2 * k - 1) * std::pow(v, static_cast<double>(k));
  }
  const double sigma = std::sqrt((second - mean * mean) / static_cast<double>(all.size()));
  EXPECT_NEAR(accept_length_tau(all), mean, 3.0 * sigma);
}

}  // namespace
}  // namespace specpv
