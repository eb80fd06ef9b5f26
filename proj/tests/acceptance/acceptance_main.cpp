// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion; exits nonzero
// if any criterion fails. Pass criterion numbers as arguments to run a
// subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <string>

#include "specpv/bench.hpp"
#include "specpv/specpv.hpp"
#include "support/scenarios.hpp"

namespace specpv::acceptance {
namespace {

using testing::random_prompt;

// Tolerances and budgets.
constexpr double kC1MaxSeconds = 120.0;
constexpr double kC2MaxTv = 0.01;
constexpr double kC2MaxSeconds = 60.0;
constexpr double kC5Slack = 1e-6;
constexpr double kC7Sigmas = 3.0;
constexpr double kC8MinRatio = 2.0;
constexpr double kC8RelTol = 0.05;
constexpr double kC8MinByteRatio = 32.0;
constexpr double kC9Rouge512Pin = 40.2343;
constexpr double kC10RougeTol = 1e-9;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Greedy full verification reproduces autoregressive decoding.
Outcome lossless_greedy() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t pairs = 0, mismatches = 0;
  std::string first_bad;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto model = init_random(tiny_config(), seed);
    Rng rng(1000 + seed);
    const auto prompt = random_prompt(rng, 16 + rng.uniform_index(49), 256);
    GenerationConfig g;
    g.max_new_tokens = 256;
    g.tree = TreeTemplate::chain(4);
    const auto ar = autoregressive_generate(model, prompt, g);
    for (auto kind : {DrafterKind::kMockIdentical, DrafterKind::kMockNoisy, DrafterKind::kMockRandom,
                      DrafterKind::kEagleLike}) {
      auto d = make_drafter(model, {kind, 0.5, seed});
      const auto out = generate(model, *d, prompt, g);
      ++pairs;
      if (out.tokens != ar.tokens) {
        ++mismatches;
        if (first_bad.empty()) first_bad = fmt(" first mismatch: seed %llu %s", (unsigned long long)seed, to_string(kind));
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {mismatches == 0 && secs < kC1MaxSeconds,
          fmt("%zu runs over 100 pairs, %zu mismatches, %.1f s (limit %.0f s)", pairs, mismatches, secs,
              kC1MaxSeconds) +
              first_bad};
}

// 2. Speculative sampling leaves the target distribution unchanged.
Outcome lossless_sampling() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = init_random(testing::micro_config(4), 11);
  const std::vector<int> prefix{0, 3, 1, 2, 2, 1};
  const auto r = testing::sampling_trials(model, prefix, 3, 0.3, 1.0, 100000, 2026);
  const double tv = testing::total_variation(r.empirical, r.target);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {tv <= kC2MaxTv && secs < kC2MaxSeconds,
          fmt("TV %.5f (limit %.2f), target (%.4f %.4f %.4f %.4f), %.1f s", tv, kC2MaxTv, r.target[0], r.target[1],
              r.target[2], r.target[3], secs)};
}

// 3. A partial view holding every block reproduces full verification.
Outcome partial_equals_full() {
  std::size_t steps = 0, mismatches = 0;
  for (std::uint64_t trial = 0; steps < 50; ++trial) {
    const auto model = init_random(tiny_config(), 300 + trial);
    Rng rng(trial);
    std::vector<int> y = random_prompt(rng, 40 + rng.uniform_index(200), 256);
    const std::size_t n = y.size();
    PagedKVCache full(KVCacheShape::for_model(model.config())), base(KVCacheShape::for_model(model.config()));
    std::vector<std::size_t> pos(n - 1);
    std::iota(pos.begin(), pos.end(), 0);
    const auto fwd = model.forward(std::span<const int>(y).first(n - 1), pos, full, nullptr, true);
    model.forward(std::span<const int>(y).first(n - 1), pos, base);
    std::vector<Tensor2D> q;
    for (const auto& t : fwd.queries) {
      q.emplace_back(1, t.cols, std::vector<float>(t.row(t.rows - 1).begin(), t.row(t.rows - 1).end()));
    }
    auto partial = select_partial(base, q, {4096, 2, 4}, 200);
    MockNoisyDrafter d(model, 0.6);
    d.commit(y, {});
    for (int k = 0; k < 10 && steps < 50; ++k) {
      const std::size_t L = y.size();
      const auto tree = d.draft(TreeTemplate::eagle_like(), {}, rng);
      const std::vector<int> chain{y[L - 1]};
      const auto a = verify(model, tree, chain, L - 1, full, false);
      const auto b = verify(model, tree, chain, L - 1, partial, false);
      ++steps;
      if (a.logits != b.logits) ++mismatches;
      const auto acc = post_evaluate(tree, a.logits, {}, rng);
      std::vector<std::size_t> keep{0};
      for (auto node : acc.path) keep.push_back(1 + node);
      full.retain_rows(L - 1, keep);
      full.truncate(L + acc.path.size());
      partial.retain_buffer_rows(partial.buffer_occupancy() - (1 + tree.size()), keep);
      partial.truncate_buffer(L + acc.path.size());
      y.insert(y.end(), acc.tokens.begin(), acc.tokens.end());
      y.push_back(acc.bonus);
      d.truncate(L);
      d.commit(y, {});
    }
  }
  return {mismatches == 0, fmt("%zu steps, %zu with differing logits", steps, mismatches)};
}

// 4. Block retrieval equals an exhaustive ranking.
Outcome retrieval_oracle() {
  Rng rng(44);
  std::size_t caches = 0, checks = 0, wrong = 0;
  for (; caches < 1000; ++caches) {
    const std::size_t layers = 2, bs = 2 + rng.uniform_index(4);
    PagedKVCache c({layers, 2, 2, bs});
    const std::size_t n = 4 * bs + rng.uniform_index(20 * bs);
    Tensor2D k(n, 4), v(n, 4);
    for (auto& x : k.data) x = static_cast<float>(static_cast<int>(rng.uniform_index(5)) - 2);
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    for (std::size_t l = 0; l < layers; ++l) c.append_kv(l, k, v, pos);
    std::vector<Tensor2D> q;
    for (std::size_t l = 0; l < layers; ++l) {
      Tensor2D ql(1 + rng.uniform_index(4), 4);
      for (auto& x : ql.data) x = static_cast<float>(static_cast<int>(rng.uniform_index(5)) - 2);
      q.push_back(ql);
    }
    for (auto variant : {ScoreVariant::kAsWritten, ScoreVariant::kElementwise}) {
      for (auto reduction : {Reduction::kMax, Reduction::kMean, Reduction::kLast}) {
        const SelectionConfig cfg{bs * (3 + rng.uniform_index(8)), 1, 2, variant, reduction};
        const auto p = select_partial(c, q, cfg, 8);
        for (std::size_t l = 0; l < layers; ++l) {
          ++checks;
          if (p.selections()[l].retrieval != testing::brute_force_retrieval(c, l, q[l], cfg)) ++wrong;
        }
      }
    }
  }
  return {wrong == 0, fmt("%zu caches, %zu layer selections, %zu differ", caches, checks, wrong)};
}

// 5. The elementwise score bounds every in-block key.
Outcome upper_bound() {
  Rng rng(55);
  std::size_t violations = 0;
  double worst = -1e300;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t rows = 1 + rng.uniform_index(32), d = 16;
    Tensor2D keys(rows, d);
    for (auto& x : keys.data) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    std::vector<float> q(d);
    for (auto& x : q) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    const double bound = query_block_score(q, summarize_block(keys), ScoreVariant::kElementwise, 4);
    for (std::size_t r = 0; r < rows; ++r) {
      const double gap = dot(q, keys.row(r)) - bound;
      worst = std::max(worst, gap);
      if (gap > kC5Slack) ++violations;
    }
  }
  return {violations == 0, fmt("10000 pairs, %zu violations, max(q.k - bound) = %.3g", violations, worst)};
}

// 6. Every Refresh leaves the partial view identical to the full cache.
Outcome refresh_fidelity() {
  const auto model = init_random(tiny_config(), 21);
  const auto prompt = gen_corpus(3, 512, 256);
  GenerationConfig g;
  g.max_new_tokens = 512;
  g.cache.budget = 256;
  MockNoisyDrafter d(model, 0.7);
  std::size_t refreshes = 0, bad_values = 0, bad_lengths = 0, compared = 0;
  const auto out = generate(model, d, prompt, g, [&](const StepInspection& s) {
    if (s.record.mode != VerifyMode::kRefresh) return;
    ++refreshes;
    if (s.partial == nullptr || s.partial->buffer_occupancy() != 0) ++bad_lengths;
    // K/V exists for every committed token except the newest one.
    if (s.full.length() != s.record.cumulative_length - 1) ++bad_lengths;
    if (s.partial == nullptr) return;
    for (std::size_t l = 0; l < s.partial->n_layers(); ++l) {
      const auto positions = s.partial->positions(l);
      for (std::size_t r = 0; r < positions.size(); ++r) {
        const auto pk = s.partial->key_row(l, r), fk = s.full.key_row(l, positions[r]);
        const auto pv = s.partial->value_row(l, r), fv = s.full.value_row(l, positions[r]);
        ++compared;
        if (std::memcmp(pk.data(), fk.data(), pk.size_bytes()) != 0 ||
            std::memcmp(pv.data(), fv.data(), pv.size_bytes()) != 0) {
          ++bad_values;
        }
      }
    }
  });
  const bool ok = refreshes > 0 && bad_values == 0 && bad_lengths == 0 && out.tokens.size() == 1024;
  return {ok, fmt("%zu tokens, %zu refreshes, %zu rows compared, %zu differ, %zu length errors", out.tokens.size(),
                  refreshes, compared, bad_values, bad_lengths)};
}

// 7. Accept length of a noisy drafter follows the geometric model.
Outcome tau_prediction() {
  const double p = 0.9;
  const std::size_t depth = 4;
  std::vector<StepRecord> steps;
  GenerationConfig g;
  g.tree = TreeTemplate::chain(depth);
  g.max_new_tokens = 256;
  for (std::uint64_t run = 0; steps.size() < 5000; ++run) {
    const auto model = init_random(tiny_config(), 700 + run);
    Rng rng(run);
    const auto prompt = random_prompt(rng, 32, 256);
    g.sampling.seed = run;
    MockNoisyDrafter d(model, p);
    const auto r = generate(model, d, prompt, g);
    steps.insert(steps.end(), r.steps.begin(), r.steps.end());
  }
  double mean = 0.0, second = 0.0;
  for (std::size_t k = 1; k <= depth; ++k) {
    mean += std::pow(p, static_cast<double>(k));
    second += static_cast<double>(2 * k - 1) * std::pow(p, static_cast<double>(k));
  }
  const double sigma = std::sqrt((second - mean * mean) / static_cast<double>(steps.size()));
  const double tau = accept_length_tau(steps);
  return {std::fabs(tau - mean) <= kC7Sigmas * sigma,
          fmt("tau %.4f over %zu steps, predicted %.4f, 3 sigma %.4f", tau, steps.size(), mean, kC7Sigmas * sigma)};
}

// 8. Modeled speedup of partial over full verification.
Outcome modeled_speedup() {
  const auto cfg = tiny_config();
  const auto model = init_random(cfg, 8);
  const std::size_t context = 3072, new_tokens = 128, depth = 4;
  const auto prompt = gen_corpus(5, context, cfg.vocab_size);
  GenerationConfig g;
  g.tree = TreeTemplate::chain(depth);
  g.max_new_tokens = new_tokens;
  g.cache.block_size = 8;
  g.cache.budget = 64;

  // Uniform drafts: one token per step, no draft compute.
  auto run = [&](std::size_t budget) {
    GenerationConfig gc = g;
    gc.cache.budget = budget;
    MockRandomDrafter d(cfg.vocab_size);
    return generate(model, d, prompt, gc);
  };
  auto throughput = [](const GenerationResult& r) {
    double t = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : r.steps) {
      t += s.modeled_time();
      tokens += s.emitted;
    }
    return static_cast<double>(tokens) / t;
  };
  const auto full = run(kUnlimitedBudget);
  const auto part = run(g.cache.budget);
  const double measured = throughput(part) / throughput(full);

  // Closed form: step i sees L = context + 1 + i committed tokens. Partial
  // steps are allowed while occupancy + (depth + 1) <= cap, so a cycle is
  // one Refresh followed by cap - depth Partial steps.
  const std::size_t rows = depth + 1, cap = g.effective_buffer_cap(), cycle = cap - depth + 1;
  const double row_bytes = 2.0 * static_cast<double>(cfg.n_layers * cfg.dim * sizeof(float));
  const double link = g.offload.per_transfer_latency_s * static_cast<double>(cfg.n_layers);
  auto compute = [&](std::size_t n, std::size_t ctx) {
    return forward_flops(cfg, cfg.n_layers, n, ctx) / g.compute_flops_per_s;
  };
  auto transfer = [&](std::size_t ctx) {
    return static_cast<double>(ctx) * row_bytes / g.offload.bandwidth_bytes_per_s + link;
  };
  const std::size_t steps = new_tokens - 1;
  double t_full = 0.0, t_part = 0.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t kv = context + i;
    t_full += compute(rows, kv) + transfer(kv);
    const std::size_t phase = i % cycle;
    if (phase == 0) {
      const std::size_t occ = i == 0 ? 0 : cycle - 1;
      t_part += compute(occ + rows, kv - occ) + transfer(kv - occ);
    } else {
      t_part += compute(rows, g.cache.budget + phase - 1);
    }
  }
  const double predicted = t_full / t_part;
  const double byte_ratio = static_cast<double>(context) / static_cast<double>(g.cache.budget + cap);
  const double rel = std::fabs(measured / predicted - 1.0);
  const bool ok = measured >= kC8MinRatio && rel <= kC8RelTol && byte_ratio >= kC8MinByteRatio;
  return {ok, fmt("alpha(partial)/alpha(full) %.3f, closed form %.3f (rel err %.4f, limit %.2f), "
                  "full/partial bytes >= %.1f",
                  measured, predicted, rel, kC8RelTol, byte_ratio)};
}

RunConfig quality_config() {
  RunConfig r;
  r.model.config = tiny_config();
  r.model.seed = 9;
  r.drafter = {DrafterKind::kMockNoisy, 0.8, 0};
  r.generation.tree = TreeTemplate::chain(4);
  r.generation.max_new_tokens = 128;
  r.budgets = {1024, 512, 128};
  r.context_lengths = {2048};
  r.repetitions = 2;
  r.corpus_seed = 17;
  return r;
}

// 9. Output similarity to full verification at shrinking budgets.
Outcome quality_regression() {
  const auto report = run_bench(quality_config());
  if (!report.all_ok()) return {false, "bench cell failed"};
  const double r1024 = *report.find("partial-1024", 2048)->rouge_l;
  const double r512 = *report.find("partial-512", 2048)->rouge_l;
  const double r128 = *report.find("partial-128", 2048)->rouge_l;
  return {r512 >= kC9Rouge512Pin - 1e-9 && r1024 >= r128,
          fmt("ROUGE-L vs full: 1024 %.4f, 512 %.4f (pin %.4f), 128 %.4f", r1024, r512, kC9Rouge512Pin, r128)};
}

// 10. Report aggregates recompute from the stored records.
Outcome metric_recomputation() {
  RunConfig cfg = quality_config();
  cfg.context_lengths = {128, 256};
  cfg.budgets = {128};
  cfg.generation.max_new_tokens = 48;
  const json j = json::parse(to_json(run_bench(cfg)).dump(2));
  std::size_t cells = 0, differ = 0;
  auto same = [](const json& stored, const std::optional<double>& v) {
    return stored.is_null() ? !v.has_value() : (v.has_value() && stored.get<double>() == *v);
  };
  for (const auto& cell : j.at("cells")) {
    ++cells;
    const auto re = recompute_cell(j, cell);
    if (!same(cell.at("tau"), re.tau) || !same(cell.at("alpha_measured"), re.alpha_measured) ||
        !same(cell.at("alpha_modeled"), re.alpha_modeled)) {
      ++differ;
    }
  }
  const std::vector<int> a{1, 2, 3}, ac{1, 3}, disjoint{4, 5, 6};
  const double identical = rouge_l(a, a), none = rouge_l(a, disjoint), partial = rouge_l(ac, a);
  const bool rouge_ok = std::fabs(identical - 100.0) <= kC10RougeTol && std::fabs(none) <= kC10RougeTol &&
                        std::fabs(partial - 80.0) <= kC10RougeTol;
  return {differ == 0 && rouge_ok && cells == 6,
          fmt("%zu cells, %zu differ; ROUGE-L identical %.6f, disjoint %.6f, \"a c\"/\"a b c\" %.6f", cells, differ,
              identical, none, partial)};
}

}  // namespace
}  // namespace specpv::acceptance

int main(int argc, char** argv) {
  using namespace specpv::acceptance;
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {1, "lossless-greedy", lossless_greedy},       {2, "lossless-sampling", lossless_sampling},
      {3, "partial-equals-full", partial_equals_full}, {4, "retrieval-oracle", retrieval_oracle},
      {5, "elementwise-upper-bound", upper_bound},    {6, "refresh-fidelity", refresh_fidelity},
      {7, "tau-prediction", tau_prediction},          {8, "modeled-speedup", modeled_speedup},
      {9, "quality-regression", quality_regression},  {10, "metric-recomputation", metric_recomputation},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s C%d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
