// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Benchmark orchestration and machine-readable reports
// (docs/report.schema.json).

#pragma once

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "specpv/config.hpp"
#include "specpv/corpus.hpp"
#include "specpv/drafter.hpp"
#include "specpv/engine.hpp"
#include "specpv/metrics.hpp"
#include "specpv/model.hpp"

namespace specpv {

inline constexpr const char* kOutDirEnv = "SPECPV_OUT_DIR";
inline constexpr int kReportSchemaVersion = 1;

/// Explicit dir, else $SPECPV_OUT_DIR, else the working directory.
inline std::filesystem::path resolve_out_dir(const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') return env;
  return ".";
}

/// FNV-1a over the little-endian bytes of each token id.
inline std::string hash_tokens(std::span<const int> tokens) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (int t : tokens) {
    const auto u = static_cast<std::uint32_t>(t);
    for (int b = 0; b < 4; ++b) {
      h ^= (u >> (8 * b)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

struct Method {
  std::string name;                     // "ar", "full-verify", "partial-<budget>"
  std::optional<std::size_t> budget;    // partial budget; empty for ar and full-verify
  bool speculative = true;
};

inline std::vector<Method> bench_methods(const RunConfig& cfg) {
  std::vector<Method> m{{"ar", std::nullopt, false}, {"full-verify", std::nullopt, true}};
  for (auto b : cfg.budgets) m.push_back({"partial-" + std::to_string(b), b, true});
  return m;
}

struct RepetitionResult {
  std::vector<int> generated;
  std::vector<StepRecord> steps;
  double prefill_time_s = 0.0;
};

struct CellResult {
  std::string method;
  std::size_t context_len = 0;
  std::optional<std::size_t> budget;
  bool ok = false;
  std::string error;
  std::vector<RepetitionResult> reps;

  // Aggregates (valid when ok).
  std::size_t tokens = 0;
  std::size_t steps = 0;
  double time_measured_s = 0.0;
  double time_modeled_s = 0.0;
  std::optional<double> alpha_measured;
  std::optional<double> alpha_modeled;
  std::optional<double> tau;
  std::optional<double> rouge_l;
};

struct CellTotals {
  std::size_t tokens = 0;
  std::size_t steps = 0;
  double measured = 0.0;
  double modeled = 0.0;
};

/// Sums in record order: tokens emitted by decode steps and their times.
inline CellTotals cell_totals(const std::vector<std::vector<StepRecord>>& reps) {
  CellTotals t;
  for (const auto& steps : reps) {
    for (const auto& r : steps) {
      t.tokens += r.emitted;
      t.measured += r.measured_time();
      t.modeled += r.modeled_time();
      ++t.steps;
    }
  }
  return t;
}

/// Macro average over every step of every repetition.
inline std::optional<double> cell_tau(const std::vector<std::vector<StepRecord>>& reps) {
  std::vector<StepRecord> all;
  for (const auto& steps : reps) all.insert(all.end(), steps.begin(), steps.end());
  if (all.empty()) return std::nullopt;
  return accept_length_tau(all);
}

inline std::optional<double> alpha_from_totals(const CellTotals& m, const CellTotals& ar, bool modeled) {
  const double tm = modeled ? m.modeled : m.measured;
  const double ta = modeled ? ar.modeled : ar.measured;
  if (!(tm > 0.0) || !(ta > 0.0) || ar.tokens == 0) return std::nullopt;
  return speedup_alpha(static_cast<double>(m.tokens), tm, static_cast<double>(ar.tokens), ta);
}

inline TinyTransformer load_bench_model(const RunConfig& cfg) {
  if (!cfg.model.checkpoint.empty()) return load_checkpoint(cfg.model.checkpoint);
  return init_random(cfg.model.config, cfg.model.seed);
}

/// Prompt for one (context length, repetition): a corpus segment.
inline std::vector<int> bench_prompt(const RunConfig& cfg, std::size_t context_len, std::size_t rep,
                                     std::size_t vocab) {
  return gen_corpus(cfg.corpus_seed + rep, context_len, vocab, cfg.corpus);
}

inline RepetitionResult run_cell_repetition(const TinyTransformer& model, const RunConfig& cfg, const Method& method,
                                            std::span<const int> prompt, std::size_t rep) {
  GenerationConfig g = cfg.generation;
  g.sampling.seed = cfg.generation.sampling.seed + rep;
  g.cache.budget = method.budget.value_or(kUnlimitedBudget);
  GenerationResult r;
  if (!method.speculative) {
    r = autoregressive_generate(model, prompt, g);
  } else {
    auto drafter = make_drafter(model, cfg.drafter);
    r = generate(model, *drafter, prompt, g);
  }
  return {{r.generated().begin(), r.generated().end()}, std::move(r.steps), r.prefill_time_s};
}

struct BenchReport {
  RunConfig config;
  std::vector<CellResult> cells;

  bool all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
  }
  const CellResult* find(const std::string& method, std::size_t context_len) const {
    for (const auto& c : cells) {
      if (c.method == method && c.context_len == context_len) return &c;
    }
    return nullptr;
  }
};

/// Fills aggregates that depend on other cells (α against AR, ROUGE-L
/// against full verification) at the same context length.
inline void finalize_cells(std::vector<CellResult>& cells) {
  auto steps_of = [](const CellResult& c) {
    std::vector<std::vector<StepRecord>> v;
    for (const auto& r : c.reps) v.push_back(r.steps);
    return v;
  };
  for (auto& c : cells) {
    if (!c.ok) continue;
    const auto totals = cell_totals(steps_of(c));
    c.tokens = totals.tokens;
    c.steps = totals.steps;
    c.time_measured_s = totals.measured;
    c.time_modeled_s = totals.modeled;
    c.tau = c.method == "ar" ? std::nullopt : cell_tau(steps_of(c));
  }
  for (auto& c : cells) {
    if (!c.ok) continue;
    const CellResult* ar = nullptr;
    const CellResult* full = nullptr;
    for (const auto& o : cells) {
      if (!o.ok || o.context_len != c.context_len) continue;
      if (o.method == "ar") ar = &o;
      if (o.method == "full-verify") full = &o;
    }
    if (ar != nullptr) {
      const auto mine = cell_totals(steps_of(c));
      const auto base = cell_totals(steps_of(*ar));
      c.alpha_measured = alpha_from_totals(mine, base, false);
      c.alpha_modeled = alpha_from_totals(mine, base, true);
    }
    if (full != nullptr && full->reps.size() == c.reps.size()) {
      double sum = 0.0;
      bool valid = true;
      for (std::size_t i = 0; i < c.reps.size(); ++i) {
        if (c.reps[i].generated.empty() || full->reps[i].generated.empty()) {
          valid = false;
          break;
        }
        sum += rouge_l(c.reps[i].generated, full->reps[i].generated);
      }
      if (valid) c.rouge_l = sum / static_cast<double>(c.reps.size());
    }
  }
}

/// Runs every (method, context length) cell. A failing cell is recorded and
/// the run continues. Cells execute on up to cfg.workers threads.
inline BenchReport run_bench(const RunConfig& cfg, const TinyTransformer& model) {
  cfg.validate();
  const auto methods = bench_methods(cfg);
  BenchReport report;
  report.config = cfg;
  for (auto ctx : cfg.context_lengths) {
    for (const auto& m : methods) {
      CellResult c;
      c.method = m.name;
      c.context_len = ctx;
      c.budget = m.budget;
      report.cells.push_back(std::move(c));
    }
  }
  auto run_cell = [&](std::size_t idx) {
    CellResult& c = report.cells[idx];
    const Method& m = methods[idx % methods.size()];
    try {
      for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
        const auto prompt = bench_prompt(cfg, c.context_len, rep, model.config().vocab_size);
        c.reps.push_back(run_cell_repetition(model, cfg, m, prompt, rep));
      }
      c.ok = true;
    } catch (const std::exception& e) {
      c.ok = false;
      c.error = e.what();
      c.reps.clear();
    }
  };
  const std::size_t n = report.cells.size();
  const std::size_t workers = std::min(cfg.workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run_cell(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  finalize_cells(report.cells);
  return report;
}

inline BenchReport run_bench(const RunConfig& cfg) { return run_bench(cfg, load_bench_model(cfg)); }

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json to_json(const StepRecord& r) {
  return {{"mode", to_string(r.mode)},
          {"drafted", r.drafted},
          {"accepted", r.accepted},
          {"emitted", r.emitted},
          {"draft_time_s", r.draft_time_s},
          {"verify_time_s", r.verify_time_s},
          {"modeled_draft_s", r.modeled_draft_s},
          {"modeled_verify_s", r.modeled_verify_s},
          {"cumulative_length", r.cumulative_length}};
}

inline StepRecord step_record_from_json(const json& j) {
  StepRecord r;
  r.mode = verify_mode_from_string(j.at("mode").get<std::string>());
  r.drafted = j.at("drafted").get<std::size_t>();
  r.accepted = j.at("accepted").get<std::size_t>();
  r.emitted = j.at("emitted").get<std::size_t>();
  r.draft_time_s = j.at("draft_time_s").get<double>();
  r.verify_time_s = j.at("verify_time_s").get<double>();
  r.modeled_draft_s = j.at("modeled_draft_s").get<double>();
  r.modeled_verify_s = j.at("modeled_verify_s").get<double>();
  r.cumulative_length = j.at("cumulative_length").get<std::size_t>();
  return r;
}

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const CellResult& c) {
  json cell = {{"method", c.method},
               {"context_len", c.context_len},
               {"budget", c.budget ? json(*c.budget) : json(nullptr)},
               {"status", c.ok ? "ok" : "failed"}};
  if (!c.ok) {
    cell["error"] = c.error;
    return cell;
  }
  const double tokens = static_cast<double>(c.tokens);
  cell["tokens"] = c.tokens;
  cell["steps"] = c.steps;
  cell["time_measured_s"] = c.time_measured_s;
  cell["time_modeled_s"] = c.time_modeled_s;
  cell["throughput_measured"] = c.time_measured_s > 0.0 ? json(tokens / c.time_measured_s) : json(nullptr);
  cell["throughput_modeled"] = c.time_modeled_s > 0.0 ? json(tokens / c.time_modeled_s) : json(nullptr);
  cell["alpha_measured"] = optional_number(c.alpha_measured);
  cell["alpha_modeled"] = optional_number(c.alpha_modeled);
  cell["tau"] = optional_number(c.tau);
  cell["rouge_l"] = optional_number(c.rouge_l);
  std::size_t by_mode[3] = {0, 0, 0};
  json reps = json::array();
  for (const auto& r : c.reps) {
    json records = json::array();
    for (const auto& s : r.steps) {
      records.push_back(to_json(s));
      ++by_mode[static_cast<int>(s.mode)];
    }
    reps.push_back({{"output_hash", hash_tokens(r.generated)},
                    {"generated", r.generated},
                    {"prefill_time_s", r.prefill_time_s},
                    {"records", records}});
  }
  cell["mode_counts"] = {{"full", by_mode[0]}, {"partial", by_mode[1]}, {"refresh", by_mode[2]}};
  cell["repetitions"] = reps;
  return cell;
}

inline json to_json(const BenchReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  return {{"schema_version", kReportSchemaVersion},
          {"tau_convention", "accepted drafted tokens per verification step; bonus token excluded; zeros counted"},
          {"alpha_convention",
           "micro-average: (sum emitted / sum step time) of the method over that of ar at the same context length; "
           "alpha_measured uses wall-clock step times, alpha_modeled uses the offload cost model"},
          {"config", to_json(r.config)},
          {"cells", cells}};
}

inline const char* kCsvHeader = "method,context_len,budget,alpha_measured,alpha_modeled,tau,rouge_l,steps,tokens";

inline std::string csv_number(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

inline std::string to_csv(const BenchReport& r) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& c : r.cells) {
    out += c.method + "," + std::to_string(c.context_len) + "," + (c.budget ? std::to_string(*c.budget) : "inf") + ",";
    if (c.ok) {
      out += csv_number(c.alpha_measured) + "," + csv_number(c.alpha_modeled) + "," + csv_number(c.tau) + "," +
             csv_number(c.rouge_l) + "," + std::to_string(c.steps) + "," + std::to_string(c.tokens);
    } else {
      out += ",,,,,";
    }
    out += "\n";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

struct WrittenReport {
  std::filesystem::path json_path;
  std::filesystem::path csv_path;
};

inline WrittenReport write_report(const BenchReport& r, const std::filesystem::path& dir) {
  WrittenReport w{dir / r.config.output.report, dir / r.config.output.csv};
  write_text(w.json_path, to_json(r).dump(2) + "\n");
  write_text(w.csv_path, to_csv(r));
  return w;
}

// ---------------------------------------------------------------------------
// Recomputation from raw records
// ---------------------------------------------------------------------------

struct RecomputedCell {
  std::optional<double> alpha_measured;
  std::optional<double> alpha_modeled;
  std::optional<double> tau;
};

/// Recomputes α and τ of one report cell from the raw step records stored
/// in the report itself.
inline RecomputedCell recompute_cell(const json& report, const json& cell) {
  auto records_of = [](const json& c) {
    std::vector<std::vector<StepRecord>> reps;
    for (const auto& rep : c.at("repetitions")) {
      std::vector<StepRecord> steps;
      for (const auto& s : rep.at("records")) steps.push_back(step_record_from_json(s));
      reps.push_back(std::move(steps));
    }
    return reps;
  };
  RecomputedCell out;
  const auto mine = records_of(cell);
  if (cell.at("method") != "ar") out.tau = cell_tau(mine);
  for (const auto& o : report.at("cells")) {
    if (o.at("method") == "ar" && o.at("context_len") == cell.at("context_len") && o.at("status") == "ok") {
      const auto a = cell_totals(records_of(o));
      const auto m = cell_totals(mine);
      out.alpha_measured = alpha_from_totals(m, a, false);
      out.alpha_modeled = alpha_from_totals(m, a, true);
    }
  }
  return out;
}

}  // namespace specpv
