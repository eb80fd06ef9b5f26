// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// specpv command-line tool: init-model, generate, bench, compare, plot.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "specpv/bench.hpp"
#include "specpv/config.hpp"
#include "specpv/plot.hpp"
#include "specpv/specpv.hpp"

namespace {

using namespace specpv;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitCellFailed = 2;

std::size_t parse_budget(const std::string& s) {
  if (s == "inf" || s == "full") return kUnlimitedBudget;
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used);
  if (used != s.size()) throw ConfigError("budget must be an integer or 'inf': " + s);
  return v;
}

std::vector<int> read_prompt_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open prompt file: " + path);
  std::vector<int> out;
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw ConfigError("prompt file: not a token id: " + tok);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("prompt file is empty: " + path);
  return out;
}

std::string join(std::span<const int> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) s += ' ';
    s += std::to_string(v[i]);
  }
  return s;
}

/// Options shared by generate and compare.
struct RunOptions {
  std::string config_path;
  std::string checkpoint;
  std::uint64_t model_seed = 0;
  std::string prompt_file;
  std::size_t corpus_len = 512;
  std::uint64_t corpus_seed = 7;
  std::size_t max_new_tokens = 64;
  std::string template_spec;
  std::string drafter = "mock-noisy";
  double agreement = 0.9;
  bool sample = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::string budget = "inf";

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "run config JSON (flags below override it)");
    app->add_option("--checkpoint", checkpoint, "model checkpoint; default: random tiny model");
    app->add_option("--model-seed", model_seed, "seed for the random model");
    app->add_option("--prompt-file", prompt_file, "whitespace-separated token ids");
    app->add_option("--corpus-len", corpus_len, "synthetic prompt length when no prompt file is given");
    app->add_option("--corpus-seed", corpus_seed, "synthetic prompt seed");
    app->add_option("--max-new-tokens", max_new_tokens);
    app->add_option("--template", template_spec, "chain:D, binary:D, eagle-like or a parent list");
    app->add_option("--drafter", drafter, "eagle-like, mock-identical, mock-noisy, mock-random");
    app->add_option("--agreement", agreement, "mock-noisy agreement probability");
    app->add_flag("--sample", sample, "speculative sampling instead of greedy (chain templates only)");
    app->add_option("--temperature", temperature);
    app->add_option("--seed", seed, "sampling seed");
  }

  RunConfig resolve(const CLI::App& app) const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (app.count("--checkpoint")) cfg.model.checkpoint = checkpoint;
    if (app.count("--model-seed")) cfg.model.seed = model_seed;
    if (app.count("--max-new-tokens") || config_path.empty()) cfg.generation.max_new_tokens = max_new_tokens;
    if (!template_spec.empty()) cfg.generation.tree = parse_template(template_spec);
    if (app.count("--drafter") || config_path.empty()) {
      try {
        cfg.drafter.kind = drafter_kind_from_string(drafter);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("--drafter: ") + e.what());
      }
    }
    if (app.count("--agreement") || config_path.empty()) cfg.drafter.agreement = agreement;
    if (sample) cfg.generation.sampling.greedy = false;
    if (app.count("--temperature")) cfg.generation.sampling.temperature = temperature;
    if (app.count("--seed")) cfg.generation.sampling.seed = seed;
    if (app.count("--corpus-seed")) cfg.corpus_seed = corpus_seed;
    return cfg;
  }

  std::vector<int> prompt(const RunConfig& cfg, std::size_t vocab) const {
    if (!prompt_file.empty()) return read_prompt_file(prompt_file);
    return gen_corpus(cfg.corpus_seed, corpus_len, vocab, cfg.corpus);
  }
};

std::size_t mode_count(const GenerationResult& r, VerifyMode m) {
  return static_cast<std::size_t>(
      std::count_if(r.steps.begin(), r.steps.end(), [&](const StepRecord& s) { return s.mode == m; }));
}

int cmd_init_model(const std::string& config_path, std::uint64_t seed, const std::string& out) {
  ModelConfig cfg = tiny_config();
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw ConfigError("cannot open model config: " + config_path);
    json j;
    try {
      is >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError(config_path + ": " + e.what());
    }
    cfg = parse_model_config(j, "$");
  }
  cfg.validate();
  const std::filesystem::path path = out.empty() ? resolve_out_dir("") / "model.spcv" : std::filesystem::path(out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto model = init_random(cfg, seed);
  save_checkpoint(model, path.string());
  std::cout << "wrote " << path.string() << " (" << cfg.parameter_count() << " parameters)\n";
  return kExitOk;
}

int cmd_generate(const RunOptions& o, const CLI::App& app, const std::string& dump_path, bool as_json) {
  RunConfig cfg = o.resolve(app);
  cfg.generation.cache.budget = parse_budget(o.budget);
  cfg.budgets.clear();
  const auto model = load_bench_model(cfg);
  const auto prompt = o.prompt(cfg, model.config().vocab_size);
  GenerationConfig g = cfg.generation;
  if (prompt.size() + g.max_new_tokens > g.max_length) g.max_length = prompt.size() + g.max_new_tokens;
  auto drafter = make_drafter(model, cfg.drafter);
  std::size_t dumped = 0;
  const StepObserver observer = [&](const StepInspection& s) {
    if (dump_path.empty()) return;
    const bool last = s.sequence.size() - prompt.size() >= g.max_new_tokens || s.sequence.size() >= g.max_length ||
                      (model.config().eos_token >= 0 && s.sequence.back() == model.config().eos_token);
    if (!last) return;
    dump_cache(s.full, dump_path);
    ++dumped;
  };
  const auto r = generate(model, *drafter, prompt, g, observer);
  double tau = 0.0;
  if (!r.steps.empty()) tau = accept_length_tau(r.steps);
  if (as_json) {
    json j = {{"prompt_len", r.prompt_len},
              {"generated", std::vector<int>(r.generated().begin(), r.generated().end())},
              {"output_hash", hash_tokens(r.generated())},
              {"steps", r.steps.size()},
              {"tau", tau},
              {"mode_counts",
               {{"full", mode_count(r, VerifyMode::kFull)},
                {"partial", mode_count(r, VerifyMode::kPartial)},
                {"refresh", mode_count(r, VerifyMode::kRefresh)}}}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << join(r.generated()) << "\n";
    std::cerr << "steps " << r.steps.size() << ", tau " << tau << ", full/partial/refresh "
              << mode_count(r, VerifyMode::kFull) << "/" << mode_count(r, VerifyMode::kPartial) << "/"
              << mode_count(r, VerifyMode::kRefresh) << "\n";
  }
  if (!dump_path.empty() && dumped > 0) std::cerr << "cache dump: " << dump_path << "\n";
  return kExitOk;
}

int cmd_bench(const std::string& config_path, const std::string& out_dir, std::size_t workers) {
  RunConfig cfg = load_run_config(config_path);
  if (workers > 0) cfg.workers = workers;
  const auto dir = resolve_out_dir(out_dir.empty() ? cfg.output.dir : out_dir);
  const auto report = run_bench(cfg);
  const auto written = write_report(report, dir);
  std::cout << to_csv(report);
  std::cerr << "wrote " << written.json_path.string() << " and " << written.csv_path.string() << "\n";
  if (!report.all_ok()) {
    for (const auto& c : report.cells) {
      if (!c.ok) std::cerr << "cell " << c.method << " @ " << c.context_len << " failed: " << c.error << "\n";
    }
    return kExitCellFailed;
  }
  return kExitOk;
}

int cmd_compare(const RunOptions& o, const CLI::App& app) {
  RunConfig cfg = o.resolve(app);
  const std::size_t budget = parse_budget(o.budget);
  if (budget == kUnlimitedBudget) throw ConfigError("compare needs a finite --budget");
  const auto model = load_bench_model(cfg);
  const auto prompt = o.prompt(cfg, model.config().vocab_size);
  GenerationConfig g = cfg.generation;
  if (prompt.size() + g.max_new_tokens > g.max_length) g.max_length = prompt.size() + g.max_new_tokens;
  auto d1 = make_drafter(model, cfg.drafter);
  const auto full = generate(model, *d1, prompt, g);
  g.cache.budget = budget;
  auto d2 = make_drafter(model, cfg.drafter);
  const auto part = generate(model, *d2, prompt, g);
  const auto a = full.generated(), b = part.generated();
  std::size_t diverge = 0;
  while (diverge < std::min(a.size(), b.size()) && a[diverge] == b[diverge]) ++diverge;
  json j = {{"budget", budget},
            {"prompt_len", prompt.size()},
            {"rouge_l", rouge_l(b, a)},
            {"first_divergence", diverge == a.size() && a.size() == b.size() ? json(nullptr) : json(diverge)},
            {"full_hash", hash_tokens(a)},
            {"partial_hash", hash_tokens(b)},
            {"tau_full", full.steps.empty() ? 0.0 : accept_length_tau(full.steps)},
            {"tau_partial", part.steps.empty() ? 0.0 : accept_length_tau(part.steps)}};
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_plot(const std::string& report_path, const std::string& out_dir) {
  std::ifstream is(report_path);
  if (!is) throw ConfigError("cannot open report: " + report_path);
  json report;
  try {
    is >> report;
  } catch (const json::parse_error& e) {
    throw ConfigError(report_path + ": " + e.what());
  }
  const auto dir = resolve_out_dir(out_dir);
  const auto res = emit_plots(report, dir);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& f : res.files) std::cout << f.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"specpv: speculative decoding with partial KV verification"};
  app.require_subcommand(1);

  std::string model_config, model_out;
  std::uint64_t model_seed = 0;
  auto* init = app.add_subcommand("init-model", "write a randomly initialized checkpoint");
  init->add_option("--config", model_config, "model config JSON (fields of model.config)");
  init->add_option("--seed", model_seed);
  init->add_option("-o,--out", model_out, "checkpoint path; default $SPECPV_OUT_DIR/model.spcv");

  RunOptions gen_opts;
  std::string dump_path;
  bool gen_json = false;
  auto* gen = app.add_subcommand("generate", "generate from one prompt");
  gen_opts.add_to(gen);
  gen->add_option("--budget", gen_opts.budget, "partial cache budget in tokens, or inf");
  gen->add_option("--dump-cache", dump_path, "write the final full KV cache (see docs/cache-dump.md)");
  gen->add_flag("--json", gen_json, "print a JSON summary");

  std::string bench_config, bench_out;
  std::size_t bench_workers = 0;
  auto* bench = app.add_subcommand("bench", "run a benchmark sweep and write report.json / report.csv");
  bench->add_option("config", bench_config, "run config JSON")->required();
  bench->add_option("--out-dir", bench_out, "output directory; default $SPECPV_OUT_DIR or .");
  bench->add_option("--workers", bench_workers, "override the configured worker count");

  RunOptions cmp_opts;
  cmp_opts.budget = "512";
  auto* cmp = app.add_subcommand("compare", "compare partial verification against full verification");
  cmp_opts.add_to(cmp);
  cmp->add_option("--budget", cmp_opts.budget, "partial cache budget in tokens");

  std::string plot_report, plot_out;
  auto* plot = app.add_subcommand("plot", "render SVG charts from a report");
  plot->add_option("report", plot_report, "report.json")->required();
  plot->add_option("--out-dir", plot_out, "output directory; default $SPECPV_OUT_DIR or .");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*init) return cmd_init_model(model_config, model_seed, model_out);
    if (*gen) return cmd_generate(gen_opts, *gen, dump_path, gen_json);
    if (*bench) return cmd_bench(bench_config, bench_out, bench_workers);
    if (*cmp) return cmd_compare(cmp_opts, *cmp);
    if (*plot) return cmd_plot(plot_report, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
