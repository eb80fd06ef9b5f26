// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: JSON parsing with strict validation (docs/config.md).

#pragma once

#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "specpv/corpus.hpp"
#include "specpv/drafter.hpp"
#include "specpv/engine.hpp"
#include "specpv/model.hpp"

namespace specpv {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "chain:D", "binary:D", "eagle-like", or a comma-separated parent list
/// such as "-1,0,0,1".
inline TreeTemplate parse_template(const std::string& s) {
  auto depth_of = [&](const std::string& prefix) -> std::size_t {
    const std::string rest = s.substr(prefix.size());
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(rest, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad template depth in '" + s + "'");
    }
    if (used != rest.size() || v == 0) throw ConfigError("bad template depth in '" + s + "'");
    return v;
  };
  TreeTemplate t;
  if (s == "eagle-like") {
    t = TreeTemplate::eagle_like();
  } else if (s.rfind("chain:", 0) == 0) {
    t = TreeTemplate::chain(depth_of("chain:"));
  } else if (s.rfind("binary:", 0) == 0) {
    t = TreeTemplate::binary(depth_of("binary:"));
  } else {
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t used = 0;
        t.parent.push_back(std::stoi(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError("unknown tree template '" + s + "'");
      }
    }
  }
  try {
    t.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("tree template: ") + e.what());
  }
  return t;
}

inline std::string template_to_string(const TreeTemplate& t) {
  std::string out;
  for (std::size_t i = 0; i < t.parent.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(t.parent[i]);
  }
  return out;
}

namespace detail {

/// Field reader that reports the JSON path and rejects unknown keys.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return as<T>(j_.at(key), path_ + "." + key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(path_ + "." + key + ": required");
    return as<T>(j_.at(key), path_ + "." + key);
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(path_ + "." + key + ": unknown field");
    }
  }

  template <typename T>
  static T as(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0) throw ConfigError(where + ": must be non-negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
    }
    return v.get<T>();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct ModelSource {
  std::string checkpoint;  // empty: build from config + seed
  ModelConfig config{};
  std::uint64_t seed = 0;
};

struct OutputPaths {
  std::string dir;  // empty: $SPECPV_OUT_DIR, else "."
  std::string report = "report.json";
  std::string csv = "report.csv";
};

struct RunConfig {
  ModelSource model{};
  DrafterSpec drafter{};
  GenerationConfig generation{};
  std::vector<std::size_t> budgets;  // partial-verification budgets; full verification always runs
  std::vector<std::size_t> context_lengths{2048};
  std::size_t repetitions = 1;
  std::uint64_t corpus_seed = 7;
  CorpusConfig corpus{};
  std::size_t workers = 1;
  OutputPaths output{};

  void validate() const {
    if (context_lengths.empty()) throw ConfigError("context_lengths: at least one entry required");
    if (repetitions == 0) throw ConfigError("repetitions: must be positive");
    if (workers == 0) throw ConfigError("workers: must be positive");
    for (auto c : context_lengths) {
      if (c == 0) throw ConfigError("context_lengths: entries must be positive");
      if (c + generation.max_new_tokens > generation.max_length) {
        throw ConfigError("context_lengths: context + max_new_tokens exceeds generation.max_length");
      }
    }
    for (auto b : budgets) {
      if (b < (generation.cache.n_sink + generation.cache.n_local) * generation.cache.block_size) {
        throw ConfigError("budgets: " + std::to_string(b) + " smaller than sink + local blocks");
      }
    }
    if (drafter.kind == DrafterKind::kMockNoisy && !(drafter.agreement >= 0.0 && drafter.agreement <= 1.0)) {
      throw ConfigError("drafter.agreement: must lie in [0, 1]");
    }
    try {
      generation.validate();
      if (checkpoint_free()) model.config.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }

  bool checkpoint_free() const { return model.checkpoint.empty(); }
};

inline ModelConfig parse_model_config(const json& j, const std::string& path) {
  detail::ObjectReader r(j, path);
  ModelConfig c;
  c.vocab_size = r.get<std::size_t>("vocab_size", c.vocab_size);
  c.dim = r.get<std::size_t>("dim", c.dim);
  c.n_layers = r.get<std::size_t>("n_layers", c.n_layers);
  c.n_heads = r.get<std::size_t>("n_heads", c.n_heads);
  c.head_dim = r.get<std::size_t>("head_dim", c.dim / std::max<std::size_t>(c.n_heads, 1));
  c.ffn_dim = r.get<std::size_t>("ffn_dim", c.ffn_dim);
  c.max_positions = r.get<std::size_t>("max_positions", c.max_positions);
  c.norm_eps = r.get<double>("norm_eps", c.norm_eps);
  c.eos_token = r.get<std::int32_t>("eos_token", c.eos_token);
  if (r.has("feature_tap_layers")) {
    c.feature_tap_layers.clear();
    const auto& taps = r.child("feature_tap_layers");
    if (!taps.is_array()) throw ConfigError(r.path("feature_tap_layers") + ": expected an array");
    for (const auto& t : taps) c.feature_tap_layers.push_back(detail::ObjectReader::as<std::size_t>(t, r.path("feature_tap_layers")));
  }
  c.rope.head_dim = c.head_dim;
  if (r.has("rope")) {
    detail::ObjectReader rr(r.child("rope"), r.path("rope"));
    c.rope.theta_base = rr.get<double>("theta_base", c.rope.theta_base);
    try {
      c.rope.scaling_mode = rope_scaling_from_string(rr.get<std::string>("scaling", to_string(c.rope.scaling_mode)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(rr.path("scaling") + ": " + e.what());
    }
    c.rope.scaling_factor = rr.get<double>("factor", c.rope.scaling_factor);
    c.rope.low_freq_cutoff = rr.get<double>("low_freq_cutoff", c.rope.low_freq_cutoff);
    c.rope.high_freq_cutoff = rr.get<double>("high_freq_cutoff", c.rope.high_freq_cutoff);
    c.rope.original_context = rr.get<std::size_t>("original_context", c.rope.original_context);
    rr.finish();
  }
  r.finish();
  return c;
}

inline RunConfig parse_run_config(const json& j) {
  detail::ObjectReader root(j, "$");
  RunConfig cfg;

  if (root.has("model")) {
    detail::ObjectReader m(root.child("model"), "$.model");
    cfg.model.checkpoint = m.get<std::string>("checkpoint", "");
    cfg.model.seed = m.get<std::uint64_t>("seed", cfg.model.seed);
    if (m.has("config")) cfg.model.config = parse_model_config(m.child("config"), m.path("config"));
    m.finish();
  }

  if (root.has("drafter")) {
    detail::ObjectReader d(root.child("drafter"), "$.drafter");
    try {
      cfg.drafter.kind = drafter_kind_from_string(d.get<std::string>("kind", to_string(cfg.drafter.kind)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(d.path("kind") + ": " + e.what());
    }
    cfg.drafter.agreement = d.get<double>("agreement", cfg.drafter.agreement);
    cfg.drafter.seed = d.get<std::uint64_t>("seed", cfg.drafter.seed);
    d.finish();
  }

  auto& g = cfg.generation;
  if (root.has("generation")) {
    detail::ObjectReader gr(root.child("generation"), "$.generation");
    g.max_length = gr.get<std::size_t>("max_length", g.max_length);
    g.max_new_tokens = gr.get<std::size_t>("max_new_tokens", g.max_new_tokens);
    g.chunk_size = gr.get<std::size_t>("chunk_size", g.chunk_size);
    g.compute_flops_per_s = gr.get<double>("compute_flops_per_s", g.compute_flops_per_s);
    if (gr.has("template")) g.tree = parse_template(gr.get<std::string>("template", ""));
    if (gr.has("sampling")) {
      detail::ObjectReader s(gr.child("sampling"), gr.path("sampling"));
      g.sampling.greedy = s.get<bool>("greedy", g.sampling.greedy);
      g.sampling.temperature = s.get<double>("temperature", g.sampling.temperature);
      g.sampling.seed = s.get<std::uint64_t>("seed", g.sampling.seed);
      s.finish();
    }
    if (gr.has("cache")) {
      detail::ObjectReader c(gr.child("cache"), gr.path("cache"));
      g.cache.n_sink = c.get<std::size_t>("n_sink", g.cache.n_sink);
      g.cache.n_local = c.get<std::size_t>("n_local", g.cache.n_local);
      g.cache.block_size = c.get<std::size_t>("block_size", g.cache.block_size);
      g.cache.buffer_cap = c.get<std::size_t>("buffer_cap", g.cache.buffer_cap);
      try {
        g.cache.variant = score_variant_from_string(c.get<std::string>("score_variant", to_string(g.cache.variant)));
        g.cache.reduction = reduction_from_string(c.get<std::string>("reduction", to_string(g.cache.reduction)));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(gr.path("cache") + ": " + e.what());
      }
      c.finish();
    }
    if (gr.has("offload")) {
      detail::ObjectReader o(gr.child("offload"), gr.path("offload"));
      g.offload.bandwidth_bytes_per_s = o.get<double>("bandwidth_bytes_per_s", g.offload.bandwidth_bytes_per_s);
      g.offload.per_transfer_latency_s = o.get<double>("latency_s", g.offload.per_transfer_latency_s);
      g.offload.full_offloaded = o.get<bool>("full_offloaded", g.offload.full_offloaded);
      g.offload.partial_offloaded = o.get<bool>("partial_offloaded", g.offload.partial_offloaded);
      o.finish();
    }
    gr.finish();
  }

  if (root.has("budgets")) {
    const auto& b = root.child("budgets");
    if (!b.is_array()) throw ConfigError("$.budgets: expected an array");
    for (const auto& v : b) cfg.budgets.push_back(detail::ObjectReader::as<std::size_t>(v, "$.budgets[]"));
  }
  if (root.has("context_lengths")) {
    const auto& c = root.child("context_lengths");
    if (!c.is_array()) throw ConfigError("$.context_lengths: expected an array");
    cfg.context_lengths.clear();
    for (const auto& v : c) {
      cfg.context_lengths.push_back(detail::ObjectReader::as<std::size_t>(v, "$.context_lengths[]"));
    }
  }
  cfg.repetitions = root.get<std::size_t>("repetitions", cfg.repetitions);
  cfg.workers = root.get<std::size_t>("workers", cfg.workers);
  if (root.has("corpus")) {
    detail::ObjectReader c(root.child("corpus"), "$.corpus");
    cfg.corpus_seed = c.get<std::uint64_t>("seed", cfg.corpus_seed);
    cfg.corpus.motif_length = c.get<std::size_t>("motif_length", cfg.corpus.motif_length);
    cfg.corpus.period = c.get<std::size_t>("period", cfg.corpus.period);
    cfg.corpus.first_motif = c.get<std::size_t>("first_motif", cfg.corpus.first_motif);
    c.finish();
  }
  if (root.has("output")) {
    detail::ObjectReader o(root.child("output"), "$.output");
    cfg.output.dir = o.get<std::string>("dir", cfg.output.dir);
    cfg.output.report = o.get<std::string>("report", cfg.output.report);
    cfg.output.csv = o.get<std::string>("csv", cfg.output.csv);
    o.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Canonical JSON form of a run configuration (echoed into reports).
inline json to_json(const RunConfig& c) {
  const auto& g = c.generation;
  const auto& m = c.model.config;
  json model = {{"seed", c.model.seed}};
  if (!c.model.checkpoint.empty()) model["checkpoint"] = c.model.checkpoint;
  model["config"] = {{"vocab_size", m.vocab_size},
                     {"dim", m.dim},
                     {"n_layers", m.n_layers},
                     {"n_heads", m.n_heads},
                     {"head_dim", m.head_dim},
                     {"ffn_dim", m.ffn_dim},
                     {"max_positions", m.max_positions},
                     {"norm_eps", m.norm_eps},
                     {"eos_token", m.eos_token},
                     {"feature_tap_layers", m.feature_tap_layers},
                     {"rope",
                      {{"theta_base", m.rope.theta_base},
                       {"scaling", to_string(m.rope.scaling_mode)},
                       {"factor", m.rope.scaling_factor},
                       {"low_freq_cutoff", m.rope.low_freq_cutoff},
                       {"high_freq_cutoff", m.rope.high_freq_cutoff},
                       {"original_context", m.rope.original_context}}}};
  return {{"model", model},
          {"drafter", {{"kind", to_string(c.drafter.kind)}, {"agreement", c.drafter.agreement}, {"seed", c.drafter.seed}}},
          {"generation",
           {{"max_length", g.max_length},
            {"max_new_tokens", g.max_new_tokens},
            {"chunk_size", g.chunk_size},
            {"compute_flops_per_s", g.compute_flops_per_s},
            {"template", template_to_string(g.tree)},
            {"sampling", {{"greedy", g.sampling.greedy}, {"temperature", g.sampling.temperature}, {"seed", g.sampling.seed}}},
            {"cache",
             {{"n_sink", g.cache.n_sink},
              {"n_local", g.cache.n_local},
              {"block_size", g.cache.block_size},
              {"buffer_cap", g.effective_buffer_cap()},
              {"score_variant", to_string(g.cache.variant)},
              {"reduction", to_string(g.cache.reduction)}}},
            {"offload",
             {{"bandwidth_bytes_per_s", g.offload.bandwidth_bytes_per_s},
              {"latency_s", g.offload.per_transfer_latency_s},
              {"full_offloaded", g.offload.full_offloaded},
              {"partial_offloaded", g.offload.partial_offloaded}}}}},
          {"budgets", c.budgets},
          {"context_lengths", c.context_lengths},
          {"repetitions", c.repetitions},
          {"workers", c.workers},
          {"corpus",
           {{"seed", c.corpus_seed},
            {"motif_length", c.corpus.motif_length},
            {"period", c.corpus.period},
            {"first_motif", c.corpus.first_motif}}}};
}

}  // namespace specpv
