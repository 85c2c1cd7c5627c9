#pragma once

// YAML form of RunConfig. Every key is optional; unknown keys are errors.
//
//   method: np                # np | finite-nonuniform | finite-uniform | single
//   seed: 0
//   schedule: polynomial:800,sinusoid:600,sawtooth:600
//   iterations: 2000          # default: schedule length
//   model:   {input_dim, hidden: [40, 40], output_dim, init_stddev}
//   adapt:   {steps, alpha, first_order}
//   mixture: {components, tau, beta, meta_batch, support, query, optimizer, loss, blob_classes}
//   crp:     {zeta, threshold_factor, window, penalty, count_floor, cooldown, cooldown_mode,
//             freeze_during_cooldown, capacity, warmup, prior_cadence, spawn_stddev,
//             prior_weighting, prune_share, prune_lookback}
//   harness: {eval_every, bank_episodes, bank_seed}
//
// Overrides are KEY=VALUE with KEY either dotted ("crp.zeta") or a leaf
// name that is unique across sections ("zeta"). VALUE is parsed as YAML.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "metamix/error.hpp"
#include "metamix/run_config.hpp"

namespace metamix {

inline constexpr std::string_view kArtifactVersion = "0.1.0";

namespace detail {

struct KeyInfo {
  std::string_view section;  // empty for top level
  std::string_view leaf;
};

inline const std::vector<KeyInfo>& config_keys() {
  static const std::vector<KeyInfo> keys = {
      {"", "method"}, {"", "seed"}, {"", "schedule"}, {"", "iterations"}, {"", "artifact_version"},
      {"model", "input_dim"}, {"model", "hidden"}, {"model", "output_dim"}, {"model", "init_stddev"},
      {"adapt", "steps"}, {"adapt", "alpha"}, {"adapt", "first_order"},
      {"mixture", "components"}, {"mixture", "tau"}, {"mixture", "beta"}, {"mixture", "meta_batch"},
      {"mixture", "support"}, {"mixture", "query"}, {"mixture", "optimizer"}, {"mixture", "loss"},
      {"mixture", "blob_classes"},
      {"crp", "zeta"}, {"crp", "threshold_factor"}, {"crp", "window"}, {"crp", "penalty"},
      {"crp", "count_floor"}, {"crp", "cooldown"}, {"crp", "cooldown_mode"}, {"crp", "freeze_during_cooldown"},
      {"crp", "capacity"}, {"crp", "warmup"}, {"crp", "prior_cadence"}, {"crp", "spawn_stddev"},
      {"crp", "prior_weighting"}, {"crp", "prune_share"}, {"crp", "prune_lookback"},
      {"harness", "eval_every"}, {"harness", "bank_episodes"}, {"harness", "bank_seed"},
  };
  return keys;
}

inline bool is_section(std::string_view s) {
  return s == "model" || s == "adapt" || s == "mixture" || s == "crp" || s == "harness";
}

inline bool known(std::string_view section, std::string_view leaf) {
  for (const KeyInfo& k : config_keys())
    if (k.section == section && k.leaf == leaf) return true;
  return false;
}

inline std::string dotted(std::string_view section, std::string_view leaf) {
  return section.empty() ? std::string(leaf) : std::string(section) + "." + std::string(leaf);
}

template <class T>
T scalar_as(const YAML::Node& n, const std::string& key, std::string_view expect) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(key, "expected " + std::string(expect));
  }
}

inline std::size_t count_as(const YAML::Node& n, const std::string& key) {
  long long v = scalar_as<long long>(n, key, "a non-negative integer");
  if (v < 0) throw ConfigError(key, "must be >= 0");
  return static_cast<std::size_t>(v);
}

inline std::uint64_t u64_as(const YAML::Node& n, const std::string& key) {
  std::string s = scalar_as<std::string>(n, key, "an unsigned integer");
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key, "expected an unsigned integer");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError(key, "out of range");
  }
}

/// Shortest text that parses back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// Resolves "zeta" or "crp.zeta" to its canonical dotted key.
inline std::string resolve_key(std::string_view key) {
  using namespace detail;
  if (std::size_t dot = key.find('.'); dot != std::string_view::npos) {
    std::string_view sec = key.substr(0, dot), leaf = key.substr(dot + 1);
    if (!known(sec, leaf)) throw ConfigError(std::string(key), "unknown key");
    return std::string(key);
  }
  std::vector<std::string> hits;
  for (const KeyInfo& k : config_keys())
    if (k.leaf == key) hits.push_back(dotted(k.section, k.leaf));
  if (hits.empty()) throw ConfigError(std::string(key), "unknown key");
  if (hits.size() > 1) throw ConfigError(std::string(key), "ambiguous key; use the dotted form");
  return hits.front();
}

/// Applies one KEY=VALUE override to a config document.
inline void apply_override(YAML::Node& root, std::string_view assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError(std::string(assignment), "override must look like KEY=VALUE");
  std::string key = resolve_key(assignment.substr(0, eq));
  std::string text(assignment.substr(eq + 1));
  YAML::Node value;
  try {
    value = YAML::Load(text);
  } catch (const YAML::Exception&) {
    throw ConfigError(key, "cannot parse value '" + text + "'");
  }
  if (value.IsNull()) value = YAML::Node(text);
  if (!root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
  if (std::size_t dot = key.find('.'); dot != std::string::npos) {
    std::string sec = key.substr(0, dot), leaf = key.substr(dot + 1);
    if (!root[sec].IsMap()) root[sec] = YAML::Node(YAML::NodeType::Map);
    YAML::Node section = root[sec];
    section[leaf] = value;
  } else {
    root[key] = value;
  }
}

inline RunConfig config_from_yaml(const YAML::Node& root) {
  using namespace detail;
  RunConfig c;
  if (!root || root.IsNull()) {
    c.validate();
    return c;
  }
  if (!root.IsMap()) throw ConfigError("<root>", "config must be a mapping");

  for (const auto& kv : root) {
    std::string k = kv.first.as<std::string>();
    if (is_section(k)) {
      if (!kv.second.IsMap()) throw ConfigError(k, "expected a mapping");
      for (const auto& inner : kv.second) {
        std::string leaf = inner.first.as<std::string>();
        if (!known(k, leaf)) throw ConfigError(dotted(k, leaf), "unknown key");
      }
    } else if (!known("", k)) {
      throw ConfigError(k, "unknown key");
    }
  }

  // a missing key, or one given without a value, keeps the default
  auto usable = [](const YAML::Node& n) { return n.IsDefined() && !n.IsNull(); };
  const YAML::Node none(YAML::NodeType::Undefined);
  auto top = [&](const char* leaf) -> YAML::Node { return usable(root[leaf]) ? root[leaf] : none; };
  auto sec = [&](const char* s, const char* leaf) -> YAML::Node {
    const YAML::Node n = root[s];
    if (!usable(n)) return none;
    return usable(n[leaf]) ? n[leaf] : none;
  };

  if (auto n = top("method")) c.method = parse_method(scalar_as<std::string>(n, "method", "a method name"));
  if (auto n = top("seed")) c.seed = u64_as(n, "seed");
  if (auto n = top("schedule")) {
    try {
      c.schedule = PhaseSchedule::parse(scalar_as<std::string>(n, "schedule", "a schedule string"));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("schedule", e.what());
    }
  }
  if (auto n = top("iterations")) c.iterations = count_as(n, "iterations");
  if (auto n = top("artifact_version")) scalar_as<std::string>(n, "artifact_version", "a version string");

  MlpSpec& net = c.mixture.model;
  if (auto n = sec("model", "input_dim")) net.input_dim = count_as(n, "model.input_dim");
  if (auto n = sec("model", "output_dim")) net.output_dim = count_as(n, "model.output_dim");
  if (auto n = sec("model", "hidden")) {
    if (!n.IsSequence()) throw ConfigError("model.hidden", "expected a list of widths");
    net.hidden.clear();
    for (const auto& w : n) net.hidden.push_back(count_as(w, "model.hidden"));
  }
  if (auto n = sec("model", "init_stddev")) c.mixture.init_stddev = scalar_as<double>(n, "init_stddev", "a number");

  AdaptConfig& ad = c.mixture.adapt;
  if (auto n = sec("adapt", "steps")) ad.steps = static_cast<int>(count_as(n, "steps"));
  if (auto n = sec("adapt", "alpha")) ad.alpha = scalar_as<double>(n, "alpha", "a number");
  if (auto n = sec("adapt", "first_order")) ad.first_order = scalar_as<bool>(n, "first_order", "true or false");

  MixtureConfig& m = c.mixture;
  if (auto n = sec("mixture", "components")) m.components = count_as(n, "components");
  if (auto n = sec("mixture", "tau")) m.tau = scalar_as<double>(n, "tau", "a number");
  if (auto n = sec("mixture", "beta")) m.beta = scalar_as<double>(n, "beta", "a number");
  if (auto n = sec("mixture", "meta_batch")) m.meta_batch = count_as(n, "meta_batch");
  if (auto n = sec("mixture", "support")) m.support = count_as(n, "support");
  if (auto n = sec("mixture", "query")) m.query = count_as(n, "query");
  if (auto n = sec("mixture", "blob_classes")) m.blob_classes = count_as(n, "blob_classes");
  if (auto n = sec("mixture", "optimizer")) {
    std::string s = scalar_as<std::string>(n, "optimizer", "sgd or adam");
    if (s == "sgd") m.optimizer = MetaOptimizer::Sgd;
    else if (s == "adam") m.optimizer = MetaOptimizer::Adam;
    else throw ConfigError("optimizer", "expected sgd or adam");
  }
  if (auto n = sec("mixture", "loss")) {
    std::string s = scalar_as<std::string>(n, "loss", "mse or cross_entropy");
    if (s == "mse") m.loss = LossKind::MeanSquaredError;
    else if (s == "cross_entropy") m.loss = LossKind::CrossEntropy;
    else throw ConfigError("loss", "expected mse or cross_entropy");
  }

  CrpConfig& r = c.crp;
  if (auto n = sec("crp", "zeta")) r.zeta = scalar_as<double>(n, "zeta", "a number");
  if (auto n = sec("crp", "threshold_factor")) r.threshold_factor = scalar_as<double>(n, "threshold_factor", "a number");
  if (auto n = sec("crp", "window")) r.window = count_as(n, "window");
  if (auto n = sec("crp", "penalty")) r.penalty = scalar_as<double>(n, "penalty", "a number");
  if (auto n = sec("crp", "count_floor")) r.count_floor = scalar_as<double>(n, "count_floor", "a number");
  if (auto n = sec("crp", "cooldown")) r.cooldown = count_as(n, "cooldown");
  if (auto n = sec("crp", "cooldown_mode")) {
    std::string s = scalar_as<std::string>(n, "cooldown_mode", "task-agnostic or task-aware");
    if (s == "task-agnostic") r.cooldown_mode = CooldownMode::TaskAgnostic;
    else if (s == "task-aware") r.cooldown_mode = CooldownMode::TaskAware;
    else throw ConfigError("cooldown_mode", "expected task-agnostic or task-aware");
  }
  if (auto n = sec("crp", "freeze_during_cooldown"))
    r.freeze_during_cooldown = scalar_as<bool>(n, "freeze_during_cooldown", "true or false");
  if (auto n = sec("crp", "capacity")) r.capacity = count_as(n, "capacity");
  if (auto n = sec("crp", "warmup")) r.warmup = count_as(n, "warmup");
  if (auto n = sec("crp", "prior_cadence")) r.prior_cadence = count_as(n, "prior_cadence");
  if (auto n = sec("crp", "spawn_stddev")) r.spawn_stddev = scalar_as<double>(n, "spawn_stddev", "a number");
  if (auto n = sec("crp", "prior_weighting")) {
    std::string s = scalar_as<std::string>(n, "prior_weighting", "size or uniform");
    if (s == "size") r.prior_weighting = PriorWeighting::Size;
    else if (s == "uniform") r.prior_weighting = PriorWeighting::Uniform;
    else throw ConfigError("prior_weighting", "expected size or uniform");
  }
  if (auto n = sec("crp", "prune_share")) r.prune_share = scalar_as<double>(n, "prune_share", "a number");
  if (auto n = sec("crp", "prune_lookback")) r.prune_lookback = count_as(n, "prune_lookback");

  HarnessConfig& h = c.harness;
  if (auto n = sec("harness", "eval_every")) h.eval_every = count_as(n, "eval_every");
  if (auto n = sec("harness", "bank_episodes")) h.bank_episodes = count_as(n, "bank_episodes");
  if (auto n = sec("harness", "bank_seed")) h.bank_seed = u64_as(n, "bank_seed");

  c.validate();
  return c;
}

/// Loads `path` (if given), applies overrides in order, validates.
inline RunConfig parse_config(const std::optional<std::string>& path, std::span<const std::string> overrides = {}) {
  YAML::Node root(YAML::NodeType::Map);
  if (path) {
    std::ifstream in(*path);
    if (!in) throw Error("cannot read config file " + *path);
    try {
      root = YAML::Load(in);
    } catch (const YAML::Exception& e) {
      throw Error("cannot parse config file " + *path + ": " + e.what());
    }
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  }
  for (const std::string& o : overrides) apply_override(root, o);
  return config_from_yaml(root);
}

inline RunConfig parse_config_text(std::string_view text, std::span<const std::string> overrides = {}) {
  YAML::Node root = YAML::Load(std::string(text));
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  for (const std::string& o : overrides) apply_override(root, o);
  return config_from_yaml(root);
}

/// Fully resolved config in a stable key order; parses back to an equal config.
inline std::string dump_config(const RunConfig& c) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "artifact_version" << YAML::Value << std::string(kArtifactVersion);
  e << YAML::Key << "method" << YAML::Value << std::string(method_name(c.method));
  e << YAML::Key << "seed" << YAML::Value << c.seed;
  e << YAML::Key << "schedule" << YAML::Value << c.schedule.str();
  e << YAML::Key << "iterations" << YAML::Value << c.total_iterations();

  const MixtureConfig& m = c.mixture;
  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "input_dim" << YAML::Value << m.model.input_dim;
  e << YAML::Key << "hidden" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (std::size_t w : m.model.hidden) e << w;
  e << YAML::EndSeq;
  e << YAML::Key << "output_dim" << YAML::Value << m.model.output_dim;
  e << YAML::Key << "init_stddev" << YAML::Value << detail::shortest(m.init_stddev);
  e << YAML::EndMap;

  e << YAML::Key << "adapt" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "steps" << YAML::Value << m.adapt.steps;
  e << YAML::Key << "alpha" << YAML::Value << detail::shortest(m.adapt.alpha);
  e << YAML::Key << "first_order" << YAML::Value << m.adapt.first_order;
  e << YAML::EndMap;

  e << YAML::Key << "mixture" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "components" << YAML::Value << m.components;
  e << YAML::Key << "tau" << YAML::Value << detail::shortest(m.tau);
  e << YAML::Key << "beta" << YAML::Value << detail::shortest(m.beta);
  e << YAML::Key << "meta_batch" << YAML::Value << m.meta_batch;
  e << YAML::Key << "support" << YAML::Value << m.support;
  e << YAML::Key << "query" << YAML::Value << m.query;
  e << YAML::Key << "optimizer" << YAML::Value << (m.optimizer == MetaOptimizer::Sgd ? "sgd" : "adam");
  e << YAML::Key << "loss" << YAML::Value << (m.loss == LossKind::MeanSquaredError ? "mse" : "cross_entropy");
  e << YAML::Key << "blob_classes" << YAML::Value << m.blob_classes;
  e << YAML::EndMap;

  const CrpConfig& r = c.crp;
  e << YAML::Key << "crp" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "zeta" << YAML::Value << detail::shortest(r.zeta);
  e << YAML::Key << "threshold_factor" << YAML::Value << detail::shortest(r.threshold_factor);
  e << YAML::Key << "window" << YAML::Value << r.window;
  e << YAML::Key << "penalty" << YAML::Value << detail::shortest(r.penalty);
  e << YAML::Key << "count_floor" << YAML::Value << detail::shortest(r.count_floor);
  e << YAML::Key << "cooldown" << YAML::Value << r.cooldown;
  e << YAML::Key << "cooldown_mode" << YAML::Value
    << (r.cooldown_mode == CooldownMode::TaskAgnostic ? "task-agnostic" : "task-aware");
  e << YAML::Key << "freeze_during_cooldown" << YAML::Value << r.freeze_during_cooldown;
  e << YAML::Key << "capacity" << YAML::Value << r.capacity;
  e << YAML::Key << "warmup" << YAML::Value << r.warmup;
  e << YAML::Key << "prior_cadence" << YAML::Value << r.prior_cadence;
  e << YAML::Key << "spawn_stddev" << YAML::Value << detail::shortest(r.spawn_stddev);
  e << YAML::Key << "prior_weighting" << YAML::Value << (r.prior_weighting == PriorWeighting::Size ? "size" : "uniform");
  e << YAML::Key << "prune_share" << YAML::Value << detail::shortest(r.prune_share);
  e << YAML::Key << "prune_lookback" << YAML::Value << r.prune_lookback;
  e << YAML::EndMap;

  e << YAML::Key << "harness" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "eval_every" << YAML::Value << c.harness.eval_every;
  e << YAML::Key << "bank_episodes" << YAML::Value << c.harness.bank_episodes;
  e << YAML::Key << "bank_seed" << YAML::Value << c.bank_seed();
  e << YAML::EndMap;

  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

/// FNV-1a of the resolved config text.
inline std::uint64_t config_hash(const RunConfig& c) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : dump_config(c)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace metamix
