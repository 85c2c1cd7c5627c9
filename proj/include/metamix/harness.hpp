#pragma once

// Continual-learning harness: held-out episode banks, side-effect-free
// evaluation, forgetting metrics, and the full experiment runner with its
// output files.

#include <algorithm>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metamix/config.hpp"
#include "metamix/error.hpp"
#include "metamix/finite_mixture.hpp"
#include "metamix/np_mixture.hpp"
#include "metamix/parallel.hpp"
#include "metamix/rng.hpp"
#include "metamix/run_config.hpp"
#include "metamix/taskgen.hpp"

namespace metamix {

// -- episode bank ------------------------------------------------------------------

struct EpisodeBank {
  std::uint64_t seed = 0;
  std::vector<Family> families;
  std::vector<std::vector<Episode>> episodes;  // aligned with families

  const std::vector<Episode>& of(Family f) const {
    for (std::size_t i = 0; i < families.size(); ++i)
      if (families[i] == f) return episodes[i];
    throw Error("bank has no episodes for family " + std::string(family_name(f)));
  }
};

/// Each family draws from its own stream, so adding a family leaves the
/// others unchanged.
inline EpisodeBank build_bank(const std::vector<Family>& families, std::size_t per_family, std::size_t support,
                              std::size_t query, std::uint64_t seed, std::size_t blob_classes = 5) {
  if (per_family < 1) throw Error("bank needs at least one episode per family");
  EpisodeBank bank;
  bank.seed = seed;
  for (Family f : families) {
    Rng rng = make_rng(seed, Stream::Bank, static_cast<std::uint64_t>(f));
    std::vector<Episode> eps;
    eps.reserve(per_family);
    for (std::size_t i = 0; i < per_family; ++i)
      eps.push_back(sample_episode(sample_task(f, rng, blob_classes), support, query, rng));
    bank.families.push_back(f);
    bank.episodes.push_back(std::move(eps));
  }
  return bank;
}

// -- evaluation --------------------------------------------------------------------

/// How a trained state assigns tasks to its clusters.
struct EStepRule {
  enum class Kind { Softmax, Uniform, Crp } kind = Kind::Softmax;
  double tau = 1.0;
  CrpConfig crp;

  static EStepRule for_run(const RunConfig& c) {
    EStepRule r;
    r.tau = c.mixture.tau;
    r.crp = c.crp;
    if (c.method == Method::Np) r.kind = Kind::Crp;
    else if (c.method == Method::FiniteUniform) r.kind = Kind::Uniform;
    return r;
  }

  Responsibilities operator()(std::span<const double> loglik, std::size_t tasks, const MixtureState& state) const {
    const std::size_t L = state.clusters.size();
    switch (kind) {
      case Kind::Uniform: return uniform_assignments(tasks, L);
      case Kind::Crp: {
        std::vector<double> counts = state.cluster_counts();
        return dp_e_step_existing(loglik, tasks, counts, crp, tau);
      }
      case Kind::Softmax: break;
    }
    return e_step(loglik, tasks, L, tau);
  }
};

struct FamilyEval {
  Family family = Family::Sinusoid;
  double loss = 0.0;           // mean over episodes of sum_l gamma_l * loss_l
  std::vector<double> gamma;   // mean responsibility, indexed by slot (capacity wide)
};

/// Adapts every cluster to every bank episode and aggregates. The state is
/// only read: no spawning and no count updates.
inline FamilyEval evaluate(TaskRunner& runner, const MixtureState& state, const std::vector<Episode>& episodes,
                           Family family, const EStepRule& rule) {
  if (state.clusters.empty()) throw Error("cannot evaluate a state without clusters");
  const std::size_t L = state.clusters.size(), E = episodes.size();
  std::vector<TaskRunner::Job> jobs;
  jobs.reserve(L * E);
  for (const Cluster& c : state.clusters)
    for (const Episode& e : episodes) jobs.push_back({&c.theta, &e, TaskProgram::Mode::Score});
  std::vector<TaskResult> results = runner.run(jobs);

  std::vector<double> ll(E * L);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < E; ++j) ll[j * L + l] = results[l * E + j].support_loglik();
  Responsibilities gamma = rule(ll, E, state);

  FamilyEval out;
  out.family = family;
  out.gamma.assign(state.capacity, 0.0);
  for (std::size_t j = 0; j < E; ++j)
    for (std::size_t l = 0; l < L; ++l) {
      out.loss += gamma(j, l) * results[l * E + j].query_loss;
      out.gamma[state.clusters[l].slot] += gamma(j, l);
    }
  out.loss /= static_cast<double>(E);
  for (double& g : out.gamma) g /= static_cast<double>(E);
  return out;
}

// -- metrics -----------------------------------------------------------------------

struct MetricsRecord {
  std::size_t iteration = 0;  // completed meta-iterations
  Family family = Family::Sinusoid;
  double loss = 0.0;
  std::vector<double> gamma;  // by slot
  std::size_t active_clusters = 0;
  bool spawned = false;  // a spawn happened since the previous evaluation
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_header(std::ostream& os, std::size_t capacity) {
  os << "iter,family,loss";
  for (std::size_t k = 1; k <= capacity; ++k) os << ",gamma_c" << k;
  os << ",active_clusters,spawned\n";
}

inline void write_metrics_row(std::ostream& os, const MetricsRecord& r) {
  os << r.iteration << "," << family_name(r.family) << "," << format_double(r.loss);
  for (double g : r.gamma) os << "," << format_double(g);
  os << "," << r.active_clusters << "," << (r.spawned ? 1 : 0) << "\n";
}

inline void write_spawns_header(std::ostream& os) {
  os << "iteration,new_cluster_id,candidate_mass,epsilon,active_cluster_count\n";
}

inline void write_spawn_row(std::ostream& os, const SpawnEvent& s) {
  os << s.iteration << "," << s.new_cluster_id << "," << format_double(s.candidate_mass) << ","
     << format_double(s.epsilon) << "," << s.active_clusters << "\n";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<MetricsRecord> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("metrics CSV is empty");
  std::vector<std::string> head = split_csv_line(line);
  if (head.size() < 5 || head[0] != "iter" || head[1] != "family" || head[2] != "loss")
    throw Error("metrics CSV has an unexpected header");
  const std::size_t slots = head.size() - 5;
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != head.size()) throw Error("metrics CSV row has the wrong number of cells");
    MetricsRecord r;
    r.iteration = std::stoull(cells[0]);
    r.family = parse_family(cells[1]);
    r.loss = std::stod(cells[2]);
    for (std::size_t k = 0; k < slots; ++k) r.gamma.push_back(std::stod(cells[3 + k]));
    r.active_clusters = std::stoull(cells[3 + slots]);
    r.spawned = cells[4 + slots] == "1";
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  return read_metrics_csv(in);
}

inline std::vector<SpawnEvent> read_spawns_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<SpawnEvent> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c = split_csv_line(line);
    if (c.size() != 5) throw Error("spawn CSV row has the wrong number of cells");
    out.push_back({std::stoull(c[0]), std::stoull(c[1]), std::stod(c[2]), std::stod(c[3]), std::stoull(c[4])});
  }
  return out;
}

// -- forgetting --------------------------------------------------------------------

/// Per family: loss at the end of training minus loss at the end of the
/// family's first phase (latest record at or before that point). Positive
/// means the family got worse.
inline double family_forgetting(const std::vector<MetricsRecord>& records, const PhaseSchedule& schedule,
                                Family family) {
  std::optional<std::size_t> phase_end;
  for (std::size_t i = 0; i < schedule.phases.size(); ++i) {
    const auto& fs = schedule.phases[i].families;
    if (std::find(fs.begin(), fs.end(), family) != fs.end()) {
      phase_end = schedule.bounds(i).second;
      break;
    }
  }
  if (!phase_end) throw Error("family " + std::string(family_name(family)) + " is not in the schedule");
  std::optional<MetricsRecord> at_end, last;
  for (const MetricsRecord& r : records) {
    if (r.family != family) continue;
    if (r.iteration <= *phase_end && (!at_end || r.iteration >= at_end->iteration)) at_end = r;
    if (!last || r.iteration >= last->iteration) last = r;
  }
  if (!at_end || !last) throw Error("no records for family " + std::string(family_name(family)));
  if (last->iteration != schedule.total())
    throw Error("metrics history ends at iteration " + std::to_string(last->iteration) + ", schedule at " +
                std::to_string(schedule.total()));
  return last->loss - at_end->loss;
}

/// Mean forgetting over the first two families of the schedule. For an
/// accuracy metric the sign would flip.
inline double catastrophic_forgetting(const std::vector<MetricsRecord>& records, const PhaseSchedule& schedule) {
  std::vector<Family> fams = schedule.families();
  if (fams.size() < 2) throw Error("forgetting needs at least two families in the schedule");
  return 0.5 * (family_forgetting(records, schedule, fams[0]) + family_forgetting(records, schedule, fams[1]));
}

inline double catastrophic_forgetting_from_csv(const std::string& path, const PhaseSchedule& schedule) {
  return catastrophic_forgetting(read_metrics_csv(path), schedule);
}

// -- checkpoints -------------------------------------------------------------------

inline nlohmann::json state_to_json(const MixtureState& s) {
  nlohmann::json j;
  j["iteration"] = s.iteration;
  j["capacity"] = s.capacity;
  nlohmann::json cl = nlohmann::json::array();
  for (const Cluster& c : s.clusters)
    cl.push_back({{"id", c.id()},
                  {"slot", c.slot},
                  {"spawn_iteration", c.spawn_iteration},
                  {"optimizer_steps", c.optimizer.steps}});
  j["clusters"] = cl;
  j["prior_ready"] = s.prior.ready;
  j["prior_noise_stddev"] = s.prior.noise_stddev;
  j["prior_cadence"] = s.prior.cadence;
  j["window"] = s.counts.window();
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : s.counts.history()) hist.push_back(h);
  j["window_history"] = hist;
  nlohmann::json assign = nlohmann::json::array();
  for (const auto& h : s.assignment_history) assign.push_back(h);
  j["assignment_history"] = assign;
  j["last_spawn"] = s.last_spawn ? nlohmann::json(*s.last_spawn) : nlohmann::json(nullptr);
  nlohmann::json sp = nlohmann::json::array();
  for (const SpawnEvent& e : s.spawns)
    sp.push_back({{"iteration", e.iteration},
                  {"new_cluster_id", e.new_cluster_id},
                  {"candidate_mass", e.candidate_mass},
                  {"epsilon", e.epsilon},
                  {"active_clusters", e.active_clusters}});
  j["spawns"] = sp;
  return j;
}

struct Checkpoint {
  RunConfig config;
  MixtureState state;
  std::uint64_t config_hash = 0;
  std::string status;  // "complete" or "halted: <reason>"
};

/// Writes `<base>.json` and `<base>.bin`: cluster initializations, then the
/// prior mean when set, then Adam moments (m, v) of every cluster that has
/// taken an Adam step.
inline void save_checkpoint(const std::string& base, const RunConfig& cfg, const MixtureState& s,
                            const std::string& status = "complete") {
  std::vector<ParamVector> vectors;
  for (const Cluster& c : s.clusters) vectors.push_back(c.theta);
  if (s.prior.ready) vectors.push_back(s.prior.mean);
  for (const Cluster& c : s.clusters)
    if (c.optimizer.steps > 0) {
      vectors.emplace_back(c.optimizer.m);
      vectors.emplace_back(c.optimizer.v);
    }
  nlohmann::json extra;
  extra["layout_version"] = kParamLayoutVersion;
  extra["artifact_version"] = std::string(kArtifactVersion);
  extra["seed"] = cfg.seed;
  extra["config_hash"] = config_hash(cfg);
  extra["config"] = dump_config(cfg);
  extra["status"] = status;
  extra["state"] = state_to_json(s);
  save_param_file(base, cfg.mixture.model, vectors, extra);
}

inline Checkpoint load_checkpoint(const std::string& base) {
  ParamFile f = load_param_file(base);
  Checkpoint ck;
  const nlohmann::json& h = f.header;
  ck.config = parse_config_text(h.at("config").get<std::string>());
  ck.config_hash = h.at("config_hash").get<std::uint64_t>();
  if (ck.config_hash != config_hash(ck.config)) throw Error("checkpoint config hash mismatch in " + base + ".json");
  ck.status = h.value("status", "complete");
  const nlohmann::json& js = h.at("state");
  MixtureState& s = ck.state;
  s.iteration = js.at("iteration").get<std::size_t>();
  s.capacity = js.at("capacity").get<std::size_t>();
  const nlohmann::json& cl = js.at("clusters");
  const bool prior_ready = js.at("prior_ready").get<bool>();
  std::size_t moments = 0;
  for (const auto& c : cl)
    if (c.value("optimizer_steps", std::size_t{0}) > 0) moments += 2;
  const std::size_t base_count = cl.size() + (prior_ready ? 1 : 0);
  if (f.vectors.size() != base_count + moments) throw Error("checkpoint vector count mismatch");
  std::size_t next = base_count;
  for (std::size_t i = 0; i < cl.size(); ++i) {
    Cluster c;
    c.slot = cl[i].at("slot").get<std::size_t>();
    c.spawn_iteration = cl[i].at("spawn_iteration").get<std::size_t>();
    c.theta = f.vectors[i];
    c.optimizer.steps = cl[i].value("optimizer_steps", std::size_t{0});
    if (c.optimizer.steps > 0) {
      c.optimizer.m = f.vectors[next++].values;
      c.optimizer.v = f.vectors[next++].values;
    }
    s.clusters.push_back(std::move(c));
  }
  s.prior.ready = prior_ready;
  if (prior_ready) s.prior.mean = f.vectors[cl.size()];
  s.prior.noise_stddev = js.at("prior_noise_stddev").get<double>();
  s.prior.cadence = js.at("prior_cadence").get<std::size_t>();
  s.counts = WindowCounts(js.at("window").get<std::size_t>(), s.capacity);
  std::deque<std::vector<double>> hist;
  for (const auto& row : js.at("window_history")) hist.push_back(row.get<std::vector<double>>());
  s.counts.restore(std::move(hist));
  if (js.contains("assignment_history"))
    for (const auto& row : js.at("assignment_history")) s.assignment_history.push_back(row.get<std::vector<double>>());
  if (!js.at("last_spawn").is_null()) s.last_spawn = js.at("last_spawn").get<std::size_t>();
  for (const auto& e : js.at("spawns"))
    s.spawns.push_back({e.at("iteration").get<std::size_t>(), e.at("new_cluster_id").get<std::size_t>(),
                        e.at("candidate_mass").get<double>(), e.at("epsilon").get<double>(),
                        e.at("active_clusters").get<std::size_t>()});
  return ck;
}

// -- experiment runner -------------------------------------------------------------

/// Training state plus compiled programs for one run.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, ThreadPool& pool) : cfg_(cfg), mix_(cfg.effective_mixture()), learner_(mix_, pool) {
    cfg_.validate();
    state_ = cfg.method == Method::Np ? init_np_state(mix_, cfg.crp, cfg.seed)
                                      : init_finite_state(mix_, cfg.seed, cfg.crp.capacity);
  }

  const RunConfig& config() const { return cfg_; }
  const MixtureState& state() const { return state_; }
  MixtureState& state() { return state_; }
  TaskRunner& runner() { return learner_.runner(); }

  IterationStats step() {
    if (cfg_.method == Method::Np) return np_step(learner_, mix_, cfg_.crp, state_, cfg_.schedule, cfg_.seed);
    return finite_step(learner_, mix_, state_, cfg_.schedule, cfg_.seed);
  }

 private:
  RunConfig cfg_;
  MixtureConfig mix_;
  Learner learner_;
  MixtureState state_;
};

inline std::vector<MetricsRecord> evaluate_all(TaskRunner& runner, const MixtureState& state, const EpisodeBank& bank,
                                               const EStepRule& rule, bool spawned) {
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < bank.families.size(); ++i) {
    FamilyEval fe = evaluate(runner, state, bank.episodes[i], bank.families[i], rule);
    out.push_back({state.iteration, fe.family, fe.loss, std::move(fe.gamma), state.clusters.size(), spawned});
  }
  return out;
}

struct ExperimentResult {
  std::vector<MetricsRecord> records;
  std::vector<SpawnEvent> spawns;
  MixtureState state;
};

struct ExperimentOptions {
  std::size_t threads = 1;
  std::function<void(const IterationStats&)> on_iteration;  // progress logging
};

/// Trains with periodic evaluation. With a non-empty `out_dir` writes
/// metrics.csv, spawns.csv, manifest.yaml and checkpoint.{json,bin}.
inline ExperimentResult run_experiment(const RunConfig& cfg, const std::string& out_dir = {},
                                       const ExperimentOptions& opts = {}) {
  cfg.validate();
  ThreadPool pool(opts.threads);
  Trainer trainer(cfg, pool);
  EpisodeBank bank = build_bank(cfg.schedule.families(), cfg.harness.bank_episodes, cfg.mixture.support,
                                cfg.mixture.query, cfg.bank_seed(), cfg.mixture.blob_classes);
  EStepRule rule = EStepRule::for_run(cfg);
  const std::size_t iterations = cfg.total_iterations();

  std::unique_ptr<std::ofstream> metrics, spawns;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream manifest(out_dir + "/manifest.yaml");
    if (!manifest) throw Error("cannot write " + out_dir + "/manifest.yaml");
    manifest << dump_config(cfg);
    metrics = std::make_unique<std::ofstream>(out_dir + "/metrics.csv");
    spawns = std::make_unique<std::ofstream>(out_dir + "/spawns.csv");
    if (!*metrics || !*spawns) throw Error("cannot write outputs in " + out_dir);
    write_metrics_header(*metrics, cfg.crp.capacity);
    write_spawns_header(*spawns);
  }

  ExperimentResult out;
  bool spawned_since = false;
  auto record = [&] {
    for (MetricsRecord& r : evaluate_all(trainer.runner(), trainer.state(), bank, rule, spawned_since)) {
      if (metrics) write_metrics_row(*metrics, r);
      out.records.push_back(std::move(r));
    }
    if (metrics) metrics->flush();
    spawned_since = false;
  };

  try {
    record();
    while (trainer.state().iteration < iterations) {
      IterationStats st = trainer.step();
      if (st.spawned) {
        spawned_since = true;
        if (spawns) {
          write_spawn_row(*spawns, trainer.state().spawns.back());
          spawns->flush();
        }
      }
      if (opts.on_iteration) opts.on_iteration(st);
      const std::size_t t = trainer.state().iteration;
      if (t % cfg.harness.eval_every == 0 || t == iterations) record();
    }
  } catch (const NonFiniteError& e) {
    if (!out_dir.empty()) save_checkpoint(out_dir + "/checkpoint", cfg, trainer.state(), std::string("halted: ") + e.what());
    throw;
  }
  if (!out_dir.empty()) save_checkpoint(out_dir + "/checkpoint", cfg, trainer.state());
  out.spawns = trainer.state().spawns;
  out.state = trainer.state();
  return out;
}

/// Replays the evaluation on a saved state, as recorded at its iteration.
inline std::vector<MetricsRecord> evaluate_checkpoint(const Checkpoint& ck, std::optional<std::uint64_t> bank_seed = {},
                                                      std::size_t threads = 1) {
  const RunConfig& cfg = ck.config;
  ThreadPool pool(threads);
  MixtureConfig mix = cfg.effective_mixture();
  Learner learner(mix, pool);
  EpisodeBank bank = build_bank(cfg.schedule.families(), cfg.harness.bank_episodes, mix.support, mix.query,
                                bank_seed.value_or(cfg.bank_seed()), mix.blob_classes);
  bool spawned = false;
  if (const std::size_t t = ck.state.iteration; t > 0) {
    const std::size_t every = cfg.harness.eval_every;
    const std::size_t prev = ((t - 1) / every) * every;
    for (const SpawnEvent& e : ck.state.spawns)
      if (e.iteration + 1 > prev && e.iteration + 1 <= t) spawned = true;
  }
  return evaluate_all(learner.runner(), ck.state, bank, EStepRule::for_run(cfg), spawned);
}

}  // namespace metamix
