#pragma once

// Nonparametric (CRP) mixture: each iteration a candidate initialization is
// drawn around the global prior and competes with the existing clusters in
// the E-step. It becomes a permanent cluster when its batch responsibility
// mass exceeds a threshold.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metamix/error.hpp"
#include "metamix/finite_mixture.hpp"
#include "metamix/mixture_state.hpp"
#include "metamix/rng.hpp"
#include "metamix/taskgen.hpp"

namespace metamix {

enum class CooldownMode { TaskAgnostic, TaskAware };
enum class PriorWeighting { Size, Uniform };

struct CrpConfig {
  double zeta = 10.0;  // concentration
  double threshold_factor = 0.95;
  std::size_t window = 5;
  double penalty = 0.01;  // lambda on the log-count terms
  double count_floor = 1.0;
  std::size_t cooldown = 1000;
  CooldownMode cooldown_mode = CooldownMode::TaskAgnostic;
  bool freeze_during_cooldown = true;
  std::size_t capacity = 16;
  std::size_t warmup = 0;
  std::size_t prior_cadence = 500;  // 0 keeps the seeded prior forever
  double spawn_stddev = 0.01;
  PriorWeighting prior_weighting = PriorWeighting::Size;
  double prune_share = 0.0;  // 0 disables pruning
  std::size_t prune_lookback = 100;

  void validate() const {
    if (!(zeta > 0.0) || !std::isfinite(zeta)) throw ConfigError("zeta", "must be > 0");
    if (!(threshold_factor > 0.0)) throw ConfigError("threshold_factor", "must be > 0");
    if (window < 1) throw ConfigError("window", "must be >= 1");
    if (!(penalty >= 0.0) || !std::isfinite(penalty)) throw ConfigError("penalty", "must be >= 0");
    if (!(count_floor > 0.0)) throw ConfigError("count_floor", "must be > 0");
    if (capacity < 1) throw ConfigError("capacity", "must be >= 1");
    if (!(spawn_stddev >= 0.0) || !std::isfinite(spawn_stddev)) throw ConfigError("spawn_stddev", "must be >= 0");
    if (!(prune_share >= 0.0 && prune_share < 1.0)) throw ConfigError("prune_share", "must be in [0, 1)");
    if (prune_lookback < 1) throw ConfigError("prune_lookback", "must be >= 1");
  }
};

/// (n_1, ..., n_L, zeta) / (sum n + zeta)
inline std::vector<double> crp_prior(std::span<const double> counts, double zeta) {
  if (!(zeta > 0.0)) throw Error("concentration must be positive");
  double total = zeta;
  for (double n : counts) {
    if (!(n >= 0.0)) throw Error("counts must be non-negative");
    total += n;
  }
  std::vector<double> p;
  p.reserve(counts.size() + 1);
  for (double n : counts) p.push_back(n / total);
  p.push_back(zeta / total);
  return p;
}

/// E[number of clusters] after n observations.
inline double expected_cluster_count(double zeta, double n) {
  if (!(n >= 1.0)) throw Error("observation count must be >= 1");
  if (!(zeta > 0.0)) throw Error("concentration must be positive");
  return zeta * std::log(n);
}

/// Concentration giving `clusters` expected clusters after n observations.
inline double concentration_for(double clusters, double n) {
  if (!(n > 1.0)) throw Error("observation count must be > 1");
  return clusters / std::log(n);
}

inline double spawn_threshold(const CrpConfig& cfg, std::size_t tasks, std::size_t clusters) {
  return cfg.threshold_factor * static_cast<double>(tasks) / static_cast<double>(clusters + 1);
}

// -- global prior ------------------------------------------------------------------

inline ParamVector spawn_candidate(const GlobalPrior& prior, Rng& rng) {
  if (!prior.ready) throw Error("global prior not initialized (warm-up incomplete)");
  ParamVector out = prior.mean;
  if (prior.noise_stddev > 0.0) {
    std::normal_distribution<double> noise(0.0, prior.noise_stddev);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise(rng);
  }
  return out;
}

/// Size-weighted (or uniform) average of the cluster initializations.
/// Falls back to uniform weights when every size is zero.
inline void update_global_prior(GlobalPrior& prior, const std::vector<Cluster>& clusters,
                                std::span<const double> sizes, PriorWeighting weighting = PriorWeighting::Size) {
  if (clusters.empty()) throw Error("global prior update needs at least one cluster");
  if (sizes.size() != clusters.size()) throw ShapeError("cluster sizes do not match clusters");
  std::vector<double> w(clusters.size(), 1.0);
  if (weighting == PriorWeighting::Size) {
    double total = 0.0;
    for (double s : sizes) total += s;
    if (total > 0.0)
      for (std::size_t l = 0; l < w.size(); ++l) w[l] = sizes[l];
  }
  double wsum = 0.0;
  for (double x : w) wsum += x;
  ParamVector mean;
  mean.values.assign(clusters.front().theta.size(), 0.0);
  for (std::size_t l = 0; l < clusters.size(); ++l)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += w[l] * clusters[l].theta[i];
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] /= wsum;
  prior.mean = std::move(mean);
  prior.ready = true;
}

/// Seeds the prior from the first cluster once `warmup` iterations are done.
/// Returns true when the prior was seeded by this call.
inline bool warmup_then_seed_prior(MixtureState& state, std::size_t warmup) {
  if (state.prior.ready || state.iteration < warmup) return false;
  if (state.clusters.empty()) throw Error("no cluster to seed the global prior from");
  state.prior.mean = state.clusters.front().theta;
  state.prior.ready = true;
  return true;
}

// -- E-step ------------------------------------------------------------------------

struct DpEStepResult {
  Responsibilities gamma;  // over L clusters, or L+1 after a spawn
  bool spawn = false;
  double candidate_mass = 0.0;
  double epsilon = 0.0;
};

/// CRP-penalized logits for the existing clusters; appends the candidate's
/// logit when `candidate_loglik` is given. loglik is tasks x L row-major.
inline std::vector<double> dp_logits(std::span<const double> loglik, std::size_t tasks, std::span<const double> counts,
                                     const CrpConfig& cfg, std::span<const double> candidate_loglik = {}) {
  const std::size_t L = counts.size();
  if (loglik.size() != tasks * L) throw ShapeError("log-likelihood table has wrong size");
  const bool with_candidate = !candidate_loglik.empty();
  if (with_candidate && candidate_loglik.size() != tasks) throw ShapeError("candidate log-likelihoods have wrong size");
  const std::size_t width = L + (with_candidate ? 1 : 0);
  std::vector<double> rho(tasks * width);
  for (std::size_t j = 0; j < tasks; ++j) {
    for (std::size_t l = 0; l < L; ++l)
      rho[j * width + l] = loglik[j * L + l] + cfg.penalty * std::log(std::max(counts[l], cfg.count_floor));
    if (with_candidate) rho[j * width + L] = candidate_loglik[j] + cfg.penalty * std::log(cfg.zeta);
  }
  for (double v : rho)
    if (!std::isfinite(v)) throw NonFiniteError("CRP logits");
  return rho;
}

/// Softmax over L existing clusters plus the candidate; spawns iff the
/// candidate's responsibility summed over the batch exceeds the threshold.
inline DpEStepResult dp_e_step(std::span<const double> loglik, std::span<const double> candidate_loglik,
                               std::size_t tasks, std::span<const double> counts, const CrpConfig& cfg, double tau,
                               std::size_t active_clusters = 0) {
  const std::size_t L = counts.size();
  if (active_clusters == 0) active_clusters = L;
  std::vector<double> rho = dp_logits(loglik, tasks, counts, cfg, candidate_loglik);
  Responsibilities full = e_step(rho, tasks, L + 1, tau);

  DpEStepResult out;
  out.candidate_mass = full.column_sum(L);
  out.epsilon = spawn_threshold(cfg, tasks, L);
  out.spawn = out.candidate_mass > out.epsilon;
  if (out.spawn) {
    if (active_clusters >= cfg.capacity)
      throw Error("cluster capacity exhausted (" + std::to_string(cfg.capacity) + " clusters)");
    out.gamma = std::move(full);
    return out;
  }
  if (L == 0) throw Error("no existing cluster to renormalize over");
  // renormalize over the existing clusters
  out.gamma = Responsibilities(tasks, L);
  for (std::size_t j = 0; j < tasks; ++j) {
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) total += full(j, l);
    if (total > 0.0) {
      for (std::size_t l = 0; l < L; ++l) out.gamma(j, l) = full(j, l) / total;
    } else {
      // candidate took all the mass in double precision; fall back to the
      // softmax over existing clusters alone
      std::vector<double> sub(rho.begin() + static_cast<std::ptrdiff_t>(j * (L + 1)),
                              rho.begin() + static_cast<std::ptrdiff_t>(j * (L + 1) + L));
      Responsibilities r = e_step(sub, 1, L, tau);
      for (std::size_t l = 0; l < L; ++l) out.gamma(j, l) = r(0, l);
    }
  }
  return out;
}

/// E-step over existing clusters only (no candidate), CRP penalties included.
inline Responsibilities dp_e_step_existing(std::span<const double> loglik, std::size_t tasks,
                                           std::span<const double> counts, const CrpConfig& cfg, double tau) {
  return e_step(dp_logits(loglik, tasks, counts, cfg), tasks, counts.size(), tau);
}

// -- counts, cool-down, pruning ----------------------------------------------------

/// Pushes this iteration's per-cluster mass. gamma columns follow `clusters`.
inline void update_window_counts(WindowCounts& counts, const std::vector<Cluster>& clusters,
                                 const Responsibilities& gamma) {
  if (gamma.clusters != clusters.size()) throw ShapeError("responsibilities do not match cluster count");
  std::vector<double> masses(counts.slots(), 0.0);
  for (std::size_t l = 0; l < clusters.size(); ++l) masses[clusters[l].slot] = gamma.column_sum(l);
  counts.push(std::move(masses));
}

/// Whether spawning is permitted at `iteration`.
inline bool cooldown_gate(const MixtureState& state, std::size_t iteration, const CrpConfig& cfg,
                          const PhaseSchedule* schedule = nullptr) {
  const bool aware = cfg.cooldown_mode == CooldownMode::TaskAware;
  if (aware && schedule == nullptr) throw Error("task-aware cool-down needs phase boundaries");
  if (!state.last_spawn) return true;
  const std::size_t s = *state.last_spawn;
  if (!aware || schedule == nullptr) return iteration > s + cfg.cooldown;
  if (s >= schedule->total()) return true;
  return iteration >= schedule->bounds(schedule->phase_index(s)).second;
}

/// Per active cluster: true when it must not be updated this iteration.
inline std::vector<char> frozen_mask(const MixtureState& state, bool gate_open, const CrpConfig& cfg) {
  std::vector<char> frozen(state.clusters.size(), 0);
  if (gate_open || !cfg.freeze_during_cooldown || !state.last_spawn) return frozen;
  std::size_t newest = 0;
  for (std::size_t l = 1; l < state.clusters.size(); ++l)
    if (state.clusters[l].spawn_iteration >= state.clusters[newest].spawn_iteration) newest = l;
  for (std::size_t l = 0; l < state.clusters.size(); ++l) frozen[l] = l != newest;
  return frozen;
}

/// Same weighted update as the finite mixture; the log-count term of the
/// objective does not depend on theta.
inline void dp_m_step(std::vector<Cluster>& clusters, std::span<const ParamVector> grads, const Responsibilities& gamma,
                      double beta, MetaOptimizer optimizer = MetaOptimizer::Sgd, std::span<const char> frozen = {}) {
  m_step(clusters, grads, gamma, beta, optimizer, frozen);
}

/// Drops clusters whose share of the assignment mass over the last
/// `lookback` iterations is below `min_share`. Clusters younger than the
/// lookback are kept, as is the last remaining cluster. Returns removed ids.
inline std::vector<std::size_t> prune_clusters(MixtureState& state, double min_share, std::size_t lookback) {
  std::vector<std::size_t> removed;
  if (min_share <= 0.0 || state.clusters.size() <= 1) return removed;
  const auto& hist = state.assignment_history;
  if (hist.size() < lookback) return removed;
  std::vector<double> mass(state.capacity, 0.0);
  double total = 0.0;
  for (std::size_t k = hist.size() - lookback; k < hist.size(); ++k)
    for (std::size_t s = 0; s < hist[k].size(); ++s) {
      mass[s] += hist[k][s];
      total += hist[k][s];
    }
  if (total <= 0.0) return removed;
  std::vector<Cluster> kept;
  for (Cluster& c : state.clusters) {
    bool old_enough = c.spawn_iteration + lookback <= state.iteration;
    if (old_enough && mass[c.slot] / total < min_share) {
      removed.push_back(c.id());
    } else {
      kept.push_back(std::move(c));
    }
  }
  if (kept.empty()) {
    // keep the one with the most mass
    // (only reachable when every cluster falls under the threshold)
    std::size_t best = 0;
    for (std::size_t l = 1; l < state.clusters.size(); ++l)
      if (mass[state.clusters[l].slot] > mass[state.clusters[best].slot]) best = l;
    kept.push_back(std::move(state.clusters[best]));
    removed.erase(std::find(removed.begin(), removed.end(), kept.back().id()));
  }
  for (std::size_t id : removed) state.counts.clear_slot(id - 1);
  state.clusters = std::move(kept);
  return removed;
}

// -- training ----------------------------------------------------------------------

inline MixtureState init_np_state(const MixtureConfig& mix, const CrpConfig& crp, std::uint64_t seed) {
  mix.validate();
  crp.validate();
  MixtureState s;
  s.capacity = crp.capacity;
  Cluster c;
  c.slot = 0;
  c.theta = init_params(mix.model, derive_seed(seed, Stream::ClusterInit, 0), mix.init_stddev);
  s.clusters.push_back(std::move(c));
  s.counts = WindowCounts(crp.window, crp.capacity);
  s.prior.noise_stddev = crp.spawn_stddev;
  s.prior.cadence = crp.prior_cadence;
  return s;
}

/// One iteration of the nonparametric algorithm.
inline IterationStats np_step(Learner& learner, const MixtureConfig& mix, const CrpConfig& crp, MixtureState& state,
                              const PhaseSchedule& schedule, std::uint64_t seed) {
  const std::size_t t = state.iteration;
  warmup_then_seed_prior(state, crp.warmup);
  if (state.prior.ready && crp.prior_cadence > 0 && t > crp.warmup && (t - crp.warmup) % crp.prior_cadence == 0) {
    std::vector<double> sizes = state.cluster_counts();
    update_global_prior(state.prior, state.clusters, sizes, crp.prior_weighting);
  }

  std::vector<Episode> episodes = draw_meta_batch(mix, schedule, seed, t);
  const std::size_t J = episodes.size();
  const bool gate = state.prior.ready && cooldown_gate(state, t, crp, &schedule);
  const std::vector<char> frozen = frozen_mask(state, gate, crp);

  // existing clusters: frozen ones only need scores
  std::vector<TaskRunner::Job> jobs;
  for (std::size_t l = 0; l < state.clusters.size(); ++l)
    for (const Episode& e : episodes)
      jobs.push_back({&state.clusters[l].theta, &e, frozen[l] ? TaskProgram::Mode::Score : TaskProgram::Mode::Train});
  ParamVector candidate;
  if (gate) {
    Rng rng = make_rng(seed, Stream::Spawn, t);
    candidate = spawn_candidate(state.prior, rng);
    for (const Episode& e : episodes) jobs.push_back({&candidate, &e, TaskProgram::Mode::Score});
  }
  std::vector<TaskResult> results = learner.runner().run(jobs);

  const std::size_t L = state.clusters.size();
  std::vector<double> ll(J * L);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < J; ++j) ll[j * L + l] = results[l * J + j].support_loglik();
  std::vector<double> counts = state.cluster_counts();

  Responsibilities gamma;
  bool spawned = false;
  double candidate_mass = std::numeric_limits<double>::quiet_NaN();
  if (gate) {
    std::vector<double> cand_ll(J);
    for (std::size_t j = 0; j < J; ++j) cand_ll[j] = results[L * J + j].support_loglik();
    DpEStepResult r = dp_e_step(ll, cand_ll, J, counts, crp, mix.tau, L);
    gamma = std::move(r.gamma);
    candidate_mass = r.candidate_mass;
    if (r.spawn) {
      spawned = true;
      std::optional<std::size_t> slot = state.free_slot();
      if (!slot) throw Error("cluster capacity exhausted (" + std::to_string(crp.capacity) + " clusters)");
      Cluster c;
      c.slot = *slot;
      c.theta = std::move(candidate);
      c.spawn_iteration = t;
      state.clusters.push_back(std::move(c));
      state.last_spawn = t;
      state.spawns.push_back({t, state.clusters.back().id(), r.candidate_mass, r.epsilon, state.clusters.size()});
      // the new cluster needs real meta-gradients for its first update
      std::vector<TaskRunner::Job> extra;
      for (const Episode& e : episodes) extra.push_back({&state.clusters.back().theta, &e, TaskProgram::Mode::Train});
      std::vector<TaskResult> fresh = learner.runner().run(extra);
      results.resize(L * J);
      for (TaskResult& f : fresh) results.push_back(std::move(f));
    } else {
      results.resize(L * J);
    }
  } else {
    gamma = dp_e_step_existing(ll, J, counts, crp, mix.tau);
  }

  std::vector<char> freeze = frozen;
  freeze.resize(state.clusters.size(), 0);
  std::vector<ParamVector> grads;
  grads.reserve(results.size());
  for (TaskResult& r : results) grads.push_back(std::move(r.meta_grad));
  IterationStats st = summarize(results, gamma, t, state.clusters.size(), spawned);
  st.candidate_mass = candidate_mass;
  dp_m_step(state.clusters, grads, gamma, mix.beta, mix.optimizer, freeze);

  update_window_counts(state.counts, state.clusters, gamma);
  if (crp.prune_share > 0.0) {
    state.assignment_history.push_back(state.counts.history().back());
    while (state.assignment_history.size() > crp.prune_lookback) state.assignment_history.pop_front();
  }
  ++state.iteration;
  if (crp.prune_share > 0.0) prune_clusters(state, crp.prune_share, crp.prune_lookback);
  return st;
}

inline TrainResult train_np(const MixtureConfig& mix, const CrpConfig& crp, const PhaseSchedule& schedule,
                            std::size_t iterations, std::uint64_t seed, ThreadPool& pool,
                            const IterationObserver& observer = {}) {
  schedule.validate();
  if (iterations > schedule.total()) throw ConfigError("iterations", "exceeds schedule length");
  TrainResult out{init_np_state(mix, crp, seed), {}};
  Learner learner(mix, pool);
  while (out.state.iteration < iterations) {
    IterationStats st = np_step(learner, mix, crp, out.state, schedule, seed);
    if (observer) observer(out.state, st);
    out.stats.push_back(st);
  }
  return out;
}

}  // namespace metamix
