#pragma once

// Finite mixture of meta-learned initializations trained by stochastic
// gradient-based EM: adapt every initialization to every task, assign tasks
// by a tempered softmax over support log-likelihoods, then take a
// responsibility-weighted meta-gradient step per cluster.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metamix/adaptation.hpp"
#include "metamix/error.hpp"
#include "metamix/mixture_state.hpp"
#include "metamix/nnmodel.hpp"
#include "metamix/parallel.hpp"
#include "metamix/rng.hpp"
#include "metamix/taskgen.hpp"

namespace metamix {

enum class Assignment { Nonuniform, Uniform };

struct MixtureConfig {
  MlpSpec model;
  double init_stddev = 0.1;
  LossKind loss = LossKind::MeanSquaredError;
  std::size_t blob_classes = 5;

  AdaptConfig adapt;
  std::size_t components = 3;  // L (finite mode)
  double tau = 1.0;
  double beta = 1e-3;
  std::size_t meta_batch = 10;  // J
  std::size_t support = 5;      // N
  std::size_t query = 5;        // M
  Assignment assignment = Assignment::Nonuniform;
  MetaOptimizer optimizer = MetaOptimizer::Sgd;

  void validate() const {
    model.validate();
    adapt.validate();
    if (components < 1) throw ConfigError("components", "must be >= 1");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau", "must be > 0");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta", "must be > 0");
    if (meta_batch < 1) throw ConfigError("meta_batch", "must be >= 1");
    if (support < 1) throw ConfigError("support", "must be >= 1");
    if (query < 1) throw ConfigError("query", "must be >= 1");
    if (!(init_stddev > 0.0)) throw ConfigError("init_stddev", "must be > 0");
  }
};

// -- E-STEP / M-STEP -------------------------------------------------------------

/// softmax_tau over each row of a tasks x clusters table of log-likelihoods,
/// shifted by the row maximum.
inline Responsibilities e_step(std::span<const double> loglik, std::size_t tasks, std::size_t clusters, double tau) {
  if (loglik.size() != tasks * clusters) throw ShapeError("log-likelihood table has wrong size");
  if (clusters < 1) throw Error("e_step needs at least one cluster");
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  Responsibilities gamma(tasks, clusters);
  for (std::size_t j = 0; j < tasks; ++j) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < clusters; ++l) {
      double v = loglik[j * clusters + l];
      if (!std::isfinite(v))
        throw NonFiniteError("e-step log-likelihood (task " + std::to_string(j) + ", cluster " + std::to_string(l) + ")");
      hi = std::max(hi, v);
    }
    double total = 0.0;
    for (std::size_t l = 0; l < clusters; ++l) {
      gamma(j, l) = std::exp((loglik[j * clusters + l] - hi) / tau);
      total += gamma(j, l);
    }
    for (std::size_t l = 0; l < clusters; ++l) gamma(j, l) /= total;
  }
  return gamma;
}

inline Responsibilities uniform_assignments(std::size_t tasks, std::size_t clusters) {
  if (clusters < 1) throw Error("uniform_assignments needs at least one cluster");
  return Responsibilities(tasks, clusters, 1.0 / static_cast<double>(clusters));
}

/// Per-cluster update with gamma held fixed:
///   theta_l <- theta_l - beta * sum_j gamma_jl * grad_jl
/// grads is cluster-major (index l * tasks + j). Clusters with `frozen[l]`
/// set, or with zero total responsibility, are left untouched.
inline void m_step(std::vector<Cluster>& clusters, std::span<const ParamVector> grads, const Responsibilities& gamma,
                   double beta, MetaOptimizer optimizer = MetaOptimizer::Sgd, std::span<const char> frozen = {}) {
  const std::size_t tasks = gamma.tasks;
  if (gamma.clusters != clusters.size()) throw ShapeError("responsibilities do not match cluster count");
  if (grads.size() != clusters.size() * tasks) throw ShapeError("meta-gradient table has wrong size");
  for (std::size_t l = 0; l < clusters.size(); ++l) {
    if (!frozen.empty() && frozen[l]) continue;
    if (gamma.column_sum(l) == 0.0) continue;
    const std::size_t n = clusters[l].theta.size();
    std::vector<double> direction(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < tasks; ++j) total += gamma(j, l) * grads[l * tasks + j][i];
      direction[i] = total;
    }
    for (std::size_t j = 0; j < tasks; ++j)
      if (!grads[l * tasks + j].all_finite())
        throw NonFiniteError("meta-gradient (cluster " + std::to_string(clusters[l].id()) + ", task " +
                             std::to_string(j) + ")");
    apply_meta_update(clusters[l].theta, direction, clusters[l].optimizer, optimizer, beta);
    if (!clusters[l].theta.all_finite())
      throw NonFiniteError("parameters of cluster " + std::to_string(clusters[l].id()));
  }
}

// -- training --------------------------------------------------------------------

/// Compiled adaptation graph plus per-thread buffers for one configuration.
class Learner {
 public:
  Learner(const MixtureConfig& cfg, ThreadPool& pool)
      : program_(std::make_unique<TaskProgram>(cfg.model, cfg.adapt, cfg.loss, cfg.support, cfg.query)),
        runner_(std::make_unique<TaskRunner>(*program_, pool)) {}

  TaskRunner& runner() { return *runner_; }
  const TaskProgram& program() const { return *program_; }

 private:
  std::unique_ptr<TaskProgram> program_;
  std::unique_ptr<TaskRunner> runner_;
};

/// Training-time summary of one meta-iteration.
struct IterationStats {
  std::size_t iteration = 0;
  double support_loss = 0.0;  // responsibility-weighted, averaged over tasks
  double query_loss = 0.0;
  std::size_t active_clusters = 0;
  bool spawned = false;
  double candidate_mass = std::numeric_limits<double>::quiet_NaN();  // NaN when no candidate competed
};

inline std::vector<Episode> draw_meta_batch(const MixtureConfig& cfg, const PhaseSchedule& schedule,
                                            std::uint64_t seed, std::size_t iteration) {
  Rng rng = make_rng(seed, Stream::Tasks, iteration);
  return sample_meta_batch(schedule.phase_at(iteration), cfg.meta_batch, cfg.support, cfg.query, rng, cfg.blob_classes);
}

/// L clusters with independent initializations.
inline MixtureState init_finite_state(const MixtureConfig& cfg, std::uint64_t seed, std::size_t capacity = 16) {
  cfg.validate();
  if (cfg.components > capacity) throw ConfigError("components", "exceeds cluster capacity");
  MixtureState s;
  s.capacity = capacity;
  for (std::size_t l = 0; l < cfg.components; ++l) {
    Cluster c;
    c.slot = l;
    c.theta = init_params(cfg.model, derive_seed(seed, Stream::ClusterInit, l), cfg.init_stddev);
    s.clusters.push_back(std::move(c));
  }
  s.counts = WindowCounts(1, capacity);
  return s;
}

/// Runs every (cluster, task) pair in train mode. Result index is l * J + j.
inline std::vector<TaskResult> adapt_all(Learner& learner, const std::vector<Cluster>& clusters,
                                         const std::vector<Episode>& episodes) {
  std::vector<TaskRunner::Job> jobs;
  jobs.reserve(clusters.size() * episodes.size());
  for (const Cluster& c : clusters)
    for (const Episode& e : episodes) jobs.push_back({&c.theta, &e, TaskProgram::Mode::Train});
  return learner.runner().run(jobs);
}

inline IterationStats summarize(const std::vector<TaskResult>& results, const Responsibilities& gamma,
                                std::size_t iteration, std::size_t active, bool spawned) {
  IterationStats st;
  st.iteration = iteration;
  st.active_clusters = active;
  st.spawned = spawned;
  const std::size_t tasks = gamma.tasks;
  for (std::size_t l = 0; l < gamma.clusters; ++l)
    for (std::size_t j = 0; j < tasks; ++j) {
      st.support_loss += gamma(j, l) * results[l * tasks + j].support_loss;
      st.query_loss += gamma(j, l) * results[l * tasks + j].query_loss;
    }
  st.support_loss /= static_cast<double>(tasks);
  st.query_loss /= static_cast<double>(tasks);
  return st;
}

/// One iteration of the finite algorithm on the batch drawn for `state.iteration`.
inline IterationStats finite_step(Learner& learner, const MixtureConfig& cfg, MixtureState& state,
                                  const PhaseSchedule& schedule, std::uint64_t seed) {
  const std::size_t t = state.iteration;
  std::vector<Episode> episodes = draw_meta_batch(cfg, schedule, seed, t);
  std::vector<TaskResult> results = adapt_all(learner, state.clusters, episodes);

  const std::size_t tasks = episodes.size(), clusters = state.clusters.size();
  Responsibilities gamma;
  if (cfg.assignment == Assignment::Uniform) {
    gamma = uniform_assignments(tasks, clusters);
  } else {
    std::vector<double> ll(tasks * clusters);
    for (std::size_t l = 0; l < clusters; ++l)
      for (std::size_t j = 0; j < tasks; ++j) ll[j * clusters + l] = results[l * tasks + j].support_loglik();
    gamma = e_step(ll, tasks, clusters, cfg.tau);
  }

  std::vector<ParamVector> grads;
  grads.reserve(results.size());
  for (TaskResult& r : results) grads.push_back(std::move(r.meta_grad));
  IterationStats st = summarize(results, gamma, t, clusters, false);
  m_step(state.clusters, grads, gamma, cfg.beta, cfg.optimizer);
  ++state.iteration;
  return st;
}

using IterationObserver = std::function<void(const MixtureState&, const IterationStats&)>;

struct TrainResult {
  MixtureState state;
  std::vector<IterationStats> stats;
};

/// Runs `iterations` meta-iterations from a fresh state.
inline TrainResult train_finite(const MixtureConfig& cfg, const PhaseSchedule& schedule, std::size_t iterations,
                                std::uint64_t seed, ThreadPool& pool, const IterationObserver& observer = {}) {
  schedule.validate();
  if (iterations > schedule.total()) throw ConfigError("iterations", "exceeds schedule length");
  TrainResult out{init_finite_state(cfg, seed), {}};
  Learner learner(cfg, pool);
  while (out.state.iteration < iterations) {
    IterationStats st = finite_step(learner, cfg, out.state, schedule, seed);
    if (observer) observer(out.state, st);
    out.stats.push_back(st);
  }
  return out;
}

}  // namespace metamix
