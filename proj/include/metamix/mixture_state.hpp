#pragma once

// State shared by the finite and the CRP mixtures.

#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metamix/error.hpp"
#include "metamix/nnmodel.hpp"

namespace metamix {

enum class MetaOptimizer { Sgd, Adam };

/// Adam moments; unused for SGD.
struct OptimizerState {
  std::vector<double> m, v;
  std::size_t steps = 0;
};

/// theta <- theta - beta * direction (SGD) or the Adam update of it.
inline void apply_meta_update(ParamVector& theta, std::span<const double> direction, OptimizerState& state,
                              MetaOptimizer kind, double beta) {
  if (kind == MetaOptimizer::Sgd) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = theta[i] - beta * direction[i];
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (state.m.empty()) {
    state.m.assign(theta.size(), 0.0);
    state.v.assign(theta.size(), 0.0);
  }
  ++state.steps;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * direction[i];
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * direction[i] * direction[i];
    theta[i] -= beta * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + eps);
  }
}

struct Cluster {
  std::size_t slot = 0;  // column in metrics output; id = slot + 1
  ParamVector theta;
  std::size_t spawn_iteration = 0;
  OptimizerState optimizer;

  std::size_t id() const { return slot + 1; }
};

/// Row-stochastic task-by-cluster assignment probabilities.
struct Responsibilities {
  std::size_t tasks = 0;
  std::size_t clusters = 0;
  std::vector<double> values;  // row-major tasks x clusters

  Responsibilities() = default;
  Responsibilities(std::size_t j, std::size_t l, double fill = 0.0) : tasks(j), clusters(l), values(j * l, fill) {}

  double& operator()(std::size_t j, std::size_t l) { return values[j * clusters + l]; }
  double operator()(std::size_t j, std::size_t l) const { return values[j * clusters + l]; }

  std::span<const double> row(std::size_t j) const { return std::span<const double>(values).subspan(j * clusters, clusters); }

  double column_sum(std::size_t l) const {
    double s = 0.0;
    for (std::size_t j = 0; j < tasks; ++j) s += (*this)(j, l);
    return s;
  }
};

/// Base measure for new clusters: a Gaussian around `mean`.
struct GlobalPrior {
  ParamVector mean;
  double noise_stddev = 0.01;
  std::size_t cadence = 500;  // iterations between prior refreshes; 0 never
  bool ready = false;
};

/// Per-slot responsibility mass of the last `window` iterations.
class WindowCounts {
 public:
  WindowCounts() = default;
  WindowCounts(std::size_t window, std::size_t slots) : window_(window), slots_(slots) {
    if (window < 1) throw ConfigError("window", "must be >= 1");
  }

  std::size_t window() const { return window_; }
  std::size_t slots() const { return slots_; }
  std::size_t depth() const { return history_.size(); }
  const std::deque<std::vector<double>>& history() const { return history_; }

  void push(std::vector<double> masses) {
    if (masses.size() != slots_) throw ShapeError("window mass vector has wrong length");
    for (double m : masses)
      if (!(m >= 0.0)) throw Error("negative responsibility mass");
    history_.push_back(std::move(masses));
    while (history_.size() > window_) history_.pop_front();
  }

  double count(std::size_t slot) const {
    double s = 0.0;
    for (const auto& h : history_) s += h[slot];
    return s;
  }

  std::vector<double> counts() const {
    std::vector<double> out(slots_, 0.0);
    for (std::size_t s = 0; s < slots_; ++s) out[s] = count(s);
    return out;
  }

  void clear_slot(std::size_t slot) {
    for (auto& h : history_) h[slot] = 0.0;
  }

  void restore(std::deque<std::vector<double>> history) {
    for (const auto& h : history)
      if (h.size() != slots_) throw ShapeError("window history has wrong width");
    history_ = std::move(history);
    while (history_.size() > window_) history_.pop_front();
  }

 private:
  std::size_t window_ = 5;
  std::size_t slots_ = 0;
  std::deque<std::vector<double>> history_;
};

struct SpawnEvent {
  std::size_t iteration = 0;
  std::size_t new_cluster_id = 0;
  double candidate_mass = 0.0;
  double epsilon = 0.0;
  std::size_t active_clusters = 0;  // after the spawn
};

struct MixtureState {
  std::vector<Cluster> clusters;  // active clusters, ascending slot order
  std::size_t capacity = 16;
  std::size_t iteration = 0;  // completed meta-iterations

  GlobalPrior prior;
  WindowCounts counts;
  std::deque<std::vector<double>> assignment_history;  // for pruning
  std::optional<std::size_t> last_spawn;
  std::vector<SpawnEvent> spawns;

  std::size_t active() const { return clusters.size(); }

  std::optional<std::size_t> free_slot() const {
    std::vector<char> used(capacity, 0);
    for (const Cluster& c : clusters) used[c.slot] = 1;
    for (std::size_t s = 0; s < capacity; ++s)
      if (!used[s]) return s;
    return std::nullopt;
  }

  /// Windowed counts aligned with `clusters`.
  std::vector<double> cluster_counts() const {
    std::vector<double> out;
    for (const Cluster& c : clusters) out.push_back(counts.slots() ? counts.count(c.slot) : 0.0);
    return out;
  }
};

}  // namespace metamix
