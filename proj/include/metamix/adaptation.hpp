#pragma once

// Inner-loop adaptation from an initialization and the exact meta-gradient
// of the adapted query loss with respect to that initialization.

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metamix/autodiff.hpp"
#include "metamix/error.hpp"
#include "metamix/nnmodel.hpp"
#include "metamix/parallel.hpp"
#include "metamix/taskgen.hpp"

namespace metamix {

struct AdaptConfig {
  int steps = 5;        // K
  double alpha = 1e-3;  // inner learning rate
  bool first_order = false;

  void validate() const {
    if (steps < 0) throw ConfigError("steps", "must be >= 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha", "must be finite and >= 0");
  }
};

/// Outcome of adapting one initialization to one episode.
struct TaskResult {
  std::vector<double> step_losses;  // support loss before each inner step
  double support_loss = 0.0;        // support loss at the adapted parameters
  double query_loss = 0.0;
  std::size_t support_points = 0;
  ParamVector adapted;  // filled in Mode::Adapt
  ParamVector meta_grad;  // filled in Mode::Train

  /// Sum-form log-likelihood of the support set under the adapted model.
  double support_loglik() const { return log_likelihood_from_mean_loss(support_loss, support_points); }
};

/// The K-step adaptation graph for a fixed network, loss and episode size,
/// compiled into three programs of increasing cost. Immutable once built.
class TaskProgram {
 public:
  enum class Mode { Score, Adapt, Train };

  TaskProgram(MlpSpec spec, AdaptConfig cfg, LossKind loss, std::size_t support, std::size_t query)
      : spec_(std::move(spec)), cfg_(cfg), loss_(loss), support_(support), query_(query) {
    spec_.validate();
    cfg_.validate();
    if (support < 1 || query < 1) throw Error("episode sizes must be >= 1");
    graph_ = std::make_unique<ad::Graph>();
    ad::Graph& g = *graph_;
    MlpParams theta = declare_params(g, spec_, "theta.");
    ad::Expr xs = g.input("support.x", ad::Shape::matrix(support, spec_.input_dim));
    ad::Expr ys = g.input("support.y", ad::Shape::matrix(support, spec_.output_dim));
    ad::Expr xq = g.input("query.x", ad::Shape::matrix(query, spec_.input_dim));
    ad::Expr yq = g.input("query.y", ad::Shape::matrix(query, spec_.output_dim));

    MlpParams phi = theta;
    std::vector<ad::Expr> losses;
    for (int k = 0; k < cfg_.steps; ++k) {
      ad::Expr lk = loss_expr(loss_, mlp_forward(spec_, phi, xs), ys);
      losses.push_back(lk);
      std::vector<ad::Expr> grads = ad::gradient(lk, phi.tensors);
      MlpParams next;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        ad::Expr gi = cfg_.first_order ? ad::detach(grads[i]) : grads[i];
        next.tensors.push_back(ad::sub(phi.tensors[i], ad::scale(gi, cfg_.alpha)));
      }
      phi = std::move(next);
    }
    ad::Expr support_final = loss_expr(loss_, mlp_forward(spec_, phi, xs), ys);
    ad::Expr query_loss = loss_expr(loss_, mlp_forward(spec_, phi, xq), yq);
    std::vector<ad::Expr> meta = ad::gradient(query_loss, theta.tensors);

    std::vector<ad::Expr> score = losses;
    score.push_back(support_final);
    score.push_back(query_loss);
    n_scores_ = score.size();

    std::vector<ad::Expr> adapt = score;
    adapt.insert(adapt.end(), phi.tensors.begin(), phi.tensors.end());
    std::vector<ad::Expr> train = score;
    train.insert(train.end(), meta.begin(), meta.end());

    score_ = std::make_unique<ad::Program>(g, std::move(score));
    adapt_ = std::make_unique<ad::Program>(g, std::move(adapt));
    train_ = std::make_unique<ad::Program>(g, std::move(train));
  }

  const MlpSpec& spec() const { return spec_; }
  const AdaptConfig& config() const { return cfg_; }
  LossKind loss() const { return loss_; }
  std::size_t support_size() const { return support_; }
  std::size_t query_size() const { return query_; }
  std::size_t graph_size() const { return graph_->size(); }

  /// Per-thread evaluation buffers.
  class Context {
   public:
    explicit Context(const TaskProgram& p) : program_(&p) {}

    TaskResult run(const ParamVector& theta, const Episode& episode, Mode mode) {
      const TaskProgram& p = *program_;
      ad::Workspace& ws = workspace(mode);
      bind_params(ws, p.spec_, "theta.", theta);
      ws.bind("support.x", episode.support.x);
      ws.bind("support.y", episode.support.y);
      ws.bind("query.x", episode.query.x);
      ws.bind("query.y", episode.query.y);
      ws.run();

      TaskResult r;
      r.support_points = episode.support.size();
      const std::size_t k = static_cast<std::size_t>(p.cfg_.steps);
      for (std::size_t i = 0; i < k; ++i) {
        double v = ws.output(i).item();
        if (!std::isfinite(v)) throw NonFiniteError("adaptation step " + std::to_string(i));
        r.step_losses.push_back(v);
      }
      r.support_loss = ws.output(k).item();
      r.query_loss = ws.output(k + 1).item();
      if (!std::isfinite(r.support_loss)) throw NonFiniteError("adaptation step " + std::to_string(k));
      if (!std::isfinite(r.query_loss)) throw NonFiniteError("query loss");
      const std::size_t layers = 2 * p.spec_.layer_count();
      if (mode != Mode::Score) {
        ParamVector flat;
        flat.values.reserve(p.spec_.param_count());
        for (std::size_t i = 0; i < layers; ++i) {
          const auto& t = ws.output(p.n_scores_ + i).data;
          flat.values.insert(flat.values.end(), t.begin(), t.end());
        }
        if (mode == Mode::Adapt) {
          r.adapted = std::move(flat);
        } else {
          if (!flat.all_finite()) throw NonFiniteError("meta-gradient");
          r.meta_grad = std::move(flat);
        }
      }
      return r;
    }

   private:
    ad::Workspace& workspace(Mode mode) {
      const TaskProgram& p = *program_;
      switch (mode) {
        case Mode::Score:
          if (!score_) score_.emplace(*p.score_);
          return *score_;
        case Mode::Adapt:
          if (!adapt_) adapt_.emplace(*p.adapt_);
          return *adapt_;
        case Mode::Train:
          break;
      }
      if (!train_) train_.emplace(*p.train_);
      return *train_;
    }

    const TaskProgram* program_;
    std::optional<ad::Workspace> score_, adapt_, train_;
  };

 private:
  MlpSpec spec_;
  AdaptConfig cfg_;
  LossKind loss_;
  std::size_t support_, query_;
  std::size_t n_scores_ = 0;
  std::unique_ptr<ad::Graph> graph_;
  std::unique_ptr<ad::Program> score_, adapt_, train_;
};

/// Runs batches of (initialization, episode) jobs across a thread pool.
/// Results come back in job order regardless of scheduling.
class TaskRunner {
 public:
  struct Job {
    const ParamVector* theta = nullptr;
    const Episode* episode = nullptr;
    TaskProgram::Mode mode = TaskProgram::Mode::Score;
  };

  TaskRunner(const TaskProgram& program, ThreadPool& pool) : program_(&program), pool_(&pool) {
    for (std::size_t w = 0; w < pool.size(); ++w) contexts_.emplace_back(program);
  }

  const TaskProgram& program() const { return *program_; }

  std::vector<TaskResult> run(std::span<const Job> jobs) {
    std::vector<TaskResult> out(jobs.size());
    pool_->parallel_for(jobs.size(), [&](std::size_t i, std::size_t worker) {
      out[i] = contexts_[worker].run(*jobs[i].theta, *jobs[i].episode, jobs[i].mode);
    });
    return out;
  }

  TaskResult run_one(const ParamVector& theta, const Episode& episode, TaskProgram::Mode mode) {
    return contexts_[0].run(theta, episode, mode);
  }

 private:
  const TaskProgram* program_;
  ThreadPool* pool_;
  std::vector<TaskProgram::Context> contexts_;
};

// -- one-shot convenience API --------------------------------------------------

/// K full-batch gradient steps on the support loss starting from theta.
inline ParamVector adapt(const MlpSpec& spec, const ParamVector& theta, const Dataset& support, const AdaptConfig& cfg,
                         LossKind loss) {
  if (support.size() == 0) throw Error("adapt needs a non-empty support set");
  TaskProgram program(spec, cfg, loss, support.size(), support.size());
  TaskProgram::Context ctx(program);
  Episode e;
  e.support = support;
  e.query = support;
  return ctx.run(theta, e, TaskProgram::Mode::Adapt).adapted;
}

/// Query loss of the adapted parameters.
inline double query_loss(const MlpSpec& spec, const ParamVector& theta, const Episode& episode, const AdaptConfig& cfg,
                         LossKind loss) {
  TaskProgram program(spec, cfg, loss, episode.support.size(), episode.query.size());
  TaskProgram::Context ctx(program);
  return ctx.run(theta, episode, TaskProgram::Mode::Score).query_loss;
}

/// d query_loss / d theta through all inner steps (first-order if configured).
inline ParamVector meta_gradient(const MlpSpec& spec, const ParamVector& theta, const Episode& episode,
                                 const AdaptConfig& cfg, LossKind loss) {
  TaskProgram program(spec, cfg, loss, episode.support.size(), episode.query.size());
  TaskProgram::Context ctx(program);
  return ctx.run(theta, episode, TaskProgram::Mode::Train).meta_grad;
}

/// Plain MAML meta-step: theta - beta * sum_j grad_j, summed in task order.
inline ParamVector maml_step(const ParamVector& theta, std::span<const ParamVector> task_grads, double beta) {
  ParamVector out = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double total = 0.0;
    for (const ParamVector& g : task_grads) total += g[i];
    out[i] = theta[i] - beta * total;
  }
  return out;
}

}  // namespace metamix
