#pragma once

// Everything that determines the outcome of one experiment run.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "metamix/error.hpp"
#include "metamix/finite_mixture.hpp"
#include "metamix/np_mixture.hpp"
#include "metamix/taskgen.hpp"

namespace metamix {

enum class Method { Np, FiniteNonuniform, FiniteUniform, Single };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::Np: return "np";
    case Method::FiniteNonuniform: return "finite-nonuniform";
    case Method::FiniteUniform: return "finite-uniform";
    case Method::Single: return "single";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "np") return Method::Np;
  if (s == "finite-nonuniform" || s == "finite") return Method::FiniteNonuniform;
  if (s == "finite-uniform" || s == "uniform") return Method::FiniteUniform;
  if (s == "single") return Method::Single;
  throw ConfigError("method", "unknown method '" + std::string(s) + "'");
}

struct HarnessConfig {
  std::size_t eval_every = 50;
  std::size_t bank_episodes = 100;
  std::optional<std::uint64_t> bank_seed;  // defaults to the master seed
};

struct RunConfig {
  Method method = Method::Np;
  std::uint64_t seed = 0;
  PhaseSchedule schedule = PhaseSchedule::parse("polynomial:800,sinusoid:600,sawtooth:600");
  std::optional<std::size_t> iterations;  // defaults to the schedule length
  MixtureConfig mixture;
  CrpConfig crp;
  HarnessConfig harness;

  std::size_t total_iterations() const { return iterations.value_or(schedule.total()); }
  std::uint64_t bank_seed() const { return harness.bank_seed.value_or(seed); }

  /// Mixture settings as the chosen method runs them.
  MixtureConfig effective_mixture() const {
    MixtureConfig m = mixture;
    if (method == Method::Single) m.components = 1;
    m.assignment = method == Method::FiniteUniform ? Assignment::Uniform : Assignment::Nonuniform;
    return m;
  }

  void validate() const {
    try {
      schedule.validate();
    } catch (const Error& e) {
      throw ConfigError("schedule", e.what());
    }
    if (total_iterations() > schedule.total()) throw ConfigError("iterations", "exceeds schedule length");
    mixture.validate();
    crp.validate();
    if (method != Method::Np && effective_mixture().components > crp.capacity)
      throw ConfigError("components", "exceeds cluster capacity");
    if (harness.eval_every < 1) throw ConfigError("eval_every", "must be >= 1");
    if (harness.bank_episodes < 1) throw ConfigError("bank_episodes", "must be >= 1");

    bool blobs = false, regression = false;
    for (Family f : schedule.families()) (is_regression(f) ? regression : blobs) = true;
    if (blobs && regression) throw ConfigError("schedule", "cannot mix regression and classification families");
    const MlpSpec& net = mixture.model;
    if (regression) {
      if (mixture.loss != LossKind::MeanSquaredError) throw ConfigError("loss", "regression families need mse");
      if (net.input_dim != 1 || net.output_dim != 1)
        throw ConfigError("model", "regression families need input_dim = output_dim = 1");
    } else {
      if (mixture.loss != LossKind::CrossEntropy) throw ConfigError("loss", "blobs need cross_entropy");
      if (mixture.blob_classes < 2) throw ConfigError("blob_classes", "must be >= 2");
      if (net.input_dim != 2 || net.output_dim != mixture.blob_classes)
        throw ConfigError("model", "blobs need input_dim 2 and output_dim = blob_classes");
    }
  }
};

}  // namespace metamix
