#pragma once

// Fully connected ReLU networks, their losses and parameter files.
//
// Parameter layout is layer-major: for each layer the weight matrix
// (fan_out x fan_in, row-major) followed by the bias (fan_out).

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "metamix/autodiff.hpp"
#include "metamix/error.hpp"

namespace metamix {

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden{40, 40};
  std::size_t output_dim = 1;

  std::size_t layer_count() const { return hidden.size() + 1; }
  std::size_t fan_in(std::size_t layer) const { return layer == 0 ? input_dim : hidden[layer - 1]; }
  std::size_t fan_out(std::size_t layer) const { return layer == hidden.size() ? output_dim : hidden[layer]; }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (std::size_t l = 0; l < layer_count(); ++l) total += (fan_in(l) + 1) * fan_out(l);
    return total;
  }

  void validate() const {
    if (input_dim < 1 || output_dim < 1) throw ShapeError("MLP input and output widths must be >= 1");
    for (std::size_t h : hidden)
      if (h < 1) throw ShapeError("MLP hidden widths must be >= 1");
  }

  bool operator==(const MlpSpec&) const = default;
};

/// Flat parameter vector, laid out per MlpSpec.
struct ParamVector {
  std::vector<double> values;

  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values(n, fill) {}
  explicit ParamVector(std::vector<double> v) : values(std::move(v)) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  std::span<const double> view() const { return values; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  bool operator==(const ParamVector&) const = default;
};

/// Weights ~ Normal(0, stddev^2), biases zero.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed, double stddev = 0.1) {
  spec.validate();
  if (!(stddev > 0.0)) throw Error("init stddev must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  ParamVector p(spec.param_count());
  std::size_t at = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t w = spec.fan_in(l) * spec.fan_out(l);
    for (std::size_t i = 0; i < w; ++i) p[at++] = normal(rng);
    at += spec.fan_out(l);
  }
  return p;
}

// -- graph construction ------------------------------------------------------

/// Parameter leaves of one network inside a graph: [W0, b0, W1, b1, ...].
struct MlpParams {
  std::vector<ad::Expr> tensors;

  ad::Expr weight(std::size_t layer) const { return tensors[2 * layer]; }
  ad::Expr bias(std::size_t layer) const { return tensors[2 * layer + 1]; }
};

inline std::vector<ad::Shape> param_shapes(const MlpSpec& spec) {
  std::vector<ad::Shape> shapes;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    shapes.push_back(ad::Shape::matrix(spec.fan_out(l), spec.fan_in(l)));
    shapes.push_back(ad::Shape::matrix(1, spec.fan_out(l)));
  }
  return shapes;
}

/// Leaf names are prefix + "W<l>" / "b<l>".
inline MlpParams declare_params(ad::Graph& g, const MlpSpec& spec, const std::string& prefix) {
  MlpParams p;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    p.tensors.push_back(g.parameter(prefix + "W" + std::to_string(l), ad::Shape::matrix(spec.fan_out(l), spec.fan_in(l))));
    p.tensors.push_back(g.parameter(prefix + "b" + std::to_string(l), ad::Shape::matrix(1, spec.fan_out(l))));
  }
  return p;
}

/// Binds a flat ParamVector onto the leaves created by declare_params.
inline void bind_params(ad::Workspace& ws, const MlpSpec& spec, const std::string& prefix, const ParamVector& theta) {
  if (theta.size() != spec.param_count())
    throw ShapeError("parameter vector has " + std::to_string(theta.size()) + " entries, spec needs " +
                     std::to_string(spec.param_count()));
  std::size_t at = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t w = spec.fan_in(l) * spec.fan_out(l);
    ws.bind(prefix + "W" + std::to_string(l), theta.view().subspan(at, w));
    at += w;
    ws.bind(prefix + "b" + std::to_string(l), theta.view().subspan(at, spec.fan_out(l)));
    at += spec.fan_out(l);
  }
}

/// Inverse of the layout: concatenates per-layer tensors into a ParamVector.
inline ParamVector flatten(std::span<const ad::Tensor> parts) {
  ParamVector out;
  for (const ad::Tensor& t : parts) out.values.insert(out.values.end(), t.data.begin(), t.data.end());
  return out;
}

/// Affine + ReLU for every hidden layer; the last layer is affine only.
/// x holds one point per row.
inline ad::Expr mlp_forward(const MlpSpec& spec, const MlpParams& params, ad::Expr x) {
  if (x.shape().rank != 2 || x.shape().cols != spec.input_dim)
    throw ShapeError("MLP input " + x.shape().str() + " does not match input dim " + std::to_string(spec.input_dim));
  if (params.tensors.size() != 2 * spec.layer_count()) throw ShapeError("MLP parameter list has wrong length");
  ad::Expr h = x;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    h = ad::add(ad::matmul(h, params.weight(l), false, true), params.bias(l));
    if (l + 1 < spec.layer_count()) h = ad::relu(h);
  }
  return h;
}

// -- losses --------------------------------------------------------------------

enum class LossKind { MeanSquaredError, CrossEntropy };

inline ad::Expr mse_loss(ad::Expr preds, ad::Expr targets) {
  if (preds.shape() != targets.shape()) throw ShapeError("mse_loss shape mismatch");
  if (preds.shape().size() == 0) throw Error("mse_loss of empty input");
  return ad::mean(ad::square(ad::sub(preds, targets)));
}

/// Mean over rows of -log softmax(logits)[label], with labels one-hot per row.
inline ad::Expr cross_entropy_loss(ad::Expr logits, ad::Expr one_hot) {
  if (logits.shape() != one_hot.shape()) throw ShapeError("cross_entropy_loss shape mismatch");
  if (logits.shape().rows == 0) throw Error("cross_entropy_loss of empty input");
  ad::Expr shift = ad::detach(ad::max(logits, ad::Axis::PerRow));
  ad::Expr lse = ad::add(ad::log(ad::sum(ad::exp(ad::sub(logits, shift)), ad::Axis::PerRow)), shift);
  ad::Expr picked = ad::sum(ad::mul(logits, one_hot), ad::Axis::PerRow);
  return ad::mean(ad::sub(lse, picked));
}

inline ad::Expr loss_expr(LossKind kind, ad::Expr preds, ad::Expr targets) {
  return kind == LossKind::MeanSquaredError ? mse_loss(preds, targets) : cross_entropy_loss(preds, targets);
}

/// Builds one-hot rows; throws on labels outside [0, classes).
inline ad::Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  ad::Tensor t(ad::Shape::matrix(labels.size(), classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes)
      throw Error("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) + " classes");
    t(i, labels[i]) = 1.0;
  }
  return t;
}

/// Inputs one point per row; targets are values (regression) or one-hot
/// rows (classification).
struct Dataset {
  ad::Tensor x;
  ad::Tensor y;

  std::size_t size() const { return x.shape.rows; }
};

/// Numeric forward pass for a single point.
inline std::vector<double> mlp_predict(const MlpSpec& spec, const ParamVector& theta, std::span<const double> x) {
  if (x.size() != spec.input_dim) throw ShapeError("input has wrong dimension");
  ad::Graph g;
  MlpParams p = declare_params(g, spec, "");
  ad::Expr in = g.input("x", ad::Shape::matrix(1, spec.input_dim));
  ad::Expr out = mlp_forward(spec, p, in);
  ad::Program prog(g, {out});
  ad::Workspace ws(prog);
  bind_params(ws, spec, "", theta);
  ws.bind("x", x);
  ws.run();
  return ws.output(0).data;
}

/// Mean loss of the network on a dataset.
inline double dataset_loss(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind) {
  if (data.size() == 0) throw Error("empty dataset");
  ad::Graph g;
  MlpParams p = declare_params(g, spec, "");
  ad::Expr x = g.input("x", data.x.shape);
  ad::Expr y = g.input("y", data.y.shape);
  ad::Expr loss = loss_expr(kind, mlp_forward(spec, p, x), y);
  ad::Program prog(g, {loss});
  ad::Workspace ws(prog);
  bind_params(ws, spec, "", theta);
  ws.bind("x", data.x);
  ws.bind("y", data.y);
  ws.run();
  return ws.output(0).item();
}

/// Log-likelihood surrogate: minus the summed per-point loss.
inline double log_likelihood_from_mean_loss(double mean_loss, std::size_t points) {
  return -static_cast<double>(points) * mean_loss;
}

inline double log_likelihood(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind) {
  return log_likelihood_from_mean_loss(dataset_loss(spec, theta, data, kind), data.size());
}

// -- serialization ---------------------------------------------------------------

inline constexpr int kParamLayoutVersion = 1;

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
    os.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

inline std::vector<double> read_f64_le(std::istream& is, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw Error("parameter file truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    out[k] = std::bit_cast<double>(bits);
  }
  return out;
}

inline nlohmann::json spec_to_json(const MlpSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"hidden", spec.hidden},
          {"output_dim", spec.output_dim},
          {"activation", "relu"},
          {"param_count", spec.param_count()},
          {"layout_version", kParamLayoutVersion}};
}

inline MlpSpec spec_from_json(const nlohmann::json& j) {
  if (j.at("layout_version").get<int>() != kParamLayoutVersion) throw Error("unsupported parameter layout version");
  MlpSpec spec;
  spec.input_dim = j.at("input_dim").get<std::size_t>();
  spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  spec.output_dim = j.at("output_dim").get<std::size_t>();
  spec.validate();
  if (j.at("param_count").get<std::size_t>() != spec.param_count()) throw Error("parameter count mismatch in header");
  return spec;
}

/// Writes `<base>.bin` (little-endian float64, vectors back to back) and a
/// `<base>.json` header describing the network and vector count. `extra`
/// is merged into the header.
inline void save_param_file(const std::string& base, const MlpSpec& spec, std::span<const ParamVector> vectors,
                            nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json header = std::move(extra);
  header["spec"] = spec_to_json(spec);
  header["vector_count"] = vectors.size();
  header["encoding"] = "float64-le";
  {
    std::ofstream bin(base + ".bin", std::ios::binary);
    if (!bin) throw Error("cannot write " + base + ".bin");
    for (const ParamVector& v : vectors) {
      if (v.size() != spec.param_count()) throw ShapeError("parameter vector length does not match spec");
      write_f64_le(bin, v.values);
    }
  }
  std::ofstream js(base + ".json");
  if (!js) throw Error("cannot write " + base + ".json");
  js << header.dump(2) << "\n";
}

struct ParamFile {
  MlpSpec spec;
  std::vector<ParamVector> vectors;
  nlohmann::json header;
};

inline ParamFile load_param_file(const std::string& base) {
  std::ifstream js(base + ".json");
  if (!js) throw Error("cannot read " + base + ".json");
  ParamFile f;
  f.header = nlohmann::json::parse(js);
  f.spec = spec_from_json(f.header.at("spec"));
  std::ifstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot read " + base + ".bin");
  const std::size_t count = f.header.at("vector_count").get<std::size_t>();
  for (std::size_t i = 0; i < count; ++i) f.vectors.emplace_back(read_f64_le(bin, f.spec.param_count()));
  if (bin.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes in " + base + ".bin");
  return f;
}

}  // namespace metamix
