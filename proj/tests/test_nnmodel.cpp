#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "metamix/nnmodel.hpp"

using namespace metamix;

namespace {

MlpSpec spec_of(std::size_t in, std::vector<std::size_t> hidden, std::size_t out) {
  MlpSpec s;
  s.input_dim = in;
  s.hidden = std::move(hidden);
  s.output_dim = out;
  return s;
}

Dataset regression_data(std::vector<double> x, std::vector<double> y) {
  Dataset d;
  d.x = ad::Tensor::matrix(x.size(), 1, x);
  d.y = ad::Tensor::matrix(y.size(), 1, y);
  return d;
}

double scalar_loss(ad::Expr (*fn)(ad::Expr, ad::Expr), const ad::Tensor& a, const ad::Tensor& b) {
  ad::Graph g;
  ad::Expr pa = g.input("a", a.shape), pb = g.input("b", b.shape);
  return ad::evaluate(fn(pa, pb), {{"a", a}, {"b", b}}).item();
}

}  // namespace

TEST(MlpSpec, ParamCountFormula) {
  EXPECT_EQ(MlpSpec{}.param_count(), 1761u);  // 1-40-40-1
  EXPECT_EQ(spec_of(2, {3}, 4).param_count(), (2 + 1) * 3 + (3 + 1) * 4u);
  EXPECT_EQ(spec_of(1, {}, 1).param_count(), 2u);
}

TEST(MlpSpec, ZeroWidthRejected) {
  EXPECT_THROW(spec_of(1, {0}, 1).validate(), ShapeError);
  EXPECT_THROW(spec_of(0, {4}, 1).validate(), ShapeError);
}

TEST(InitParams, SameSeedSameVector) {
  MlpSpec s;
  EXPECT_EQ(init_params(s, 7).values, init_params(s, 7).values);
}

TEST(InitParams, DifferentSeedsDiffer) {
  MlpSpec s;
  EXPECT_NE(init_params(s, 1).values, init_params(s, 2).values);
}

TEST(InitParams, TinyStddevGivesNearZeroWeightsAndZeroBiases) {
  MlpSpec s = spec_of(2, {5}, 3);
  ParamVector p = init_params(s, 3, 1e-300);
  for (double v : p.values) EXPECT_LE(std::abs(v), 1e-295);
  // biases sit after each weight block
  EXPECT_EQ(p[10], 0.0);
  EXPECT_THROW(init_params(s, 3, 0.0), Error);
}

TEST(InitParams, WeightMomentsMatchStddev) {
  MlpSpec s = spec_of(1, {200, 200}, 1);
  ParamVector p = init_params(s, 11, 0.1);
  double sum = 0, sq = 0;
  std::size_t n = 0, at = 0;
  for (std::size_t l = 0; l < s.layer_count(); ++l) {
    for (std::size_t i = 0; i < s.fan_in(l) * s.fan_out(l); ++i, ++n) {
      sum += p[at + i];
      sq += p[at + i] * p[at + i];
    }
    at += s.fan_in(l) * s.fan_out(l);
    for (std::size_t i = 0; i < s.fan_out(l); ++i) EXPECT_EQ(p[at + i], 0.0);
    at += s.fan_out(l);
  }
  EXPECT_NEAR(sum / n, 0.0, 0.005);
  EXPECT_NEAR(std::sqrt(sq / n), 0.1, 0.005);
}

TEST(MlpForward, ZeroParamsGiveZeroOutput) {
  MlpSpec s = spec_of(2, {4, 3}, 2);
  ParamVector zero(s.param_count());
  for (double x : {-3.0, 0.5, 8.0}) {
    const double in[] = {x, -x};
    for (double v : mlp_predict(s, zero, in)) EXPECT_EQ(v, 0.0);
  }
}

TEST(MlpForward, IdentityNetPassesPositiveAndClipsNegative) {
  MlpSpec s = spec_of(1, {1}, 1);
  ParamVector p(std::vector<double>{1.0, 0.0, 1.0, 0.0});  // W0, b0, W1, b1
  const double two[] = {2.0}, minus_two[] = {-2.0};
  EXPECT_DOUBLE_EQ(mlp_predict(s, p, two)[0], 2.0);
  EXPECT_DOUBLE_EQ(mlp_predict(s, p, minus_two)[0], 0.0);
}

TEST(MlpForward, DimensionMismatchRejected) {
  MlpSpec s = spec_of(2, {3}, 1);
  ParamVector p = init_params(s, 1);
  const double one[] = {1.0};
  EXPECT_THROW(mlp_predict(s, p, one), ShapeError);
  ParamVector short_p(3);
  const double two[] = {1.0, 2.0};
  EXPECT_THROW(mlp_predict(s, short_p, two), ShapeError);
}

TEST(MlpForward, LinearLayerScalesWithInput) {
  MlpSpec s = spec_of(3, {}, 2);
  ParamVector p = init_params(s, 9, 1.0);
  const double x[] = {0.3, -1.2, 2.0}, x3[] = {0.9, -3.6, 6.0};
  std::vector<double> a = mlp_predict(s, p, x), b = mlp_predict(s, p, x3);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(b[i], 3.0 * a[i], 1e-12);
}

TEST(MseLoss, PerfectFitIsZero) {
  ad::Tensor t = ad::Tensor::matrix(3, 1, {1, -2, 5});
  EXPECT_EQ(scalar_loss(mse_loss, t, t), 0.0);
}

TEST(MseLoss, HandExample) {
  EXPECT_DOUBLE_EQ(scalar_loss(mse_loss, ad::Tensor::matrix(2, 1, {0, 2}), ad::Tensor::matrix(2, 1, {0, 0})), 2.0);
}

TEST(MseLoss, ResidualScalingIsQuadratic) {
  ad::Tensor p = ad::Tensor::matrix(3, 1, {1.0, -0.5, 2.0}), z(ad::Shape::matrix(3, 1));
  ad::Tensor p3 = p;
  for (double& v : p3.data) v *= 3.0;
  EXPECT_NEAR(scalar_loss(mse_loss, p3, z), 9.0 * scalar_loss(mse_loss, p, z), 1e-12);
}

TEST(MseLoss, ShapeMismatchRejected) {
  ad::Graph g;
  EXPECT_THROW(mse_loss(g.input("a", ad::Shape::matrix(2, 1)), g.input("b", ad::Shape::matrix(3, 1))), ShapeError);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  const std::size_t label[] = {2};
  ad::Tensor logits(ad::Shape::matrix(1, 5), 0.7);
  EXPECT_NEAR(scalar_loss(cross_entropy_loss, logits, one_hot(label, 5)), std::log(5.0), 1e-12);
  EXPECT_NEAR(std::log(5.0), 1.60944, 1e-5);
}

TEST(CrossEntropy, SaturatedCorrectLogitIsNearZero) {
  const std::size_t label[] = {0};
  EXPECT_LT(scalar_loss(cross_entropy_loss, ad::Tensor::matrix(1, 2, {100, 0}), one_hot(label, 2)), 1e-40);
}

TEST(CrossEntropy, ShiftInvariant) {
  const std::size_t labels[] = {1, 0, 2};
  ad::Tensor l = ad::Tensor::matrix(3, 3, {0.1, 2.0, -1.0, 3.0, 0.0, 0.5, -2.0, -2.5, 1.5});
  ad::Tensor shifted = l;
  for (double& v : shifted.data) v += 37.5;
  ad::Tensor y = one_hot(labels, 3);
  EXPECT_NEAR(scalar_loss(cross_entropy_loss, l, y), scalar_loss(cross_entropy_loss, shifted, y), 1e-12);
}

TEST(CrossEntropy, OutOfRangeLabelRejected) {
  const std::size_t bad[] = {5};
  EXPECT_THROW(one_hot(bad, 5), Error);
}

TEST(LogLikelihood, PerfectFitIsZero) {
  MlpSpec s = spec_of(1, {}, 1);
  ParamVector identity(std::vector<double>{1.0, 0.0});
  EXPECT_EQ(log_likelihood(s, identity, regression_data({1, 2, 3}, {1, 2, 3}), LossKind::MeanSquaredError), 0.0);
}

TEST(LogLikelihood, NegativeSummedLoss) {
  MlpSpec s = spec_of(1, {}, 1);
  ParamVector zero(2);
  // squared errors 1 and 3
  Dataset d = regression_data({0, 0}, {1, std::sqrt(3.0)});
  EXPECT_NEAR(log_likelihood(s, zero, d, LossKind::MeanSquaredError), -4.0, 1e-12);
}

TEST(LogLikelihood, WorseFitStrictlyLower) {
  MlpSpec s = spec_of(1, {}, 1);
  ParamVector zero(2);
  double good = log_likelihood(s, zero, regression_data({0, 0}, {1.0, 0.5}), LossKind::MeanSquaredError);
  double bad = log_likelihood(s, zero, regression_data({0, 0}, {1.0, 0.6}), LossKind::MeanSquaredError);
  EXPECT_LT(bad, good);
}

TEST(LogLikelihood, AdditiveOverDisjointData) {
  MlpSpec s = spec_of(1, {6}, 1);
  ParamVector p = init_params(s, 4, 0.5);
  Dataset a = regression_data({-1, 0.5, 2}, {0.3, 1.0, -2.0});
  Dataset b = regression_data({3, -4}, {2.0, 0.1});
  Dataset both = regression_data({-1, 0.5, 2, 3, -4}, {0.3, 1.0, -2.0, 2.0, 0.1});
  auto ll = [&](const Dataset& d) { return log_likelihood(s, p, d, LossKind::MeanSquaredError); };
  EXPECT_NEAR(ll(both), ll(a) + ll(b), 1e-12);
}

// Both losses through an MLP against central differences in the parameters.
TEST(LossGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-2, 2);
  for (LossKind kind : {LossKind::MeanSquaredError, LossKind::CrossEntropy}) {
    MlpSpec s = kind == LossKind::MeanSquaredError ? spec_of(1, {5, 4}, 1) : spec_of(2, {5}, 3);
    ParamVector theta = init_params(s, 8, 0.7);
    Dataset d;
    const std::size_t n = 6;
    std::vector<double> xs(n * s.input_dim);
    for (double& v : xs) v = u(rng);
    d.x = ad::Tensor::matrix(n, s.input_dim, xs);
    if (kind == LossKind::MeanSquaredError) {
      std::vector<double> ys(n);
      for (double& v : ys) v = u(rng);
      d.y = ad::Tensor::matrix(n, 1, ys);
    } else {
      const std::size_t labels[] = {0, 1, 2, 2, 1, 0};
      d.y = one_hot(labels, 3);
    }

    ad::Graph g;
    MlpParams p = declare_params(g, s, "");
    ad::Expr x = g.input("x", d.x.shape), y = g.input("y", d.y.shape);
    ad::Expr loss = loss_expr(kind, mlp_forward(s, p, x), y);
    std::vector<ad::Expr> grads = ad::gradient(loss, p.tensors);
    ad::Program prog(g, grads);
    ad::Workspace ws(prog);
    bind_params(ws, s, "", theta);
    ws.bind("x", d.x);
    ws.bind("y", d.y);
    ws.run();
    std::vector<ad::Tensor> parts;
    for (std::size_t i = 0; i < grads.size(); ++i) parts.push_back(ws.output(i));
    ParamVector analytic = flatten(parts);
    ASSERT_EQ(analytic.size(), theta.size());

    const double h = 1e-5;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      ParamVector tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      double fd = (dataset_loss(s, tp, d, kind) - dataset_loss(s, tm, d, kind)) / (2 * h);
      double scale = std::max(1.0, std::max(std::abs(fd), std::abs(analytic[i])));
      EXPECT_LT(std::abs(fd - analytic[i]) / scale, 1e-6) << "param " << i;
    }
  }
}

TEST(ParamFile, RoundTripIsExact) {
  MlpSpec s = spec_of(2, {7}, 3);
  std::vector<ParamVector> vs{init_params(s, 1), init_params(s, 2, 3.0)};
  vs[1][0] = -0.0;
  vs[1][1] = 1e-310;
  auto dir = std::filesystem::temp_directory_path() / "metamix_param_roundtrip";
  std::filesystem::create_directories(dir);
  std::string base = (dir / "p").string();
  save_param_file(base, s, vs, {{"note", "x"}});
  ParamFile f = load_param_file(base);
  EXPECT_EQ(f.spec, s);
  ASSERT_EQ(f.vectors.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < s.param_count(); ++i)
      EXPECT_EQ(std::memcmp(&f.vectors[k][i], &vs[k][i], sizeof(double)), 0);
  EXPECT_EQ(f.header.at("note"), "x");
  EXPECT_EQ(std::filesystem::file_size(base + ".bin"), 2 * s.param_count() * 8);
}
