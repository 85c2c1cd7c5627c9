#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "metamix/rng.hpp"
#include "metamix/taskgen.hpp"

using namespace metamix;

constexpr double kPi = std::numbers::pi;

TEST(Polynomial, ConstantTerm) {
  TaskDef t = TaskDef::polynomial({3.5, 0, 0});
  for (double x : {-5.0, 0.0, 1.7, 5.0}) EXPECT_EQ(t(x), 3.5);
}

TEST(Polynomial, IdentityTerm) { EXPECT_EQ(TaskDef::polynomial({0, 1, 0})(2.0), 2.0); }

TEST(Polynomial, HandEvaluation) { EXPECT_EQ(TaskDef::polynomial({1, 2, 3})(2.0), 17.0); }

TEST(Polynomial, CoefficientsOutOfRangeRejected) {
  EXPECT_THROW(TaskDef::polynomial({5.1, 0, 0}), Error);
  EXPECT_NO_THROW(TaskDef::polynomial({-5, 5, 0}));
}

TEST(Polynomial, SampledCoefficientsInRange) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i)
    for (double c : sample_polynomial_task(rng).coeffs()) {
      EXPECT_GE(c, -5.0);
      EXPECT_LE(c, 5.0);
    }
}

TEST(Sinusoid, ZeroAtPhase) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    TaskDef t = sample_sinusoid_task(rng);
    EXPECT_EQ(t(t.phase()), 0.0);
  }
}

TEST(Sinusoid, PeakAndHandValue) {
  EXPECT_DOUBLE_EQ(TaskDef::sinusoid(1, 0)(kPi / 2), 1.0);
  EXPECT_DOUBLE_EQ(TaskDef::sinusoid(2, kPi / 2)(kPi), 2.0);
}

TEST(Sinusoid, AmplitudeDistribution) {
  Rng rng(3);
  const int n = 10000;
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    TaskDef t = sample_sinusoid_task(rng);
    ASSERT_GE(t.amplitude(), 0.1);
    ASSERT_LE(t.amplitude(), 5.0);
    ASSERT_GE(t.phase(), 0.0);
    ASSERT_LE(t.phase(), kPi);
    sum += t.amplitude();
  }
  const double se = (4.9 / std::sqrt(12.0)) / std::sqrt(static_cast<double>(n));
  EXPECT_LT(std::abs(sum / n - 2.55), 3 * se);
}

TEST(Sawtooth, ZeroCrossingAtHalfPeriod) {
  TaskDef t = TaskDef::sawtooth(3.0, 2.0);
  EXPECT_NEAR(t(1.0), 0.0, 1e-15);
}

TEST(Sawtooth, Periodic) {
  TaskDef t = TaskDef::sawtooth(2.5, 1.3);
  for (double x : {-4.1, -0.3, 0.2, 2.9}) EXPECT_NEAR(t(x + 1.3), t(x), 1e-12);
}

TEST(Sawtooth, RightLimitAtZero) {
  TaskDef t = TaskDef::sawtooth(4.0, 1.0);
  EXPECT_NEAR(t(1e-12), -4.0, 1e-9);
  EXPECT_EQ(t(0.0), -4.0);
  EXPECT_EQ(t(3.0), -4.0);  // singular point
}

TEST(Sawtooth, MatchesClosedForm) {
  TaskDef t = TaskDef::sawtooth(1.7, 2.2);
  for (double x : {-4.3, -1.0, 0.4, 1.9, 3.3}) {
    double u = x * kPi / 2.2;
    double ref = -(2 * 1.7 / kPi) * std::atan(std::cos(u) / std::sin(u));
    EXPECT_NEAR(t(x), ref, 1e-12);
  }
}

TEST(Regression, TargetsFiniteEverywhere) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    for (Family f : {Family::Polynomial, Family::Sinusoid, Family::Sawtooth}) {
      TaskDef t = sample_task(f, rng);
      for (double x = -5.0; x <= 5.0; x += 0.01) ASSERT_TRUE(std::isfinite(t(x)));
      if (f == Family::Sawtooth) {
        for (int k = -20; k <= 20; ++k) ASSERT_TRUE(std::isfinite(t(k * t.period())));
      }
    }
  }
}

TEST(Blobs, PointAtMeanIsThatClass) {
  TaskDef t = TaskDef::blobs(5, 0.0);
  for (std::size_t l = 0; l < 5; ++l) EXPECT_EQ(t.nearest_class(t.means()[l][0], t.means()[l][1]), l);
}

TEST(Blobs, FullTurnRotationIsIdentity) {
  TaskDef a = TaskDef::blobs(4, 0.0), b = TaskDef::blobs(4, 2 * kPi);
  for (std::size_t l = 0; l < 4; ++l)
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(a.means()[l][k], b.means()[l][k], 1e-12);
}

TEST(Blobs, TwoClassNearestMean) {
  TaskDef t = TaskDef::blobs(2, 0.0);  // means (1,0) and (-1,0)
  EXPECT_EQ(t.nearest_class(0.9, 0.0), 0u);
  EXPECT_THROW(TaskDef::blobs(1, 0.0), Error);
}

TEST(Episode, SingleSinusoidPointWithinAmplitude) {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    TaskDef t = sample_sinusoid_task(rng);
    Episode e = sample_episode(t, 1, 1, rng);
    EXPECT_LE(std::abs(e.support.y.data[0]), t.amplitude());
    EXPECT_LE(std::abs(e.query.y.data[0]), t.amplitude());
  }
}

TEST(Episode, SameSeedSameEpisode) {
  TaskDef t = TaskDef::sawtooth(2, 1);
  Rng a(9), b(9);
  Episode x = sample_episode(t, 5, 7, a), y = sample_episode(t, 5, 7, b);
  EXPECT_EQ(x.support.x.data, y.support.x.data);
  EXPECT_EQ(x.query.y.data, y.query.y.data);
}

TEST(Episode, QuadraticTargetsAreXSquared) {
  Rng rng(6);
  Episode e = sample_episode(TaskDef::polynomial({0, 0, 1}), 10, 10, rng);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(e.support.y.data[i], e.support.x.data[i] * e.support.x.data[i]);
    EXPECT_GE(e.support.x.data[i], -5.0);
    EXPECT_LT(e.support.x.data[i], 5.0);
  }
}

TEST(Episode, SizesAsRequested) {
  Rng rng(7);
  for (std::size_t n : {1u, 3u, 10u})
    for (std::size_t m : {1u, 4u}) {
      Episode e = sample_episode(sample_blobs_task(rng, 3), n, m, rng);
      EXPECT_EQ(e.support.size(), n);
      EXPECT_EQ(e.query.size(), m);
      EXPECT_EQ(e.support.y.shape.cols, 3u);
    }
  EXPECT_THROW(sample_episode(TaskDef::sinusoid(1, 0), 0, 1, rng), Error);
}

TEST(Schedule, BoundaryConvention) {
  PhaseSchedule s = PhaseSchedule::parse("polynomial:4000,sinusoid:3000,sawtooth:3000");
  EXPECT_EQ(stream_family(s, 0), Family::Polynomial);
  EXPECT_EQ(stream_family(s, 3999), Family::Polynomial);
  EXPECT_EQ(stream_family(s, 4000), Family::Sinusoid);
  EXPECT_EQ(stream_family(s, 7000), Family::Sawtooth);
  EXPECT_EQ(stream_family(s, 9999), Family::Sawtooth);
  EXPECT_THROW(stream_family(s, 10000), Error);
  EXPECT_EQ(s.total(), 10000u);
  EXPECT_EQ(s.bounds(1), std::make_pair(std::size_t{4000}, std::size_t{7000}));
}

TEST(Schedule, ParseAndPrintRoundTrip) {
  for (const char* text : {"polynomial:800,sinusoid:600,sawtooth:600", "polynomial+sinusoid+sawtooth:1500",
                           "blobs:100,blobs@0.5:100"}) {
    PhaseSchedule s = PhaseSchedule::parse(text);
    EXPECT_EQ(s.str(), text);
  }
}

TEST(Schedule, BadTextRejected) {
  EXPECT_THROW(PhaseSchedule::parse("sinusoid"), Error);
  EXPECT_THROW(PhaseSchedule::parse("sinusoid:0"), Error);
  EXPECT_THROW(PhaseSchedule::parse("sinusoid:x"), Error);
  EXPECT_THROW(PhaseSchedule::parse("cosine:10"), Error);
}

TEST(MetaBatch, SingleFamilyPhase) {
  PhaseSchedule s = PhaseSchedule::parse("sawtooth:10");
  Rng rng(8);
  auto batch = sample_meta_batch(s.phases[0], 10, 5, 5, rng);
  ASSERT_EQ(batch.size(), 10u);
  for (const Episode& e : batch) EXPECT_EQ(e.family, Family::Sawtooth);
}

TEST(MetaBatch, MixedPhaseUsesAllFamilies) {
  PhaseSchedule s = PhaseSchedule::parse("polynomial+sinusoid+sawtooth:10");
  Rng rng(8);
  int seen[3] = {0, 0, 0};
  for (const Episode& e : sample_meta_batch(s.phases[0], 300, 5, 5, rng)) ++seen[static_cast<int>(e.family)];
  for (int c : seen) EXPECT_GT(c, 60);
}

TEST(SeedStreams, IndependentOfOrder) {
  Rng a = make_rng(7, Stream::Tasks, 3);
  Rng b = make_rng(7, Stream::Tasks, 3);
  EXPECT_EQ(a(), b());
  EXPECT_NE(derive_seed(7, Stream::Tasks, 3), derive_seed(7, Stream::Spawn, 3));
  EXPECT_NE(derive_seed(7, Stream::Tasks, 3), derive_seed(8, Stream::Tasks, 3));
}
