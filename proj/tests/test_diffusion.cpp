#include "diffinst/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

using namespace diffinst;

TEST(Schedule, LinearConstantBetaByHand) {
  // constant beta = 0.1 over three steps: cumulative products by hand
  auto s = build_schedule(3, ScheduleKind::kLinear, 0.1, 0.1);
  ASSERT_EQ(s.steps, 3);
  ASSERT_EQ(s.alpha_bars.size(), 4u);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 1.0);
  EXPECT_NEAR(s.alpha_bars[1], 0.9, 1e-12);
  EXPECT_NEAR(s.alpha_bars[2], 0.81, 1e-12);
  EXPECT_NEAR(s.alpha_bars[3], 0.729, 1e-12);
}

TEST(Schedule, SingleStepConvention) {
  auto s = build_schedule(1, ScheduleKind::kCosine);
  ASSERT_EQ(s.alpha_bars.size(), 2u);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 1.0);
  auto s2 = build_schedule(1, ScheduleKind::kLinear);
  ASSERT_EQ(s2.alpha_bars.size(), 2u);
  EXPECT_DOUBLE_EQ(s2.alpha_bars[0], 1.0);
}

TEST(Schedule, CosineDefaultProperties) {
  auto s = build_schedule(1000, ScheduleKind::kCosine);
  for (int t = 1; t <= 1000; ++t) {
    EXPECT_GT(s.betas[t - 1], 0.0);
    EXPECT_LT(s.betas[t - 1], 1.0);
    EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
  }
  EXPECT_LT(s.alpha_bars[1000], 1e-3);

  auto s100 = build_schedule(100, ScheduleKind::kCosine);
  EXPECT_LT(s100.alpha_bars[100], 0.01);
}

TEST(Schedule, SnrStrictlyDecreasing) {
  auto s = build_schedule(200, ScheduleKind::kCosine);
  double prev = std::numeric_limits<double>::infinity();
  for (int t = 1; t <= 200; ++t) {
    double snr = s.alpha_bars[t] / (1.0 - s.alpha_bars[t]);
    EXPECT_LT(snr, prev);
    prev = snr;
  }
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(build_schedule(0, ScheduleKind::kLinear), std::invalid_argument);
  EXPECT_THROW(schedule_kind_from_string("quadratic"), std::invalid_argument);
}

TEST(Schedule, DeterministicForFixedInputs) {
  auto a = build_schedule(50, ScheduleKind::kCosine);
  auto b = build_schedule(50, ScheduleKind::kCosine);
  EXPECT_EQ(a.betas, b.betas);
  EXPECT_EQ(a.alpha_bars, b.alpha_bars);
}

TEST(QStep, ZeroNoiseAndZeroSignal) {
  auto s = build_schedule(10, ScheduleKind::kLinear, 0.04, 0.04);
  TensorD x({3}, {1.0, -2.0, 0.5});
  TensorD zero({3});
  auto scaled = q_step(x, 3, zero, s);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(scaled[i], std::sqrt(1 - 0.04) * x[i], 1e-12);

  TensorD eps({3}, {0.3, -0.7, 1.1});
  auto noise_only = q_step(zero, 3, eps, s);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(noise_only[i], std::sqrt(0.04) * eps[i], 1e-12);
}

TEST(QStep, ShapeMismatchRejected) {
  auto s = build_schedule(10, ScheduleKind::kLinear);
  TensorD x({3});
  TensorD eps({4});
  EXPECT_THROW(q_step(x, 1, eps, s), std::invalid_argument);
}

TEST(QSample, ZeroNoiseAndPureNoiseLimit) {
  auto s = build_schedule(1000, ScheduleKind::kCosine);
  TensorD x0({2}, {0.8, -0.3});
  TensorD zero({2});
  auto clean = q_sample(x0, 700, zero, s);
  double a = std::sqrt(s.alpha_bar(700));
  EXPECT_NEAR(clean[0], a * 0.8, 1e-12);
  EXPECT_NEAR(clean[1], a * -0.3, 1e-12);

  TensorD z0({2});
  TensorD e({2}, {1.3, -0.4});
  auto noisy = q_sample(z0, 1000, e, s);
  EXPECT_NEAR(noisy[0], e[0], 2e-2);
  EXPECT_NEAR(noisy[1], e[1], 2e-2);

  EXPECT_THROW(q_sample(x0, 0, zero, s), std::invalid_argument);
  EXPECT_THROW(q_sample(x0, 1001, zero, s), std::invalid_argument);
}

TEST(DdimStep, TerminalStepReturnsPrediction) {
  auto s = build_schedule(10, ScheduleKind::kLinear, 0.05, 0.05);
  TensorD xt({2}, {0.9, -1.4});
  TensorD x0({2}, {0.25, 0.75});
  auto out = ddim_step(xt, x0, 10, 0, s, 0.0);
  EXPECT_DOUBLE_EQ(out[0], 0.25);
  EXPECT_DOUBLE_EQ(out[1], 0.75);
  // sigma collapses at t_prev = 0 even for eta > 0
  Rng rng(7);
  auto out2 = ddim_step(xt, x0, 10, 0, s, 1.0, &rng);
  EXPECT_DOUBLE_EQ(out2[0], 0.25);
}

TEST(DdimStep, IdentityStep) {
  auto s = build_schedule(10, ScheduleKind::kLinear, 0.05, 0.05);
  TensorD xt({2}, {0.9, -1.4});
  TensorD x0({2}, {0.0, 0.0});
  auto out = ddim_step(xt, x0, 4, 4, s, 0.0);
  EXPECT_DOUBLE_EQ(out[0], xt[0]);
  EXPECT_DOUBLE_EQ(out[1], xt[1]);
}

TEST(DdimStep, PerfectPredictorTelescopes) {
  auto s = build_schedule(10, ScheduleKind::kLinear, 0.05, 0.05);
  const double x0v = 1.0;
  TensorD x0({1}, {x0v});
  // arbitrary start; with a perfect predictor the implied clean sample stays
  // fixed and the final eta=0 step lands on it exactly
  TensorD x({1}, {-0.61});
  std::vector<int> steps = {10, 7, 5, 2, 0};
  for (size_t i = 0; i + 1 < steps.size(); ++i) {
    x = ddim_step(x, x0, steps[i], steps[i + 1], s, 0.0);
    int t = steps[i + 1];
    if (t > 0) {
      double implied = (x[0] - std::sqrt(1 - s.alpha_bar(t)) *
                                   ((-0.61 - std::sqrt(s.alpha_bar(10)) * x0v) /
                                    std::sqrt(1 - s.alpha_bar(10)))) /
                       std::sqrt(s.alpha_bar(t));
      EXPECT_NEAR(implied, x0v, 1e-9);
    }
  }
  EXPECT_NEAR(x[0], x0v, 1e-9);
}

TEST(DdimStep, EtaZeroIsDeterministic) {
  auto s = build_schedule(100, ScheduleKind::kCosine);
  TensorD xt({3}, {0.4, -0.2, 1.7});
  TensorD x0({3}, {0.1, 0.0, -0.5});
  auto a = ddim_step(xt, x0, 80, 40, s, 0.0);
  auto b = ddim_step(xt, x0, 80, 40, s, 0.0);
  EXPECT_EQ(a.data, b.data);
}

TEST(DdimStep, RejectsBadArguments) {
  auto s = build_schedule(10, ScheduleKind::kLinear, 0.05, 0.05);
  TensorD x({1}, {0.0});
  EXPECT_THROW(ddim_step(x, x, 3, 5, s, 0.0), std::invalid_argument);   // t_prev > t
  EXPECT_THROW(ddim_step(x, x, 0, 0, s, 0.0), std::invalid_argument);   // alpha_bar = 1
  EXPECT_THROW(ddim_step(x, x, 5, 2, s, 1.5), std::invalid_argument);   // eta out of range
}

TEST(TimeEmbedding, ZeroTimestep) {
  auto e = time_embedding(0, 4);
  EXPECT_DOUBLE_EQ(e.values[0], 0.0);
  EXPECT_DOUBLE_EQ(e.values[1], 0.0);
  EXPECT_DOUBLE_EQ(e.values[2], 1.0);
  EXPECT_DOUBLE_EQ(e.values[3], 1.0);
}

TEST(TimeEmbedding, DistinctTimesteps) {
  auto a = time_embedding(1, 4);
  auto b = time_embedding(2, 4);
  EXPECT_NE(a.values, b.values);

  // all integer steps of a T=1000 range stay pairwise distinct at dim >= 8
  std::set<std::vector<double>> seen;
  for (int t = 0; t <= 1000; ++t) seen.insert(time_embedding(t, 8).values);
  EXPECT_EQ(seen.size(), 1001u);
}

TEST(TimeEmbedding, RangeAndErrors) {
  auto e = time_embedding(7, 128);
  for (double v : e.values) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(time_embedding(3, 5), std::invalid_argument);
  EXPECT_THROW(time_embedding(-1, 4), std::invalid_argument);
}
