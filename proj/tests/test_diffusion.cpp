#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "artfix/diffusion.hpp"
#include "support.hpp"

using namespace artfix;

namespace {

ImageTensor scalar(double v) { return ImageTensor(1, 1, 1, 1, ValueDomain::signed11, v); }

}  // namespace

TEST(Schedule, DefaultLinearIsMonotone) {
  const auto s = make_schedule(250);
  EXPECT_EQ(s.steps(), 250);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  for (int t = 1; t <= 250; ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
    EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  }
  EXPECT_GT(s.alpha_bar(250), 0.0);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(250), 0.02);
}

TEST(Schedule, Telescoping) {
  const auto s = make_schedule(250);
  for (int t = 1; t <= 250; ++t) EXPECT_LT(std::abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))), 1e-12);
}

TEST(Schedule, ConstantBetaProducts) {
  const auto s = make_schedule(2, ScheduleKind::constant, 0.75, 0.75);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.25);
  EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.0625);
}

TEST(Schedule, SingleStepPosteriorVarianceIsZero) {
  for (double b : {1e-4, 0.3, 0.9}) EXPECT_EQ(make_schedule(1, ScheduleKind::constant, b, b).posterior_var(1), 0.0);
  EXPECT_EQ(make_schedule(250).posterior_var(1), 0.0);
}

TEST(Schedule, PosteriorVarianceFormula) {
  const auto s = make_schedule(250);
  for (int t = 2; t <= 250; ++t)
    EXPECT_NEAR(s.posterior_var(t), s.beta(t) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)), 1e-15);
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_schedule(0), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, ScheduleKind::linear, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, ScheduleKind::linear, 0.1, 0.05), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, ScheduleKind::linear, 1e-4, 1.0), std::invalid_argument);
  const auto s = make_schedule(10);
  EXPECT_THROW(s.alpha_bar(11), std::out_of_range);
  EXPECT_THROW(s.beta(0), std::out_of_range);
}

TEST(ForwardSample, TimeZeroIsIdentity) {
  const auto s = make_schedule(250);
  const auto x0 = test::random_image(3, 8, 8, 1);
  const auto e = test::gaussian_like(x0, 2);
  EXPECT_EQ(forward_sample(x0, 0, e, s).values, x0.values);
}

TEST(ForwardSample, ZeroSignalScalesNoise) {
  const auto s = make_schedule(250);
  const ImageTensor x0(1, 3, 4, 4);
  const auto e = test::gaussian_like(x0, 3);
  for (int t : {1, 17, 250}) {
    const auto xt = forward_sample(x0, t, e, s);
    for (std::size_t i = 0; i < xt.size(); ++i)
      EXPECT_NEAR(xt.values[i], std::sqrt(1 - s.alpha_bar(t)) * e.values[i], 1e-14);
  }
}

TEST(ForwardSample, RejectsBadInputs) {
  const auto s = make_schedule(10);
  const auto x = test::random_image(3, 4, 4, 1);
  EXPECT_THROW(forward_sample(x, 11, x, s), std::out_of_range);
  EXPECT_THROW(forward_sample(x, -1, x, s), std::out_of_range);
  EXPECT_THROW(forward_sample(x, 1, test::random_image(1, 4, 4, 1), s), std::invalid_argument);
}

// Monte Carlo: 10^5 scalar draws of the closed-form marginal.
TEST(ForwardSample, MarginalMomentsMonteCarlo) {
  const auto s = make_schedule(250);
  const int t = 60, n = 100000;
  const double x0 = 0.7, mean = std::sqrt(s.alpha_bar(t)) * x0, var = 1 - s.alpha_bar(t);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  double m1 = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    const double v = forward_sample(scalar(x0), t, scalar(g(rng)), s).values[0];
    m1 += v;
    m2 += v * v;
  }
  m1 /= n;
  const double v_hat = m2 / n - m1 * m1;
  EXPECT_LT(std::abs(m1 - mean), 3 * std::sqrt(var / n));
  // Standard error of the sample variance of a Gaussian: var * sqrt(2/(n-1)).
  EXPECT_LT(std::abs(v_hat - var), 3 * var * std::sqrt(2.0 / (n - 1)));
}

// Composing t single-step kernels matches the closed-form marginal.
TEST(ForwardStep, ComposedKernelsMatchMarginal) {
  const auto s = make_schedule(250);
  const int t = 40, n = 10000;
  const double x0 = -0.4, mean = std::sqrt(s.alpha_bar(t)) * x0, var = 1 - s.alpha_bar(t);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  double m1 = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    ImageTensor x = scalar(x0);
    for (int k = 1; k <= t; ++k) x = forward_step(x, k, scalar(g(rng)), s);
    m1 += x.values[0];
    m2 += x.values[0] * x.values[0];
  }
  m1 /= n;
  EXPECT_LT(std::abs(m1 - mean), 3 * std::sqrt(var / n));
  EXPECT_LT(std::abs(m2 / n - m1 * m1 - var), 3 * var * std::sqrt(2.0 / (n - 1)));
}

TEST(Posterior, FirstStepIsExact) {
  const auto s = make_schedule(250);
  const auto x0 = test::random_image(3, 5, 5, 4), xt = test::random_image(3, 5, 5, 5);
  const auto p = posterior_params(x0, xt, 1, s);
  EXPECT_EQ(p.variance, 0.0);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(p.mean.values[i], x0.values[i], 1e-15);
}

// Product of N(x_t; sqrt(a_t) x, b_t) and N(x; sqrt(abar_{t-1}) x0, 1 - abar_{t-1}) in x.
TEST(Posterior, MatchesGaussianProduct) {
  const auto s = make_schedule(250);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t : {2, 3, 50, 125, 250}) {
    const double x0 = u(rng), xt = u(rng);
    const double a = s.alpha(t), b = s.beta(t), abp = s.alpha_bar(t - 1);
    const double prec = a / b + 1.0 / (1 - abp);
    const double mean = (std::sqrt(a) * xt / b + std::sqrt(abp) * x0 / (1 - abp)) / prec;
    const auto p = posterior_params(scalar(x0), scalar(xt), t, s);
    EXPECT_NEAR(p.mean.values[0], mean, 1e-12) << "t=" << t;
    EXPECT_NEAR(p.variance, 1.0 / prec, 1e-12) << "t=" << t;
  }
}

TEST(Posterior, ZeroInputsGiveZeroMeanAndTimeZeroThrows) {
  const auto s = make_schedule(250);
  const ImageTensor z(1, 3, 4, 4);
  for (double v : posterior_params(z, z, 100, s).mean.values.data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(posterior_params(z, z, 0, s), std::out_of_range);
}

TEST(Loss, ExamplesAndScalarOracle) {
  const auto s = make_schedule(250);
  const auto x0 = test::random_image(3, 6, 6, 1);
  const auto e = test::gaussian_like(x0, 2);
  const auto sample = make_loss_sample(x0, 10, e, s);
  EXPECT_EQ(loss_target(sample, e), 0.0);
  ImageTensor shifted = e;
  for (double& v : shifted.values.data) v += 0.1;
  EXPECT_NEAR(loss_target(sample, shifted), 0.01, 1e-12);

  const auto p = test::gaussian_like(x0, 3);
  double acc = 0;
  for (std::size_t i = 0; i < e.size(); ++i) acc += (e.values[i] - p.values[i]) * (e.values[i] - p.values[i]);
  EXPECT_NEAR(loss_target(sample, p), acc / double(e.size()), 1e-12);
  // Symmetric and zero only on equality.
  EXPECT_EQ(loss_target<double>(e.values.span(), p.values.span()), loss_target<double>(p.values.span(), e.values.span()));
  EXPECT_GT(loss_target(sample, p), 0.0);
  EXPECT_THROW(loss_target(sample, test::random_image(1, 6, 6, 1)), std::invalid_argument);
}

TEST(Loss, SampleHoldsClosedForm) {
  const auto s = make_schedule(250);
  const auto x0 = test::random_image(3, 4, 4, 8);
  const auto e = test::gaussian_like(x0, 9);
  const auto sample = make_loss_sample(x0, 77, e, s);
  for (std::size_t i = 0; i < x0.size(); ++i)
    EXPECT_NEAR(sample.xt.values[i], std::sqrt(s.alpha_bar(77)) * x0.values[i] + std::sqrt(1 - s.alpha_bar(77)) * e.values[i],
                1e-14);
}

TEST(ReverseStep, FirstStepRoundTrip) {
  const auto s = make_schedule(250);
  const auto x0 = test::random_image(3, 8, 8, 21);
  const auto e = test::gaussian_like(x0, 22);
  const auto x1 = forward_sample(x0, 1, e, s);
  const auto back = reverse_step(x1, e, 1, test::gaussian_like(x0, 23), s);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_LT(std::abs(back.values[i] - x0.values[i]), 1e-6);
}

TEST(ReverseStep, FirstStepAddsNoNoiseAndZeroStaysZero) {
  const auto s = make_schedule(250);
  const auto x = test::random_image(3, 4, 4, 1), e = test::gaussian_like(x, 2);
  EXPECT_EQ(reverse_step(x, e, 1, test::gaussian_like(x, 3), s).values,
            reverse_step(x, e, 1, test::gaussian_like(x, 4), s).values);
  const ImageTensor z(1, 3, 4, 4);
  for (int t : {1, 100, 250})
    for (double v : reverse_step(z, z, t, z, s).values.data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(reverse_step(z, z, 0, z, s), std::out_of_range);
  EXPECT_THROW(reverse_step(z, z, 251, z, s), std::out_of_range);
}

TEST(ReverseStep, MatchesFormula) {
  const auto s = make_schedule(250);
  const auto x = test::random_image(3, 4, 4, 1), e = test::gaussian_like(x, 2), z = test::gaussian_like(x, 3);
  const int t = 137;
  const auto out = reverse_step(x, e, t, z, s);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double want = (x.values[i] - s.beta(t) / std::sqrt(1 - s.alpha_bar(t)) * e.values[i]) / std::sqrt(s.alpha(t)) +
                        std::sqrt(s.posterior_var(t)) * z.values[i];
    EXPECT_NEAR(out.values[i], want, 1e-12);
  }
}

TEST(Schedule, OneMinusAlphaBarAccumulation) {
  const auto s = make_schedule(250);
  EXPECT_EQ(s.one_minus_alpha_bar(0), 0.0);
  EXPECT_EQ(s.one_minus_alpha_bar(1), s.beta(1));
  for (int t = 1; t <= 250; ++t) EXPECT_NEAR(s.one_minus_alpha_bar(t), 1 - s.alpha_bar(t), 1e-14);
}
