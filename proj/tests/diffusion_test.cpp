#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "difflob/diffusion.hpp"

namespace difflob {
namespace {

TEST(Schedule, SingleLevel) {
  const auto s = build_schedule(1, 0.01, 0.01);
  ASSERT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.99);
}

TEST(Schedule, DefaultGridMatchesDirectProduct) {
  const auto s = build_schedule();
  ASSERT_EQ(s.steps(), 100);
  double prod = 1.0;
  for (int i = 0; i < 100; ++i) {
    const double beta = kDefaultBetaMin + (kDefaultBetaMax - kDefaultBetaMin) * i / 99.0;
    EXPECT_NEAR(s.beta[static_cast<std::size_t>(i)], beta, 1e-15);
    prod *= 1.0 - beta;
  }
  EXPECT_NEAR(s.alpha_bar[99], prod, 1e-15);
  EXPECT_LT(s.alpha_bar[99], 0.05);
  EXPECT_GT(s.alpha_bar[0], 0.99);
}

TEST(Schedule, InvariantsHoldForValidEndpoints) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-5, 0.5);
  for (int trial = 0; trial < 50; ++trial) {
    double a = u(rng), b = u(rng);
    if (a == b) continue;
    const auto s = build_schedule(2 + trial, std::min(a, b), std::max(a, b));
    for (std::size_t i = 0; i < s.beta.size(); ++i) {
      EXPECT_GT(s.beta[i], 0);
      EXPECT_LT(s.beta[i], 1);
      if (i) {
        EXPECT_GE(s.beta[i], s.beta[i - 1]);
        EXPECT_LT(s.alpha_bar[i], s.alpha_bar[i - 1]);
      }
    }
  }
}

TEST(Schedule, RejectsInvalidEndpoints) {
  EXPECT_THROW(build_schedule(100, 0.0, 0.02), ConfigError);
  EXPECT_THROW(build_schedule(100, 0.03, 0.02), ConfigError);
  EXPECT_THROW(build_schedule(100, 0.01, 1.0), ConfigError);
  EXPECT_THROW(build_schedule(0, 0.01, 0.02), ConfigError);
}

TEST(Schedule, TimeLevelMapping) {
  const auto s = build_schedule();
  for (int i = 0; i < s.steps(); ++i) {
    EXPECT_EQ(s.level_of(s.time_of(i)), i);
    EXPECT_DOUBLE_EQ(s.continuous_beta(s.time_of(i)) / s.steps(), s.beta[static_cast<std::size_t>(i)]);
  }
}

TEST(ForwardPerturb, ZeroNoiseAndIdentityLimit) {
  const auto s = build_schedule();
  Eigen::MatrixXd x0 = Eigen::MatrixXd::Random(3, 4);
  const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(3, 4);
  const Eigen::MatrixXd x = forward_perturb(x0, s, 40, z);
  EXPECT_TRUE(x.isApprox(std::sqrt(s.alpha_bar[40]) * x0, 1e-15));
  DiffusionSchedule limit = s;
  limit.alpha_bar[0] = 1.0;
  const Eigen::MatrixXd noise = Eigen::MatrixXd::Random(3, 4);
  EXPECT_EQ(forward_perturb(x0, limit, 0, noise), x0);
  EXPECT_THROW(forward_perturb(x0, s, 100, noise), ConfigError);
  EXPECT_THROW(forward_perturb(x0, s, 1, Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 4))), ConfigError);
}

// Monte Carlo marginal of x_i against the closed form, checked at 3 sigma.
void check_marginal(int level) {
  const auto s = build_schedule();
  const int n = 100000;
  const double x0 = 1.7;
  Eigen::MatrixXd xs = Eigen::MatrixXd::Constant(1, n, x0);
  Eigen::MatrixXd z(1, n);
  std::mt19937_64 rng(static_cast<std::uint64_t>(level));
  fill_normal(z, rng);
  const Eigen::MatrixXd x = forward_perturb(xs, s, level, z);
  const double ab = s.alpha_bar[static_cast<std::size_t>(level)];
  const double mean = x.mean();
  const double var = (x.array() - mean).square().sum() / (n - 1);
  const double sd = std::sqrt(1.0 - ab);
  EXPECT_LT(std::abs(mean - std::sqrt(ab) * x0), 3 * sd / std::sqrt(n)) << "level " << level;
  // Var of the sample variance for Gaussian data is 2 sigma^4 / (n - 1).
  EXPECT_LT(std::abs(var - (1 - ab)), 3 * std::sqrt(2.0 / (n - 1)) * (1 - ab)) << "level " << level;
}

TEST(ForwardPerturb, MonteCarloMarginalsAtLevels1_50_100) {
  for (int level : {0, 49, 99}) check_marginal(level);
}

TEST(DsmLoss, Examples) {
  std::mt19937_64 rng(1);
  Eigen::MatrixXd z(100, 1000);
  fill_normal(z, rng);
  EXPECT_EQ(dsm_loss(z, z), 0.0);
  const double zero_loss = dsm_loss(Eigen::MatrixXd(Eigen::MatrixXd::Zero(100, 1000)), z);
  // Mean of 1e5 chi-square(1) draws: sd sqrt(2 / 1e5).
  EXPECT_LT(std::abs(zero_loss - 1.0), 3 * std::sqrt(2.0 / 1e5));
  const Eigen::MatrixXd shifted = z.array() + 0.3;
  EXPECT_NEAR(dsm_loss(shifted, z), 0.09, 1e-12);
  EXPECT_THROW(dsm_loss(z, Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 2))), ConfigError);
}

TEST(DsmLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Eigen::MatrixXd e(4, 5), z(4, 5);
  fill_normal(e, rng);
  fill_normal(z, rng);
  const Eigen::MatrixXd g = dsm_loss_grad(e, z);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    Eigen::MatrixXd ep = e, em = e;
    ep(i) += h;
    em(i) -= h;
    const double fd = (dsm_loss(ep, z) - dsm_loss(em, z)) / (2 * h);
    EXPECT_LE(std::abs(fd - g(i)), 1e-5 * std::max(1.0, std::abs(g(i))));
  }
}

TEST(Score, EpsConversion) {
  const auto s = build_schedule();
  Eigen::MatrixXd eps = Eigen::MatrixXd::Constant(2, 2, 0.5);
  const Eigen::MatrixXd sc = eps_to_score(eps, s, 10);
  EXPECT_NEAR(sc(0, 0), -0.5 / std::sqrt(1 - s.alpha_bar[10]), 1e-15);
}

TEST(GuidedScore, AnchorsAndAffinity) {
  std::mt19937_64 rng(4);
  Eigen::MatrixXd c(3, 7), u(3, 7);
  fill_normal(c, rng);
  fill_normal(u, rng);
  EXPECT_EQ(guided_score(c, u, 0.0), c);
  EXPECT_EQ(guided_score(c, u, -1.0), u);
  EXPECT_LT((guided_score(c, c, 2.5) - c).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::MatrixXd one = Eigen::MatrixXd::Ones(1, 1), zero = Eigen::MatrixXd::Zero(1, 1);
  EXPECT_EQ(guided_score(one, zero, 2.0)(0, 0), 3.0);
  // Collinearity of three points in w.
  const Eigen::MatrixXd a = guided_score(c, u, -0.7), b = guided_score(c, u, 0.4), d = guided_score(c, u, 3.1);
  const Eigen::MatrixXd predicted = a + (d - a) * ((0.4 + 0.7) / (3.1 + 0.7));
  EXPECT_LT((b - predicted).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(AncestralSample, GaussianScoreRecoversStandardNormal) {
  const auto s = build_schedule();
  const ScoreField score = [](const Eigen::MatrixXf& x, double, bool) -> Eigen::MatrixXf { return -x; };
  std::mt19937_64 rng(17);
  SampleOptions opt;
  opt.guidance = 0.0;
  const Eigen::MatrixXf x = ancestral_sample(score, s, 4, 10000, rng, opt);
  for (Eigen::Index d = 0; d < x.rows(); ++d) {
    const double mean = x.row(d).cast<double>().mean();
    const double var = (x.row(d).cast<double>().array() - mean).square().mean();
    EXPECT_LT(std::abs(mean), 0.05);
    EXPECT_GT(var, 0.85);
    EXPECT_LT(var, 1.15);
  }
}

TEST(AncestralSample, SingleStepFormulaWithoutNoise) {
  const auto s = build_schedule(1, 0.3, 0.3);
  const ScoreField score = [](const Eigen::MatrixXf& x, double, bool) -> Eigen::MatrixXf {
    return Eigen::MatrixXf::Constant(x.rows(), x.cols(), 2.0f) - x;
  };
  std::mt19937_64 rng(5), replay(5);
  SampleOptions opt;
  opt.guidance = 0.0;
  opt.disable_noise = true;
  const Eigen::MatrixXf out = ancestral_sample(score, s, 3, 2, rng, opt);
  Eigen::MatrixXf x1(3, 2);
  fill_normal(x1, replay);
  const float beta = 0.3f;  // N * beta[0] with N = 1
  const Eigen::MatrixXf expected = x1 + (0.5f * beta * x1 + beta * (Eigen::MatrixXf::Constant(3, 2, 2.0f) - x1));
  EXPECT_LT((out - expected).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(AncestralSample, EvaluationCountsAndDeterminism) {
  const auto s = build_schedule();
  int cond = 0, uncond = 0;
  const ScoreField score = [&](const Eigen::MatrixXf& x, double t, bool c) -> Eigen::MatrixXf {
    EXPECT_GT(t, 0.0);
    EXPECT_LE(t, 1.0);
    (c ? cond : uncond)++;
    return -x * (c ? 1.0f : 0.5f);
  };
  std::mt19937_64 a(9), b(9);
  SampleOptions opt;
  opt.guidance = 1.0;
  const Eigen::MatrixXf xa = ancestral_sample(score, s, 5, 3, a, opt);
  EXPECT_EQ(cond, 100);
  EXPECT_EQ(uncond, 100);
  const Eigen::MatrixXf xb = ancestral_sample(score, s, 5, 3, b, opt);
  EXPECT_EQ(xa, xb);
  cond = uncond = 0;
  opt.guidance = 0.0;
  ancestral_sample(score, s, 5, 3, a, opt);
  EXPECT_EQ(uncond, 0);
}

}  // namespace
}  // namespace difflob
