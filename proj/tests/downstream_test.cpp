#include "difflob/downstream.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "difflob/error.hpp"
#include "test_support.hpp"

namespace difflob {
namespace {

Eigen::MatrixXd random_design(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  return x;
}

TEST(StandardizerTest, CentersScalesAndKeepsConstantColumnsFinite) {
  Eigen::MatrixXd x(4, 2);
  x << 1, 5, 2, 5, 3, 5, 4, 5;
  const auto s = Standardizer::fit(x);
  const auto z = s.apply(x);
  EXPECT_NEAR(z.col(0).mean(), 0.0, 1e-12);
  EXPECT_NEAR(z.col(0).squaredNorm() / 4, 1.0, 1e-12);
  EXPECT_EQ(s.scale(1), 1.0);
  EXPECT_TRUE(z.col(1).isZero());
  EXPECT_THROW(Standardizer::fit(Eigen::MatrixXd(0, 2)), DataError);
}

TEST(RidgeTest, MatchesTheCenteredClosedForm) {
  const auto x = random_design(60, 4, 1);
  Eigen::VectorXd y = x * Eigen::Vector4d(1.0, -2.0, 0.5, 0.0) + Eigen::VectorXd::Constant(60, 3.0);
  y += 0.1 * random_design(60, 1, 2).col(0);
  const double lambda = 0.3;
  RidgeRegression r;
  r.fit(x, y, lambda);
  // Independent oracle: with an unpenalized bias the weights solve the
  // centered problem and the bias restores the means.
  const Eigen::RowVectorXd xm = x.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - xm;
  const Eigen::VectorXd yc = y.array() - y.mean();
  const Eigen::MatrixXd h = xc.transpose() * xc / 60.0 + lambda * Eigen::MatrixXd::Identity(4, 4);
  const Eigen::VectorXd w = h.inverse() * (xc.transpose() * yc / 60.0);
  const double b = y.mean() - xm.dot(w);
  EXPECT_LT((r.w - w).norm(), 1e-10);
  EXPECT_NEAR(r.bias, b, 1e-10);
}

TEST(RidgeTest, RecoversAnExactLinearMapWithTinyPenalty) {
  const auto x = random_design(40, 3, 3);
  const Eigen::VectorXd y = x * Eigen::Vector3d(0.7, 0.0, -1.5) + Eigen::VectorXd::Constant(40, -2.0);
  RidgeRegression r;
  r.fit(x, y, 1e-12);
  EXPECT_LT((r.w - Eigen::Vector3d(0.7, 0.0, -1.5)).norm(), 1e-8);
  EXPECT_NEAR(r.bias, -2.0, 1e-8);
  EXPECT_NEAR(r_squared(r.predict(x), y), 1.0, 1e-12);
}

TEST(RidgeTest, DuplicatedDataGivesTheSameFit) {
  const auto x = random_design(30, 5, 4);
  const Eigen::VectorXd y = random_design(30, 1, 5).col(0);
  Eigen::MatrixXd x2(60, 5);
  x2 << x, x;
  Eigen::VectorXd y2(60);
  y2 << y, y;
  RidgeRegression a, b;
  a.fit(x, y, 0.01);
  b.fit(x2, y2, 0.01);
  EXPECT_LT((a.w - b.w).norm(), 1e-10);
  EXPECT_NEAR(a.bias, b.bias, 1e-10);
}

TEST(LogisticTest, SolutionSatisfiesThePenalizedOptimalityCondition) {
  const auto x = random_design(200, 3, 6);
  std::mt19937_64 rng(7);
  Eigen::VectorXd y(200);
  for (Eigen::Index i = 0; i < 200; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-(1.5 * x(i, 0) - x(i, 2) + 0.3)));
    y(i) = std::bernoulli_distribution(p)(rng) ? 1.0 : 0.0;
  }
  const double lambda = 0.05;
  LogisticRegression m;
  m.fit(x, y, lambda);
  const Eigen::VectorXd p = m.probability(x);
  const Eigen::VectorXd resid = p - y;
  const Eigen::VectorXd grad_w = x.transpose() * resid / 200.0 + 2.0 * lambda * m.w;
  EXPECT_LT(grad_w.norm(), 1e-9);
  EXPECT_NEAR(resid.mean(), 0.0, 1e-9);
  EXPECT_GT(m.w(0), 0.0);
  EXPECT_LT(m.w(2), 0.0);
  EXPECT_LT(m.iterations, 50);
}

TEST(LogisticTest, SeparableDataStaysFiniteUnderThePenalty) {
  Eigen::MatrixXd x(6, 1);
  x << -3, -2, -1, 1, 2, 3;
  Eigen::VectorXd y(6);
  y << 0, 0, 0, 1, 1, 1;
  LogisticRegression m;
  m.fit(x, y, 1e-3);
  EXPECT_TRUE(m.w.allFinite());
  EXPECT_EQ(accuracy(m.predict(x), y), 1.0);
}

TEST(LogisticTest, DuplicatedDataGivesTheSameFit) {
  const auto x = random_design(50, 2, 8);
  Eigen::VectorXd y = (x.col(0).array() + 0.5 * x.col(1).array() > 0).cast<double>().matrix();
  y(0) = 1 - y(0);
  Eigen::MatrixXd x2(100, 2);
  x2 << x, x;
  Eigen::VectorXd y2(100);
  y2 << y, y;
  LogisticRegression a, b;
  a.fit(x, y, 0.01);
  b.fit(x2, y2, 0.01);
  EXPECT_LT((a.w - b.w).norm(), 1e-9);
  EXPECT_NEAR(a.bias, b.bias, 1e-9);
}

TEST(ScoresTest, AccuracyRSquaredAndMajorityExamples) {
  Eigen::VectorXd truth(4), pred(4);
  truth << 1, 0, 1, 1;
  pred << 1, 1, 1, 0;
  EXPECT_DOUBLE_EQ(accuracy(pred, truth), 0.5);
  Eigen::VectorXd t(3), p(3);
  t << 1, 2, 3;
  p << 1, 2, 4;
  EXPECT_DOUBLE_EQ(r_squared(p, t), 0.5);
  EXPECT_DOUBLE_EQ(r_squared(p, Eigen::VectorXd::Constant(3, 2.0)), 0.0);
  MajorityClassifier m;
  Eigen::VectorXd tie(2);
  tie << 0, 1;
  m.fit(tie);
  EXPECT_EQ(m.label, 1.0);
  m.fit(Eigen::VectorXd::Zero(3));
  EXPECT_TRUE(m.predict(Eigen::MatrixXd(2, 1)).isZero());
  EXPECT_THROW(accuracy(pred, t), ConfigError);
}

TEST(ScoresTest, MajorityAccuracyIsTheLabelFrequency) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> len(1, 40);
    std::bernoulli_distribution coin(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    Eigen::VectorXd y(len(rng)), heldout(len(rng));
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = coin(rng) ? 1.0 : 0.0;
    for (Eigen::Index i = 0; i < heldout.size(); ++i) heldout[i] = coin(rng) ? 1.0 : 0.0;
    MajorityClassifier m;
    m.fit(y);
    const double ones = y.mean();
    EXPECT_EQ(m.label, ones >= 0.5 ? 1.0 : 0.0);
    const double freq = (heldout.array() == m.label).cast<double>().mean();
    EXPECT_DOUBLE_EQ(accuracy(m.predict(Eigen::MatrixXd(heldout.size(), 3)), heldout), freq);
    // On its own training labels it scores max(p, 1 - p).
    EXPECT_DOUBLE_EQ(accuracy(m.predict(Eigen::MatrixXd(y.size(), 3)), y), std::max(ones, 1.0 - ones));
  }
}

class UsefulnessTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new cli::Dataset(testing::small_dataset(2, 900, 31, 3)); }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }
  static cli::Dataset* data_;
};

cli::Dataset* UsefulnessTest::data_ = nullptr;

TEST_F(UsefulnessTest, EmitsTheFullTableAndRealMatchesRealTwice) {
  PassThroughGenerator gen(data_->stats);
  UsefulnessOptions o;
  o.cf_histories = 20;
  o.seed = 3;
  const auto table = usefulness_eval(gen, data_->train, data_->test, o);
  ASSERT_EQ(table.cells.size(), 12u);
  for (const char* task : {"trend", "liquidity"}) {
    for (const char* setting : {"Real", "Real*2", "Real+CF"}) {
      for (const char* tail : {"high", "low"}) {
        const auto* c = table.find(task, setting, tail);
        ASSERT_NE(c, nullptr) << task << " " << setting << " " << tail;
        EXPECT_TRUE(std::isfinite(c->value));
        EXPECT_GT(c->n, 0u);
        if (std::string(task) == "trend") {
          EXPECT_EQ(c->metric, "accuracy");
          EXPECT_GE(c->value, 0.0);
          EXPECT_LE(c->value, 1.0);
        } else {
          EXPECT_EQ(c->metric, "r2");
          EXPECT_LE(c->value, 1.0);
        }
      }
      for (const char* tail : {"high", "low"}) {
        EXPECT_NEAR(table.find(task, "Real", tail)->value, table.find(task, "Real*2", tail)->value, 1e-9);
      }
    }
  }
  EXPECT_EQ(table.cf_samples, 2u * 2u * 20u);
  const auto dir = testing::scratch_dir("useful");
  write_usefulness_report(table, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "usefulness_table.csv"));
  std::filesystem::remove_all(dir);
}

TEST_F(UsefulnessTest, HistoryFeaturesFlattenTheHistoryBlock) {
  std::vector<const WindowPair*> two{&data_->train[0], &data_->train[1]};
  const auto x = history_features(two);
  ASSERT_EQ(x.rows(), 2);
  ASSERT_EQ(static_cast<std::size_t>(x.cols()), data_->train[0].history.data().size());
  EXPECT_EQ(x(1, 5), data_->train[1].history.data()[5]);
}

}  // namespace
}  // namespace difflob
