#include "difflob/evaluation.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "difflob/error.hpp"
#include "difflob/generator.hpp"
#include "test_support.hpp"

namespace difflob {
namespace {

namespace fs = std::filesystem;

// Answers each request with the future of the pool window whose regime is
// closest to the requested one. A generator that obeys its conditioning.
class NearestRegimeGenerator final : public TrajectoryGenerator {
 public:
  NearestRegimeGenerator(const std::vector<WindowPair>& pool, PreprocessStats stats)
      : pool_(pool), stats_(std::move(stats)) {}

  std::vector<EncodedBlock> generate(std::span<const ConditionBundle> bundles, std::uint64_t) override {
    std::vector<EncodedBlock> out;
    for (const auto& b : bundles) {
      const WindowPair* best = nullptr;
      double best_d = std::numeric_limits<double>::infinity();
      for (const auto& w : pool_) {
        const double d = distance(b.regime, w.regime);
        if (d < best_d) {
          best_d = d;
          best = &w;
        }
      }
      out.push_back(best->future);
    }
    return out;
  }
  const PreprocessStats& stats() const override { return stats_; }

 private:
  double distance(const RegimeVector& a, const RegimeVector& b) const {
    const auto& s = stats_.regime;
    double d = 0;
    for (RegimeComponent c : kAllComponents) {
      const double scale = c == RegimeComponent::trend ? s.trend_std
                           : c == RegimeComponent::vol ? s.vol_std
                           : c == RegimeComponent::liq ? s.liq_std
                                                       : s.imb_std;
      const double z = (component_summary(a, c) - component_summary(b, c)) / scale;
      d += z * z;
    }
    return d;
  }

  const std::vector<WindowPair>& pool_;
  PreprocessStats stats_;
};

class EvaluationTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new cli::Dataset(testing::small_dataset(3, 1200, 21, 2)); }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }
  static cli::Dataset* data_;
};

cli::Dataset* EvaluationTest::data_ = nullptr;

void expect_zero(const DistanceQuad& d) {
  EXPECT_EQ(d.ks, 0.0);
  EXPECT_EQ(d.wasserstein, 0.0);
  EXPECT_NEAR(d.kl, 0.0, 1e-12);
  EXPECT_NEAR(d.js, 0.0, 1e-12);
}

TEST_F(EvaluationTest, PassThroughGeneratorHasZeroRealismDistances) {
  PassThroughGenerator gen(data_->stats);
  const auto r = realism_eval(gen, data_->test, 1, 60);
  EXPECT_EQ(r.n_real, 60u);
  EXPECT_EQ(r.n_generated, 60u);
  expect_zero(r.price);
  expect_zero(r.volume);
  ASSERT_EQ(r.regimes.size(), 4u);
  for (const auto& c : r.regimes) {
    expect_zero(c.distance);
    EXPECT_EQ(c.mean_real, c.mean_generated);
  }
  EXPECT_EQ(r.facts.acf_real, r.facts.acf_generated);
  EXPECT_EQ(r.facts.spread.real, r.facts.spread.generated);
}

TEST_F(EvaluationTest, ReportSchemaHasTwoGroupsOfFourMetrics) {
  PassThroughGenerator gen(data_->stats);
  const auto j = to_json(realism_eval(gen, data_->test, 1, 20));
  ASSERT_EQ(j.at("groups").size(), 2u);
  for (const char* group : {"price", "volume"}) {
    const auto& g = j.at("groups").at(group);
    ASSERT_EQ(g.size(), 4u);
    for (const char* metric : {"ks", "wasserstein", "kl", "js"}) EXPECT_TRUE(g.contains(metric)) << metric;
  }
}

TEST_F(EvaluationTest, CounterfactualRunsEightScenariosInOrder) {
  PassThroughGenerator gen(data_->stats);
  const std::vector<RegimeComponent> all(std::begin(kAllComponents), std::end(kAllComponents));
  const auto r = counterfactual_eval(gen, data_->train, data_->test, all, 0.2, 30, 5);
  ASSERT_EQ(r.scenarios.size(), 8u);
  ASSERT_EQ(r.directional.size(), 4u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(r.scenarios[i].component, all[i / 2]);
    EXPECT_EQ(r.scenarios[i].side, i % 2 == 0 ? TailSide::high : TailSide::low);
    EXPECT_EQ(r.scenarios[i].realized.size(), 30u);
    EXPECT_GT(r.scenarios[i].report.n_real, 0u);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_GT(r.scenarios[2 * c].target.scalar, r.scenarios[2 * c + 1].target.scalar);
  }
}

TEST_F(EvaluationTest, GeneratorThatIgnoresInterventionsIsNeverSignCorrect) {
  PassThroughGenerator gen(data_->stats);
  const std::vector<RegimeComponent> all(std::begin(kAllComponents), std::end(kAllComponents));
  const auto r = counterfactual_eval(gen, data_->train, data_->test, all, 0.2, 40, 5);
  for (const auto& d : r.directional) {
    EXPECT_EQ(d.statistic, 0.0);
    EXPECT_FALSE(d.sign_correct());
  }
}

TEST_F(EvaluationTest, GeneratorThatObeysInterventionsIsSignCorrect) {
  NearestRegimeGenerator gen(data_->train, data_->stats);
  const std::vector<RegimeComponent> all(std::begin(kAllComponents), std::end(kAllComponents));
  const auto r = counterfactual_eval(gen, data_->train, data_->test, all, 0.2, 80, 5);
  for (const auto& d : r.directional) {
    EXPECT_GT(d.statistic, 0.0) << to_string(d.component);
    EXPECT_TRUE(d.sign_correct()) << to_string(d.component) << " p = " << d.test.p_value;
    EXPECT_EQ(d.n_high, 80u);
    EXPECT_EQ(d.n_low, 80u);
  }
}

TEST_F(EvaluationTest, ReportsAreWrittenToDisk) {
  PassThroughGenerator gen(data_->stats);
  const auto dir = testing::scratch_dir("eval");
  write_realism_report(realism_eval(gen, data_->test, 1, 20), dir / "realism");
  const std::vector<RegimeComponent> some{RegimeComponent::vol};
  write_counterfactual_report(counterfactual_eval(gen, data_->train, data_->test, some, 0.2, 10, 1), dir / "cf");
  for (const char* f : {"realism/report.json", "realism/realism_table.csv", "realism/regime_distances.csv",
                        "realism/facts/returns_h1.csv", "realism/facts/spread.csv", "realism/facts/abs_return_acf.csv",
                        "realism/facts/volume_diff_corr_real.csv", "realism/facts/level_volume.csv",
                        "cf/report.json", "cf/counterfactual_table.csv", "cf/directional.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto table = io::read_json(dir / "cf/report.json");
  EXPECT_EQ(table.at("scenarios").size(), 2u);
  fs::remove_all(dir);
}

TEST_F(EvaluationTest, EmptyInputsAreRejected) {
  PassThroughGenerator gen(data_->stats);
  EXPECT_THROW(realism_eval(gen, {}, 1), DataError);
  EXPECT_THROW(counterfactual_eval(gen, {}, data_->test, {RegimeComponent::trend}, 0.2, 5, 1), DataError);
  EXPECT_THROW(decode_set({data_->test[0].future}, {}, data_->stats), ConfigError);
}

TEST(SpacedSubsetTest, EvenlySpacedAndZeroMeansAll) {
  std::vector<WindowPair> w(10);
  for (std::size_t i = 0; i < w.size(); ++i) w[i].anchor_mid = static_cast<double>(i);
  const auto all = spaced_subset(w, 0);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(spaced_subset(w, 25).size(), 10u);
  const auto five = spaced_subset(w, 5);
  ASSERT_EQ(five.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(five[i]->anchor_mid, 2.0 * static_cast<double>(i));
}

DecodedWindow window_with_returns(std::vector<double> r) {
  DecodedWindow w;
  w.returns = std::move(r);
  return w;
}

TEST(StylizedFactsTest, AbsReturnAcfVanishesForIidReturns) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<DecodedWindow> windows;
  const int count = 2000;
  for (int i = 0; i < count; ++i) {
    std::vector<double> r(64);
    for (double& x : r) x = n(rng);
    windows.push_back(window_with_returns(std::move(r)));
  }
  const auto acf = mean_abs_return_acf(windows);
  ASSERT_EQ(acf.size(), static_cast<std::size_t>(kAcfLags));
  // The per-window sample ACF has a -1/n bias; allow for it plus 4 se.
  for (double a : acf) EXPECT_NEAR(a, -1.0 / 64, 4.0 / std::sqrt(64.0 * count));
}

TEST(StylizedFactsTest, AbsReturnAcfSeesVolatilityClustering) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<DecodedWindow> windows;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> r(64);
    for (std::size_t t = 0; t < r.size(); ++t) r[t] = n(rng) * (t < 32 ? 0.2 : 3.0);
    windows.push_back(window_with_returns(std::move(r)));
  }
  const auto acf = mean_abs_return_acf(windows);
  ASSERT_FALSE(acf.empty());
  EXPECT_GT(acf[0], 0.3);
}

TEST(StylizedFactsTest, ConstantReturnsGiveNoAcf) {
  std::vector<DecodedWindow> windows{window_with_returns(std::vector<double>(32, 1.0))};
  EXPECT_TRUE(mean_abs_return_acf(windows).empty());
}

}  // namespace
}  // namespace difflob
