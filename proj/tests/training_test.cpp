#include "difflob/training.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "difflob/checkpoint.hpp"
#include "difflob/error.hpp"
#include "difflob/generator.hpp"
#include "test_support.hpp"

namespace difflob {
namespace {

using testing::bit_equal;

class TrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new cli::Dataset(testing::small_dataset()); }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }

  static TrainConfig quick(int epochs) {
    TrainConfig c;
    c.lr = 1e-3;
    c.batch_size = 16;
    c.max_epochs = epochs;
    c.seed = 42;
    return c;
  }

  static TrainResult run(const TrainConfig& c, const Checkpoint* in = nullptr) {
    return train_stage(data_->train, data_->val, c, testing::small_model(), data_->stats, in);
  }

  static cli::Dataset* data_;
};

cli::Dataset* TrainingTest::data_ = nullptr;

ParameterSet<float> constant_set(float value) {
  ParameterSet<float> p;
  p.add("a.w", ParamGroup::base, 3, 2);
  p.add("b.b", ParamGroup::control, 4, 1);
  for (auto& item : p) item.value.setConstant(value);
  return p;
}

TEST(EmaTest, RepeatedUpdatesFollowTheGeometricClosedForm) {
  auto shadow = constant_set(2.0f);
  const auto params = constant_set(-1.0f);
  const double d = 0.9;
  const int n = 25;
  for (int i = 0; i < n; ++i) ema_update(shadow, params, d);
  const double expected = std::pow(d, n) * 2.0 + (1.0 - std::pow(d, n)) * -1.0;
  for (const auto& item : shadow) {
    for (Eigen::Index i = 0; i < item.value.size(); ++i) EXPECT_NEAR(item.value.data()[i], expected, 1e-5);
  }
}

TEST(EmaTest, DecayZeroCopiesAndDecayOneFreezes) {
  auto shadow = constant_set(2.0f);
  const auto params = constant_set(-1.0f);
  ema_update(shadow, params, 1.0);
  EXPECT_TRUE(bit_equal(shadow, constant_set(2.0f)));
  ema_update(shadow, params, 0.0);
  EXPECT_TRUE(bit_equal(shadow, params));
}

TEST(EmaTest, WarmupCapsTheDecayOnEarlySteps) {
  TrainConfig c;
  c.ema_decay = 0.999;
  EXPECT_DOUBLE_EQ(effective_ema_decay(c, 0), 0.1);
  EXPECT_DOUBLE_EQ(effective_ema_decay(c, 10), 11.0 / 20.0);
  EXPECT_DOUBLE_EQ(effective_ema_decay(c, 100000), 0.999);
  c.ema_warmup = false;
  EXPECT_DOUBLE_EQ(effective_ema_decay(c, 0), 0.999);
}

TEST(EmaTest, MismatchedShadowIsRejected) {
  auto shadow = constant_set(1.0f);
  ParameterSet<float> other;
  other.add("x.w", ParamGroup::base, 1, 1);
  EXPECT_THROW(ema_update(shadow, other, 0.5), ConfigError);
}

TEST(AdamTest, FirstStepMovesEachWeightByTheLearningRate) {
  auto params = constant_set(0.0f);
  auto grads = Gradients<float>::like(params);
  grads.values[0].setConstant(3.0f);
  grads.values[0](0, 0) = -0.5f;
  grads.values[1].setConstant(1.0f);
  Adam adam(params, {0}, 0.01);
  adam.step(params, grads);
  EXPECT_NEAR(params[0].value(0, 0), 0.01, 1e-6);
  EXPECT_NEAR(params[0].value(1, 1), -0.01, 1e-6);
  // Parameters outside the trainable list are untouched.
  EXPECT_TRUE(bit_equal(params[1].value, constant_set(0.0f)[1].value));
  EXPECT_EQ(adam.steps(), 1);
}

TEST(ConditionMaskTest, DropRateMatchesWithinThreeSigma) {
  std::mt19937_64 rng(9);
  const std::size_t n = 200000;
  for (double p : {0.1, 0.5, 0.8}) {
    const auto keep = draw_condition_mask(rng, n, p);
    const double dropped = static_cast<double>(std::count(keep.begin(), keep.end(), 0)) / n;
    EXPECT_NEAR(dropped, p, 3.0 * std::sqrt(p * (1 - p) / n)) << "p = " << p;
  }
  const auto none = draw_condition_mask(rng, 1000, 0.0);
  EXPECT_EQ(std::count(none.begin(), none.end(), 0), 0);
  const auto all = draw_condition_mask(rng, 1000, 1.0);
  EXPECT_EQ(std::count(all.begin(), all.end(), 1), 0);
}

TEST(TrainConfigTest, JsonRoundTripKeepsInfiniteThreshold) {
  TrainConfig c;
  c.lr = 3e-4;
  c.patience = 7;
  c.min_delta = std::numeric_limits<double>::infinity();
  c.ema_warmup = false;
  c.val_stride = 5;
  const auto j = to_json(c);
  EXPECT_TRUE(j.at("min_delta").is_null());
  const auto back = train_config_from_json(j);
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.patience, 7);
  EXPECT_TRUE(std::isinf(back.min_delta));
  EXPECT_FALSE(back.ema_warmup);
  EXPECT_EQ(back.val_stride, 5u);
}

TEST(TrainConfigTest, InvalidValuesAreRejected) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.lr = 0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.batch_size = 0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.ema_decay = 1.0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.cond_drop_p = 1.5; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.stage = 3; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.min_delta = -1; })), ConfigError);
}

TEST_F(TrainingTest, DatasetIsUsable) {
  ASSERT_GT(data_->train.size(), 16u);
  ASSERT_GT(data_->val.size(), 4u);
  EXPECT_EQ(data_->stats.levels, 2);
}

TEST_F(TrainingTest, InfiniteThresholdWithPatienceOneStopsAfterTwoEpochs) {
  auto c = quick(10);
  c.patience = 1;
  c.min_delta = std::numeric_limits<double>::infinity();
  const auto r = run(c);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.best_epoch, 1);
  EXPECT_EQ(r.steps, 2 * ((data_->train.size() + 15) / 16));
}

TEST_F(TrainingTest, SameSeedGivesBitIdenticalRuns) {
  const auto c = quick(3);
  const auto a = run(c);
  const auto b = run(c);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  EXPECT_TRUE(bit_equal(a.last.params, b.last.params));
  EXPECT_TRUE(bit_equal(a.last.ema_params, b.last.ema_params));
  auto other = c;
  other.seed = 43;
  EXPECT_NE(run(other).history[0].train_loss, a.history[0].train_loss);
}

TEST_F(TrainingTest, ConditionDropoutCountsMatchTheRate) {
  auto c = quick(4);
  c.cond_drop_p = 0.5;
  const auto r = run(c);
  ASSERT_EQ(r.seen_conditions, 4 * data_->train.size());
  const double n = static_cast<double>(r.seen_conditions);
  EXPECT_NEAR(static_cast<double>(r.dropped_conditions) / n, 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST_F(TrainingTest, LossFallsWellBelowTheFirstEpochOnASmallSet) {
  auto c = quick(80);
  c.lr = 3e-3;
  c.batch_size = 4;
  c.cond_drop_p = 0.0;
  std::vector<WindowPair> few(data_->train.begin(), data_->train.begin() + 16);
  const auto r = train_stage(few, data_->val, c, testing::small_model(), data_->stats, nullptr);
  ASSERT_EQ(r.history.size(), 80u);
  double tail = 0;
  for (std::size_t i = r.history.size() - 5; i < r.history.size(); ++i) tail += r.history[i].train_loss / 5;
  EXPECT_LT(tail, 0.25 * r.history.front().train_loss);
}

TEST_F(TrainingTest, ValidationLossIgnoresWindowOrder) {
  const auto r = run(quick(1));
  const auto model = r.checkpoint.model(true);
  auto shuffled = data_->val;
  std::mt19937_64 rng(3);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const double a = validation_loss(model, ForwardMode::base, r.checkpoint.schedule, data_->val, data_->stats, 7);
  const double b = validation_loss(model, ForwardMode::base, r.checkpoint.schedule, shuffled, data_->stats, 7, 1, 5);
  EXPECT_NEAR(a, b, 1e-9 * std::abs(a));
  const double other = validation_loss(model, ForwardMode::base, r.checkpoint.schedule, data_->val, data_->stats, 8);
  EXPECT_NE(a, other);
}

TEST_F(TrainingTest, StageTwoLeavesTheBaseWeightsBitIdentical) {
  const auto s1 = run(quick(2));
  auto c2 = quick(2);
  c2.stage = 2;
  const auto s2 = run(c2, &s1.checkpoint);
  EXPECT_EQ(s2.checkpoint.stage, 2);
  const auto& base = s1.checkpoint.ema_params;
  bool control_moved = false;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto& p = s2.last.params[i];
    if (p.group == ParamGroup::base) {
      EXPECT_TRUE(bit_equal(p.value, base[i].value)) << p.name;
      EXPECT_TRUE(bit_equal(s2.last.ema_params[i].value, base[i].value)) << p.name;
    } else if (!bit_equal(p.value, base[i].value)) {
      control_moved = true;
    }
  }
  EXPECT_TRUE(control_moved);
}

TEST_F(TrainingTest, StageTwoStartsAtTheBaseFunction) {
  const auto s1 = run(quick(1));
  auto model = s1.checkpoint.model(true);
  model.init_control_from_base();
  std::vector<ConditionBundle> bundles;
  Mat<float> x(2, 3 * static_cast<Eigen::Index>(model.config().levels * model.config().tau));
  for (std::size_t i = 0; i < 3; ++i) bundles.push_back(observed_bundle(data_->val[i]));
  std::mt19937_64 rng(1);
  fill_normal(x, rng);
  const auto cond = make_condition_batch(bundles, data_->stats, model.config().tau);
  const std::vector<double> t{0.1, 0.5, 0.9};
  EXPECT_TRUE(bit_equal(model.forward(x, t, cond, ForwardMode::base),
                        model.forward(x, t, cond, ForwardMode::controlled)));
}

TEST_F(TrainingTest, BadInputsAreRejected) {
  EXPECT_THROW(train_stage({}, data_->val, quick(1), testing::small_model(), data_->stats, nullptr), DataError);
  EXPECT_THROW(train_stage(data_->train, {}, quick(1), testing::small_model(), data_->stats, nullptr), DataError);
  auto c2 = quick(1);
  c2.stage = 2;
  EXPECT_THROW(run(c2), ConfigError);
  auto no_control = testing::small_model();
  no_control.use_control = false;
  const auto s1 = train_stage(data_->train, data_->val, quick(1), no_control, data_->stats, nullptr);
  EXPECT_THROW(run(c2, &s1.checkpoint), ConfigError);
}

TEST_F(TrainingTest, RunDirectoryHoldsMetricsAndCheckpoints) {
  const auto dir = testing::scratch_dir("train");
  const auto r = train_stage(data_->train, data_->val, quick(2), testing::small_model(), data_->stats, nullptr, &dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
  const auto best = load_checkpoint(dir / "best");
  const auto last = load_checkpoint(dir / "last");
  EXPECT_TRUE(bit_equal(best.params, r.checkpoint.params));
  EXPECT_TRUE(bit_equal(last.ema_params, r.last.ema_params));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace difflob
