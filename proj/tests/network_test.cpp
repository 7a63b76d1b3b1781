#include "difflob/network.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "difflob/diffusion.hpp"
#include "difflob/error.hpp"

namespace difflob {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_blocks = 2;
  c.channels = 8;
  c.levels = 4;
  c.tau = 8;
  c.t_emb_dim = 8;
  c.local_dim = 6;
  c.global_dim = 5;
  c.dilation_cycle = 2;
  return c;
}

template <typename S>
ConditionBatch<S> random_condition(const ModelConfig& c, Eigen::Index batch, std::mt19937_64& rng) {
  ConditionBatch<S> cond;
  cond.local.resize(c.local_inputs(), batch * c.tau);
  cond.global.resize(2, batch);
  fill_normal(cond.local, rng);
  fill_normal(cond.global, rng);
  cond.present.assign(static_cast<std::size_t>(batch), 1);
  return cond;
}

template <typename S>
Mat<S> random_input(const ModelConfig& c, Eigen::Index batch, std::mt19937_64& rng) {
  Mat<S> x(2, batch * c.levels * c.tau);
  fill_normal(x, rng);
  return x;
}

template <typename S>
void randomize(ParameterSet<S>& params, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(n(rng));
  }
}

bool bit_equal(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

struct GradCheckResult {
  double worst = 0.0;
  std::size_t checked = 0;
};

GradCheckResult grad_check(Denoiser<double>& net, ForwardMode mode, TrainableGroups groups, std::uint64_t seed) {
  const ModelConfig& c = net.config();
  std::mt19937_64 rng(seed);
  const Eigen::Index batch = 2;
  auto cond = random_condition<double>(c, batch, rng);
  cond.present[1] = 0;
  const Mat<double> x = random_input<double>(c, batch, rng);
  Mat<double> noise(x.rows(), x.cols());
  fill_normal(noise, rng);
  const std::vector<double> t{0.3, 0.71};

  auto loss = [&] { return dsm_loss(net.forward(x, t, cond, mode), noise); };

  Denoiser<double>::Cache cache;
  const Mat<double> eps = net.forward(x, t, cond, mode, &cache);
  auto grads = Gradients<double>::like(net.params());
  net.backward(dsm_loss_grad(eps, noise), cache, grads, groups);

  GradCheckResult r;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    auto& p = net.params()[i];
    const bool trainable = p.group == ParamGroup::base ? groups.base : groups.control;
    const Eigen::Index n = p.value.size();
    const Eigen::Index probes = std::min<Eigen::Index>(n, 6);
    for (Eigen::Index k = 0; k < probes; ++k) {
      const auto j = static_cast<Eigen::Index>(u(rng) * static_cast<double>(n)) % n;
      const double saved = p.value.data()[j];
      const double h = 1e-5 * std::max(1.0, std::abs(saved));
      p.value.data()[j] = saved + h;
      const double lp = loss();
      p.value.data()[j] = saved - h;
      const double lm = loss();
      p.value.data()[j] = saved;
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = trainable ? grads.values[i].data()[j] : 0.0;
      if (!trainable) {
        EXPECT_EQ(grads.values[i].data()[j], 0.0) << p.name;
        continue;
      }
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
      const double rel = std::abs(numeric - analytic) / scale;
      EXPECT_LT(rel, 1e-3) << p.name << "[" << j << "] analytic " << analytic << " numeric " << numeric;
      r.worst = std::max(r.worst, rel);
      ++r.checked;
    }
  }
  return r;
}

TEST(NetworkTest, BaseGradientsMatchFiniteDifferences) {
  Denoiser<double> net(tiny_config(), 11);
  std::mt19937_64 rng(5);
  randomize(net.params(), rng, 0.4);
  const auto r = grad_check(net, ForwardMode::base, {true, false}, 21);
  EXPECT_GT(r.checked, 100u);
}

TEST(NetworkTest, ControlGradientsMatchFiniteDifferences) {
  Denoiser<double> net(tiny_config(), 12);
  std::mt19937_64 rng(6);
  randomize(net.params(), rng, 0.4);
  grad_check(net, ForwardMode::controlled, {false, true}, 22);
  grad_check(net, ForwardMode::controlled, {true, true}, 23);
}

TEST(NetworkTest, LongKernelsAndWideDilationsStillDifferentiate) {
  ModelConfig c = tiny_config();
  c.n_blocks = 4;
  c.kernel = 5;
  c.local_kernel = 5;
  c.dilation_cycle = 4;  // dilation 8 exceeds tau and must act as a 1x1 conv
  Denoiser<double> net(c, 13);
  std::mt19937_64 rng(7);
  randomize(net.params(), rng, 0.3);
  grad_check(net, ForwardMode::controlled, {true, true}, 24);
}

TEST(NetworkTest, FreshControlIsBitIdenticalToBase) {
  ModelConfig c = tiny_config();
  c.channels = 16;
  Denoiser<float> net(c, 3);
  std::mt19937_64 rng(8);
  // Move the base away from its initial state, as stage 1 would.
  randomize(net.params(), rng, 0.3);
  net.init_control_from_base();
  for (int trial = 0; trial < 3; ++trial) {
    auto cond = random_condition<float>(c, 3, rng);
    cond.present[static_cast<std::size_t>(trial)] = 0;
    const auto x = random_input<float>(c, 3, rng);
    const std::vector<double> t{0.01, 0.5, 1.0};
    EXPECT_TRUE(bit_equal(net.forward(x, t, cond, ForwardMode::base), net.forward(x, t, cond, ForwardMode::controlled)));
  }
}

TEST(NetworkTest, OutputShapeMatchesInputShape) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> pick(1, 6);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.n_blocks = pick(rng);
    c.channels = 2 * pick(rng);
    c.levels = pick(rng);
    c.tau = 2 * pick(rng);
    c.t_emb_dim = 2 * pick(rng);
    c.local_dim = pick(rng);
    c.global_dim = pick(rng);
    c.dilation_cycle = pick(rng);
    c.use_control = trial % 2 == 0;
    Denoiser<float> net(c, static_cast<std::uint64_t>(trial));
    const Eigen::Index batch = pick(rng);
    auto cond = random_condition<float>(c, batch, rng);
    const auto x = random_input<float>(c, batch, rng);
    const std::vector<double> t(static_cast<std::size_t>(batch), 0.4);
    const auto mode = c.use_control ? ForwardMode::controlled : ForwardMode::base;
    const auto y = net.forward(x, t, cond, mode);
    EXPECT_EQ(y.rows(), x.rows());
    EXPECT_EQ(y.cols(), x.cols());
  }
}

TEST(NetworkTest, DroppedConditionMasksRegimeValues) {
  const ModelConfig c = tiny_config();
  Denoiser<float> net(c, 4);
  std::mt19937_64 rng(10);
  randomize(net.params(), rng, 0.3);
  auto a = random_condition<float>(c, 2, rng);
  auto b = random_condition<float>(c, 2, rng);
  a.present = {0, 0};
  b.present = {0, 0};
  const auto x = random_input<float>(c, 2, rng);
  const std::vector<double> t{0.2, 0.9};
  EXPECT_TRUE(bit_equal(net.forward(x, t, a, ForwardMode::controlled), net.forward(x, t, b, ForwardMode::controlled)));
}

TEST(NetworkTest, NullFlagUsesLearnedEmbeddingNotZeroInput) {
  const ModelConfig c = tiny_config();
  Denoiser<float> net(c, 5);
  ConditionBatch<float> cond;
  cond.local = Mat<float>::Zero(c.local_inputs(), c.tau);
  cond.global = Mat<float>::Zero(2, 1);
  cond.present = {1};
  const auto f00 = net.encode_global(cond);
  cond.present = {0};
  const auto null = net.encode_global(cond);
  const auto idx = net.params().find("global.null");
  ASSERT_TRUE(idx.has_value());
  EXPECT_TRUE(null.isApprox(net.params()[*idx].value));
  EXPECT_FALSE(null.isApprox(f00));
}

TEST(NetworkTest, GlobalEncoderIsContinuous) {
  const ModelConfig c = tiny_config();
  Denoiser<double> net(c, 6);
  ConditionBatch<double> cond;
  cond.local = Mat<double>::Zero(c.local_inputs(), c.tau);
  cond.global = Mat<double>::Constant(2, 1, 0.3);
  cond.present = {1};
  const auto base = net.encode_global(cond);
  double prev = 1e300;
  for (double delta : {1e-2, 1e-4, 1e-6}) {
    cond.global(0, 0) = 0.3 + delta;
    const double diff = (net.encode_global(cond) - base).norm();
    EXPECT_LT(diff, prev);
    prev = diff;
  }
  EXPECT_LT(prev, 1e-5);
}

TEST(NetworkTest, PointwiseLocalEncoderCommutesWithTimePermutation) {
  ModelConfig c = tiny_config();
  c.local_kernel = 1;
  Denoiser<double> net(c, 7);
  std::mt19937_64 rng(11);
  auto cond = random_condition<double>(c, 1, rng);
  const auto before = net.encode_local(cond);
  cond.local.col(2).swap(cond.local.col(5));
  const auto after = net.encode_local(cond);
  EXPECT_TRUE(after.col(2).isApprox(before.col(5)));
  EXPECT_TRUE(after.col(5).isApprox(before.col(2)));
  EXPECT_TRUE(after.col(0).isApprox(before.col(0)));
}

TEST(NetworkTest, ZeroFinalLocalLayerGivesZeroEmbedding) {
  const ModelConfig c = tiny_config();
  Denoiser<float> net(c, 8);
  net.params()[*net.params().find("local.conv2.w")].value.setZero();
  ConditionBatch<float> cond;
  cond.local = Mat<float>::Zero(c.local_inputs(), c.tau);
  cond.global = Mat<float>::Zero(2, 1);
  cond.present = {1};
  EXPECT_EQ(net.encode_local(cond).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(NetworkTest, ForwardIsDeterministic) {
  const ModelConfig c = tiny_config();
  Denoiser<float> a(c, 9), b(c, 9);
  std::mt19937_64 rng(12);
  const auto cond = random_condition<float>(c, 2, rng);
  const auto x = random_input<float>(c, 2, rng);
  const std::vector<double> t{0.5, 0.6};
  EXPECT_TRUE(bit_equal(a.forward(x, t, cond, ForwardMode::base), b.forward(x, t, cond, ForwardMode::base)));
  EXPECT_TRUE(bit_equal(a.forward(x, t, cond, ForwardMode::base), a.forward(x, t, cond, ForwardMode::base)));
}

TEST(NetworkTest, ControlGroupIsSmallerThanBase) {
  const Denoiser<float> net(ModelConfig{}, 1);
  EXPECT_GT(net.params().scalar_count(ParamGroup::control), 0u);
  EXPECT_LT(net.params().scalar_count(ParamGroup::control), net.params().scalar_count(ParamGroup::base));
}

TEST(NetworkTest, ControlledModeNeedsControlParameters) {
  ModelConfig c = tiny_config();
  c.use_control = false;
  Denoiser<float> net(c, 2);
  std::mt19937_64 rng(13);
  const auto cond = random_condition<float>(c, 1, rng);
  const auto x = random_input<float>(c, 1, rng);
  EXPECT_THROW(net.forward(x, std::vector<double>{0.5}, cond, ForwardMode::controlled), ConfigError);
  EXPECT_THROW(net.forward(x.leftCols(3), std::vector<double>{0.5}, cond, ForwardMode::base), ConfigError);
}

TEST(NetworkTest, InvalidConfigsAreRejected) {
  ModelConfig c;
  c.n_blocks = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = ModelConfig{};
  c.channels = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = ModelConfig{};
  c.dropout_p = 1.5;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(TimestepFeaturesTest, ZeroTimeAlternatesZeroAndOne) {
  const auto f = timestep_features(0.0, 16);
  ASSERT_EQ(f.size(), 16u);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f[i], i % 2 == 0 ? 0.0 : 1.0);
}

TEST(TimestepFeaturesTest, DistinctOnTheLevelGrid) {
  const auto schedule = build_schedule();
  std::set<std::vector<double>> seen;
  for (int i = 0; i < schedule.steps(); ++i) {
    const auto f = timestep_features(schedule.time_of(i), 128);
    for (const auto& g : seen) {
      double d = 0;
      for (std::size_t k = 0; k < f.size(); ++k) d = std::max(d, std::abs(f[k] - g[k]));
      EXPECT_GT(d, 1e-3);
    }
    seen.insert(f);
  }
}

}  // namespace
}  // namespace difflob
