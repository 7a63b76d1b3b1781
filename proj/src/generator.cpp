#include "difflob/generator.hpp"

#include <random>

#include "difflob/error.hpp"

namespace difflob {

ConditionBundle observed_bundle(const WindowPair& window) {
  return {&window.history, &window.future, window.regime, true};
}

ModelConfig model_config_for(const PreprocessStats& stats, ModelConfig base) {
  base.levels = 2 * stats.levels;
  base.tau = static_cast<int>(kFutureLength);
  return base;
}

namespace {

void require_feature_stats(const PreprocessStats& stats) {
  if (stats.feature_mean.size() != 4 * static_cast<std::size_t>(stats.levels) ||
      stats.feature_std.size() != stats.feature_mean.size()) {
    throw ConfigError("preprocess statistics lack model input standardization");
  }
}

// Standardized row value of an encoded step: price rows first, then volume rows.
void standardized_step(const EncodedBlock& block, std::size_t step, const PreprocessStats& stats, float* out) {
  const std::size_t rows = block.rows();
  for (std::size_t j = 0; j < rows; ++j) {
    out[j] = static_cast<float>((block.price(step, j) - stats.feature_mean[j]) / stats.feature_std[j]);
    out[rows + j] =
        static_cast<float>((block.volume(step, j) - stats.feature_mean[rows + j]) / stats.feature_std[rows + j]);
  }
}

}  // namespace

ConditionBatch<float> make_condition_batch(std::span<const ConditionBundle> bundles, const PreprocessStats& stats,
                                           int tau) {
  require_feature_stats(stats);
  const std::size_t k = static_cast<std::size_t>(stats.levels);
  const Eigen::Index width = static_cast<Eigen::Index>(8 * k + 4);
  const auto b = static_cast<Eigen::Index>(bundles.size());
  ConditionBatch<float> cond;
  cond.local.resize(width, b * tau);
  cond.global.resize(2, b);
  cond.present.resize(bundles.size());
  for (Eigen::Index s = 0; s < b; ++s) {
    const auto& bundle = bundles[static_cast<std::size_t>(s)];
    if (!bundle.history || !bundle.clock) throw ConfigError("condition bundle is missing its history or clock");
    const EncodedBlock& hist = *bundle.history;
    const EncodedBlock& clock = *bundle.clock;
    if (hist.levels() != k || clock.levels() != k) throw ConfigError("condition bundle has the wrong level count");
    if (hist.steps() != static_cast<std::size_t>(tau) || clock.steps() != static_cast<std::size_t>(tau)) {
      throw ConfigError("condition bundle length does not match the model horizon");
    }
    if (bundle.regime.liq.size() != static_cast<std::size_t>(tau) ||
        bundle.regime.imb.size() != static_cast<std::size_t>(tau)) {
      throw ConfigError("per-step regime series must have one entry per future step");
    }
    const RegimeVector z = normalize(bundle.regime, stats.regime);
    std::vector<float> last(4 * k);
    standardized_step(hist, hist.steps() - 1, stats, last.data());
    for (int t = 0; t < tau; ++t) {
      float* col = cond.local.col(s * tau + t).data();
      standardized_step(hist, static_cast<std::size_t>(t), stats, col);
      std::copy(last.begin(), last.end(), col + 4 * k);
      col[8 * k] = static_cast<float>(z.liq[static_cast<std::size_t>(t)]);
      col[8 * k + 1] = static_cast<float>(z.imb[static_cast<std::size_t>(t)]);
      col[8 * k + 2] = clock.tod_sin(static_cast<std::size_t>(t));
      col[8 * k + 3] = clock.tod_cos(static_cast<std::size_t>(t));
    }
    cond.global(0, s) = static_cast<float>(z.trend);
    cond.global(1, s) = static_cast<float>(z.vol);
    cond.present[static_cast<std::size_t>(s)] = bundle.present ? 1 : 0;
  }
  return cond;
}

void write_model_target(Mat<float>& x, Eigen::Index slot, const EncodedBlock& future, const PreprocessStats& stats) {
  require_feature_stats(stats);
  const auto rows = static_cast<Eigen::Index>(future.rows());
  const auto tau = static_cast<Eigen::Index>(future.steps());
  const std::size_t r = future.rows();
  for (Eigen::Index l = 0; l < rows; ++l) {
    const auto j = static_cast<std::size_t>(l);
    const Eigen::Index base = (slot * rows + l) * tau;
    for (Eigen::Index t = 0; t < tau; ++t) {
      const auto step = static_cast<std::size_t>(t);
      x(0, base + t) = static_cast<float>((future.price(step, j) - stats.feature_mean[j]) / stats.feature_std[j]);
      x(1, base + t) =
          static_cast<float>((future.volume(step, j) - stats.feature_mean[r + j]) / stats.feature_std[r + j]);
    }
  }
}

EncodedBlock read_model_output(const Mat<float>& x, Eigen::Index slot, const EncodedBlock& clock,
                               const PreprocessStats& stats) {
  require_feature_stats(stats);
  EncodedBlock out(clock.steps(), clock.levels());
  const auto rows = static_cast<Eigen::Index>(out.rows());
  const auto tau = static_cast<Eigen::Index>(out.steps());
  const std::size_t r = out.rows();
  for (Eigen::Index l = 0; l < rows; ++l) {
    const auto j = static_cast<std::size_t>(l);
    const Eigen::Index base = (slot * rows + l) * tau;
    for (Eigen::Index t = 0; t < tau; ++t) {
      const auto step = static_cast<std::size_t>(t);
      out.price(step, j) = static_cast<float>(x(0, base + t) * stats.feature_std[j] + stats.feature_mean[j]);
      out.volume(step, j) = static_cast<float>(x(1, base + t) * stats.feature_std[r + j] + stats.feature_mean[r + j]);
    }
  }
  for (std::size_t t = 0; t < out.steps(); ++t) {
    out.tod_sin(t) = clock.tod_sin(t);
    out.tod_cos(t) = clock.tod_cos(t);
  }
  return out;
}

DiffusionGenerator::DiffusionGenerator(const Checkpoint& ckpt, GeneratorOptions options)
    : DiffusionGenerator(ckpt.model(options.use_ema), ckpt.schedule, ckpt.preprocess,
                         ckpt.stage == 2 && ckpt.config.use_control ? ForwardMode::controlled : ForwardMode::base,
                         options) {}

DiffusionGenerator::DiffusionGenerator(Denoiser<float> model, DiffusionSchedule schedule, PreprocessStats stats,
                                       ForwardMode mode, GeneratorOptions options)
    : model_(std::move(model)),
      schedule_(std::move(schedule)),
      stats_(std::move(stats)),
      mode_(mode),
      options_(options) {
  if (options_.batch_size < 1) throw ConfigError("generation batch size must be positive");
  if (model_.config().levels != 2 * stats_.levels) throw ConfigError("model and preprocess level counts disagree");
}

std::vector<EncodedBlock> DiffusionGenerator::generate(std::span<const ConditionBundle> bundles, std::uint64_t seed) {
  const ModelConfig& mc = model_.config();
  const Eigen::Index per_sample = static_cast<Eigen::Index>(mc.levels) * mc.tau;
  std::vector<EncodedBlock> out;
  out.reserve(bundles.size());
  const std::size_t chunk = static_cast<std::size_t>(options_.batch_size);
  for (std::size_t first = 0; first < bundles.size(); first += chunk) {
    const auto part = bundles.subspan(first, std::min(chunk, bundles.size() - first));
    const auto b = static_cast<Eigen::Index>(part.size());
    const ConditionBatch<float> cond = make_condition_batch(part, stats_, mc.tau);
    ConditionBatch<float> null = cond;
    std::fill(null.present.begin(), null.present.end(), std::uint8_t{0});
    std::vector<double> ts(part.size());
    const ScoreField score = [&](const Eigen::MatrixXf& x, double t, bool conditioned) {
      std::fill(ts.begin(), ts.end(), t);
      const int level = schedule_.level_of(t);
      const Eigen::MatrixXf eps = model_.forward(x, ts, conditioned ? cond : null, mode_);
      return eps_to_score(eps, schedule_, level);
    };
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(first)};
    std::mt19937_64 rng(seq);
    SampleOptions so;
    so.guidance = options_.guidance;
    // The sampler works on [dim x batch]; the model wants [2 x (batch * per_sample)].
    const ScoreField reshaped = [&](const Eigen::MatrixXf& x, double t, bool conditioned) {
      const Eigen::Map<const Eigen::MatrixXf> as_model(x.data(), 2, b * per_sample);
      const Eigen::MatrixXf s = score(as_model, t, conditioned);
      return Eigen::MatrixXf(Eigen::Map<const Eigen::MatrixXf>(s.data(), 2 * per_sample, b));
    };
    const Eigen::MatrixXf x = ancestral_sample(reshaped, schedule_, 2 * per_sample, b, rng, so);
    const Eigen::Map<const Eigen::MatrixXf> as_model(x.data(), 2, b * per_sample);
    const Mat<float> model_x = as_model;
    for (Eigen::Index s = 0; s < b; ++s) {
      out.push_back(read_model_output(model_x, s, *part[static_cast<std::size_t>(s)].clock, stats_));
    }
  }
  return out;
}

std::vector<EncodedBlock> PassThroughGenerator::generate(std::span<const ConditionBundle> bundles, std::uint64_t) {
  std::vector<EncodedBlock> out;
  out.reserve(bundles.size());
  for (const auto& b : bundles) {
    if (!b.clock) throw ConfigError("condition bundle is missing its clock");
    out.push_back(*b.clock);
  }
  return out;
}

std::unique_ptr<TrajectoryGenerator> untrained_generator(const Checkpoint& like, std::uint64_t init_seed,
                                                         GeneratorOptions options) {
  return std::make_unique<DiffusionGenerator>(Denoiser<float>(like.config, init_seed), like.schedule, like.preprocess,
                                              ForwardMode::base, options);
}

}  // namespace difflob
