#include "difflob/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "difflob/error.hpp"
#include "difflob/generator.hpp"

namespace difflob {

namespace fs = std::filesystem;

void validate(const TrainConfig& c) {
  if (!(c.lr > 0)) throw ConfigError("lr must be positive");
  if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (c.patience < 1) throw ConfigError("patience must be at least 1");
  if (!(c.min_delta >= 0)) throw ConfigError("min_delta must be non-negative");
  if (!(c.ema_decay > 0 && c.ema_decay < 1)) throw ConfigError("ema_decay must lie in (0, 1)");
  if (!(c.cond_drop_p >= 0 && c.cond_drop_p <= 1)) throw ConfigError("cond_drop_p must lie in [0, 1]");
  if (c.max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (c.stage != 1 && c.stage != 2) throw ConfigError("stage must be 1 or 2");
  if (c.val_stride < 1) throw ConfigError("val_stride must be positive");
}

io::json to_json(const TrainConfig& c) {
  io::json j = {{"lr", c.lr},
                {"batch_size", c.batch_size},
                {"patience", c.patience},
                {"ema_decay", c.ema_decay},
                {"ema_warmup", c.ema_warmup},
                {"cond_drop_p", c.cond_drop_p},
                {"max_epochs", c.max_epochs},
                {"seed", c.seed},
                {"stage", c.stage},
                {"val_stride", c.val_stride}};
  // JSON has no infinity; an infinite threshold is written as null.
  j["min_delta"] = std::isfinite(c.min_delta) ? io::json(c.min_delta) : io::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const io::json& doc, TrainConfig c) {
  auto read = [&doc](const char* key, auto& field) {
    if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
  };
  read("lr", c.lr);
  read("batch_size", c.batch_size);
  read("patience", c.patience);
  if (doc.contains("min_delta")) {
    c.min_delta = doc.at("min_delta").is_null() ? std::numeric_limits<double>::infinity()
                                                 : doc.at("min_delta").get<double>();
  }
  read("ema_decay", c.ema_decay);
  read("ema_warmup", c.ema_warmup);
  read("cond_drop_p", c.cond_drop_p);
  read("max_epochs", c.max_epochs);
  read("seed", c.seed);
  read("stage", c.stage);
  read("val_stride", c.val_stride);
  read("verbose", c.verbose);
  return c;
}

double effective_ema_decay(const TrainConfig& config, std::size_t steps_done) {
  if (!config.ema_warmup) return config.ema_decay;
  const double n = static_cast<double>(steps_done);
  return std::min(config.ema_decay, (1.0 + n) / (10.0 + n));
}

void ema_update(ParameterSet<float>& shadow, const ParameterSet<float>& params, double decay) {
  std::vector<std::size_t> all(params.size());
  std::iota(all.begin(), all.end(), 0);
  ema_update(shadow, params, decay, all);
}

void ema_update(ParameterSet<float>& shadow, const ParameterSet<float>& params, double decay,
                std::span<const std::size_t> indices) {
  if (shadow.size() != params.size()) throw ConfigError("EMA shadow does not match parameters");
  const auto d = static_cast<float>(decay);
  const auto keep = static_cast<float>(1.0 - decay);
  for (std::size_t i : indices) {
    if (i >= params.size()) throw ConfigError("EMA index out of range");
    if (decay == 1.0) continue;
    if (decay == 0.0) {
      shadow[i].value = params[i].value;
    } else {
      shadow[i].value = d * shadow[i].value + keep * params[i].value;
    }
  }
}

Adam::Adam(const ParameterSet<float>& params, std::vector<std::size_t> trainable, double lr, double beta1,
           double beta2, double eps)
    : trainable_(std::move(trainable)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (std::size_t i : trainable_) {
    m_.push_back(Mat<float>::Zero(params[i].value.rows(), params[i].value.cols()));
    v_.push_back(Mat<float>::Zero(params[i].value.rows(), params[i].value.cols()));
  }
}

void Adam::step(ParameterSet<float>& params, const Gradients<float>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1_);
  const auto b2 = static_cast<float>(beta2_);
  const auto step = static_cast<float>(lr_ / c1);
  const auto root_c2 = static_cast<float>(std::sqrt(c2));
  const auto eps = static_cast<float>(eps_);
  for (std::size_t k = 0; k < trainable_.size(); ++k) {
    const auto& g = grads.values[trainable_[k]];
    m_[k] = b1 * m_[k] + (1.0f - b1) * g;
    v_[k] = b2 * v_[k] + (1.0f - b2) * g.cwiseProduct(g);
    params[trainable_[k]].value.array() -= step * m_[k].array() / (v_[k].array().sqrt() / root_c2 + eps);
  }
}

std::vector<std::uint8_t> draw_condition_mask(std::mt19937_64& rng, std::size_t batch, double p) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::uint8_t> keep(batch);
  for (auto& k : keep) k = u(rng) < p ? 0 : 1;
  return keep;
}

namespace {

// Stable identity of a window used to seed its validation noise.
std::uint64_t window_fingerprint(const WindowPair& w) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  mix(&w.anchor_mid, sizeof w.anchor_mid);
  const auto hist = w.history.data();
  mix(hist.data(), hist.size_bytes());
  const auto fut = w.future.data();
  mix(fut.data(), std::min<std::size_t>(fut.size_bytes(), 64));
  return h;
}

struct NoisedBatch {
  Mat<float> xt;
  Mat<float> noise;
  std::vector<double> t;
};

NoisedBatch noise_batch(const Mat<float>& x0, const std::vector<int>& levels, const DiffusionSchedule& schedule,
                        Eigen::Index per_sample, std::mt19937_64& rng) {
  NoisedBatch nb;
  nb.noise.resize(x0.rows(), x0.cols());
  fill_normal(nb.noise, rng);
  nb.xt.resize(x0.rows(), x0.cols());
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const auto cols = static_cast<Eigen::Index>(s) * per_sample;
    // Same arithmetic as forward_perturb, applied per sample.
    const Mat<float> a = x0.middleCols(cols, per_sample);
    const Mat<float> z = nb.noise.middleCols(cols, per_sample);
    nb.xt.middleCols(cols, per_sample) = forward_perturb(a, schedule, levels[s], z);
    nb.t.push_back(schedule.time_of(levels[s]));
  }
  return nb;
}

std::string batch_stats(const Mat<float>& x) {
  const double mean = x.mean();
  const double sq = x.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, x.size()));
  std::ostringstream os;
  os << "batch mean " << mean << ", rms " << std::sqrt(sq) << ", max |x| " << x.cwiseAbs().maxCoeff();
  return os.str();
}

void write_metrics(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,lr,wall_s\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << io::format_double(r.train_loss) << ',' << io::format_double(r.val_loss) << ','
       << io::format_double(r.lr) << ',' << io::format_double(r.wall_s) << '\n';
  }
  io::write_text(path, os.str());
}

}  // namespace

double validation_loss(const Denoiser<float>& model, ForwardMode mode, const DiffusionSchedule& schedule,
                       const std::vector<WindowPair>& val, const PreprocessStats& stats, std::uint64_t seed,
                       std::size_t stride, int batch_size) {
  if (val.empty()) throw DataError("empty validation set");
  const ModelConfig& mc = model.config();
  const Eigen::Index per_sample = static_cast<Eigen::Index>(mc.levels) * mc.tau;
  std::vector<const WindowPair*> chosen;
  for (std::size_t i = 0; i < val.size(); i += stride) chosen.push_back(&val[i]);
  double total = 0.0;
  for (std::size_t first = 0; first < chosen.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch_size), chosen.size() - first);
    std::vector<ConditionBundle> bundles;
    Mat<float> x0(2, static_cast<Eigen::Index>(n) * per_sample);
    Mat<float> xt(x0.rows(), x0.cols()), noise(x0.rows(), x0.cols());
    std::vector<double> t;
    for (std::size_t s = 0; s < n; ++s) {
      const WindowPair& w = *chosen[first + s];
      bundles.push_back(observed_bundle(w));
      write_model_target(x0, static_cast<Eigen::Index>(s), w.future, stats);
      std::mt19937_64 rng(window_fingerprint(w) ^ (seed * 0x9e3779b97f4a7c15ull));
      const int level = std::uniform_int_distribution<int>(0, schedule.steps() - 1)(rng);
      const auto cols = static_cast<Eigen::Index>(s) * per_sample;
      Mat<float> z(2, per_sample);
      fill_normal(z, rng);
      const Mat<float> a = x0.middleCols(cols, per_sample);
      xt.middleCols(cols, per_sample) = forward_perturb(a, schedule, level, z);
      noise.middleCols(cols, per_sample) = z;
      t.push_back(schedule.time_of(level));
    }
    const auto cond = make_condition_batch(bundles, stats, mc.tau);
    const Mat<float> eps = model.forward(xt, t, cond, mode);
    for (std::size_t s = 0; s < n; ++s) {
      const auto cols = static_cast<Eigen::Index>(s) * per_sample;
      total += dsm_loss(eps.middleCols(cols, per_sample), noise.middleCols(cols, per_sample));
    }
  }
  return total / static_cast<double>(chosen.size());
}

TrainResult train_stage(const std::vector<WindowPair>& train, const std::vector<WindowPair>& val,
                        const TrainConfig& config, const ModelConfig& model_config, const PreprocessStats& stats,
                        const Checkpoint* checkpoint_in, const fs::path* run_dir) {
  validate(config);
  if (train.empty()) throw DataError("empty training set");
  if (val.empty()) throw DataError("empty validation set");

  Checkpoint ckpt;
  std::optional<Denoiser<float>> model;
  if (config.stage == 1) {
    ckpt.config = model_config_for(stats, model_config);
    ckpt.schedule = build_schedule();
    ckpt.preprocess = stats;
    model.emplace(ckpt.config, config.seed);
  } else {
    if (!checkpoint_in || checkpoint_in->stage != 1) throw ConfigError("stage 2 requires a stage-1 checkpoint");
    if (!checkpoint_in->config.use_control) throw ConfigError("stage 2 requires a model with a control pathway");
    ckpt.config = checkpoint_in->config;
    ckpt.schedule = checkpoint_in->schedule;
    ckpt.preprocess = checkpoint_in->preprocess;
    model.emplace(checkpoint_in->model(true));
    model->init_control_from_base();
  }
  ckpt.stage = config.stage;
  validate(ckpt.config);

  const ParamGroup group = config.stage == 1 ? ParamGroup::base : ParamGroup::control;
  const TrainableGroups groups{config.stage == 1, config.stage == 2};
  const ForwardMode mode = config.stage == 1 ? ForwardMode::base : ForwardMode::controlled;
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model->params().size(); ++i) {
    if (model->params()[i].group == group) trainable.push_back(i);
  }
  Adam adam(model->params(), trainable, config.lr);
  ParameterSet<float> ema = model->params();
  auto grads = Gradients<float>::like(model->params());

  if (run_dir) {
    fs::create_directories(*run_dir);
    io::write_json(*run_dir / "config.json", {{"train", to_json(config)}, {"model", to_json(ckpt.config)}});
  }

  const ModelConfig& mc = ckpt.config;
  const Eigen::Index per_sample = static_cast<Eigen::Index>(mc.levels) * mc.tau;
  std::mt19937_64 rng(config.seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  ParameterSet<float> best_params = model->params();
  ParameterSet<float> best_ema = ema;
  const auto start = std::chrono::steady_clock::now();
  Denoiser<float>::Cache cache;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t n = std::min(static_cast<std::size_t>(config.batch_size), order.size() - first);
      const auto keep = draw_condition_mask(rng, n, config.cond_drop_p);
      std::vector<ConditionBundle> bundles;
      bundles.reserve(n);
      Mat<float> x0(2, static_cast<Eigen::Index>(n) * per_sample);
      for (std::size_t s = 0; s < n; ++s) {
        const WindowPair& w = train[order[first + s]];
        auto b = observed_bundle(w);
        b.present = keep[s] != 0;
        bundles.push_back(std::move(b));
        write_model_target(x0, static_cast<Eigen::Index>(s), w.future, stats);
        result.dropped_conditions += keep[s] ? 0 : 1;
      }
      result.seen_conditions += n;
      std::vector<int> levels(n);
      std::uniform_int_distribution<int> pick(0, ckpt.schedule.steps() - 1);
      for (auto& l : levels) l = pick(rng);
      const NoisedBatch nb = noise_batch(x0, levels, ckpt.schedule, per_sample, rng);
      const auto cond = make_condition_batch(bundles, stats, mc.tau);
      const Mat<float> eps = model->forward(nb.xt, nb.t, cond, mode, &cache);
      const double loss = dsm_loss(eps, nb.noise);
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << epoch << ", step " << result.steps + 1 << " (lr " << adam.lr()
           << "; " << batch_stats(x0) << ")";
        throw NumericalError(os.str());
      }
      grads.zero();
      model->backward(dsm_loss_grad(eps, nb.noise), cache, grads, groups);
      adam.step(model->params(), grads);
      ema_update(ema, model->params(), effective_ema_decay(config, result.steps), trainable);
      loss_sum += loss * static_cast<double>(n);
      ++result.steps;
    }

    const Denoiser<float> ema_model(mc, ema);
    const double val_loss =
        validation_loss(ema_model, mode, ckpt.schedule, val, stats, config.seed, config.val_stride);
    if (!std::isfinite(val_loss)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val_loss = val_loss;
    rec.lr = adam.lr();
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (config.verbose) {
      std::cerr << "stage " << config.stage << " epoch " << epoch << ": train " << rec.train_loss << ", val "
                << rec.val_loss << ", " << rec.wall_s << " s\n";
    }

    const bool improved = epoch == 1 || val_loss < best - config.min_delta;
    if (improved) {
      best = val_loss;
      stale = 0;
      result.best_epoch = epoch;
      best_params = model->params();
      best_ema = ema;
    } else {
      ++stale;
    }
    if (run_dir) {
      write_metrics(*run_dir / "metrics.csv", result.history);
      if (improved) {
        ckpt.params = best_params;
        ckpt.ema_params = best_ema;
        save_checkpoint(ckpt, *run_dir / "best");
      }
    }
    if (stale >= config.patience) break;
  }

  result.last = ckpt;
  result.last.params = model->params();
  result.last.ema_params = ema;
  result.checkpoint = ckpt;
  result.checkpoint.params = std::move(best_params);
  result.checkpoint.ema_params = std::move(best_ema);
  if (run_dir) save_checkpoint(result.last, *run_dir / "last");
  return result;
}

}  // namespace difflob
