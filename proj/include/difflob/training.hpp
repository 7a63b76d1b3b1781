#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "difflob/checkpoint.hpp"
#include "difflob/io.hpp"
#include "difflob/preprocess.hpp"

namespace difflob {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 128;
  int patience = 100;  // epochs without an improvement of at least min_delta
  double min_delta = 0.001;
  double ema_decay = 0.999;
  // Caps the decay at (1 + n) / (10 + n) after n steps so the shadow forgets
  // the initialization on short runs.
  bool ema_warmup = true;
  double cond_drop_p = 0.5;
  int max_epochs = 200;
  std::uint64_t seed = 0;
  int stage = 1;
  // Validation uses every `val_stride`-th validation window, each with a
  // fixed noise level and noise draw derived from `seed` and its index.
  std::size_t val_stride = 1;
  bool verbose = false;
};

void validate(const TrainConfig& config);
io::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const io::json& doc, TrainConfig defaults = {});

/// Decay used for the EMA update that follows `steps_done` optimizer steps.
double effective_ema_decay(const TrainConfig& config, std::size_t steps_done);

/// shadow <- decay * shadow + (1 - decay) * params, elementwise.
void ema_update(ParameterSet<float>& shadow, const ParameterSet<float>& params, double decay);
/// Same, restricted to the listed parameters; the rest of the shadow keeps its bits.
void ema_update(ParameterSet<float>& shadow, const ParameterSet<float>& params, double decay,
                std::span<const std::size_t> indices);

/// Adam with bias correction over a subset of parameters.
class Adam {
 public:
  Adam(const ParameterSet<float>& params, std::vector<std::size_t> trainable, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step(ParameterSet<float>& params, const Gradients<float>& grads);
  double lr() const noexcept { return lr_; }
  long steps() const noexcept { return t_; }

 private:
  std::vector<std::size_t> trainable_;
  std::vector<Mat<float>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Per-sample keep mask for condition dropout: each entry is 0 with probability p.
std::vector<std::uint8_t> draw_condition_mask(std::mt19937_64& rng, std::size_t batch, double p);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double wall_s = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;  // best-val raw weights with the EMA shadow of that epoch
  Checkpoint last;        // final epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  std::size_t steps = 0;
  std::size_t dropped_conditions = 0;
  std::size_t seen_conditions = 0;
};

/// Mean validation loss of a model on fixed per-window noise. Invariant to
/// the order of `val`.
double validation_loss(const Denoiser<float>& model, ForwardMode mode, const DiffusionSchedule& schedule,
                       const std::vector<WindowPair>& val, const PreprocessStats& stats, std::uint64_t seed,
                       std::size_t stride = 1, int batch_size = 128);

/// Runs one training stage. Stage 1 starts from a fresh model of shape
/// `model_config` (levels and tau are taken from the data); stage 2
/// requires a stage-1 checkpoint, freezes its EMA base weights and trains
/// the control group. With `run_dir`, writes config.json, metrics.csv and
/// best/ and last/ checkpoints there.
TrainResult train_stage(const std::vector<WindowPair>& train, const std::vector<WindowPair>& val,
                        const TrainConfig& config, const ModelConfig& model_config, const PreprocessStats& stats,
                        const Checkpoint* checkpoint_in, const std::filesystem::path* run_dir = nullptr);

}  // namespace difflob
