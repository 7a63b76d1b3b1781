#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "difflob/checkpoint.hpp"
#include "difflob/diffusion.hpp"
#include "difflob/network.hpp"
#include "difflob/preprocess.hpp"

namespace difflob {

/// Everything the denoiser is conditioned on for one trajectory. The regime
/// is in physical units; `clock` supplies the time of day of the future steps
/// (only its tod columns are read).
struct ConditionBundle {
  const EncodedBlock* history = nullptr;
  const EncodedBlock* clock = nullptr;
  RegimeVector regime;
  bool present = true;
};

/// Bundle carrying a window's own history, clock and observed regime.
ConditionBundle observed_bundle(const WindowPair& window);

ModelConfig model_config_for(const PreprocessStats& stats, ModelConfig base);

/// Model-space batch of conditions. Local inputs per future step are the
/// standardized history step, the standardized last history step, the
/// normalized liquidity and imbalance, and the future time of day.
ConditionBatch<float> make_condition_batch(std::span<const ConditionBundle> bundles, const PreprocessStats& stats,
                                           int tau);

/// Writes the standardized future of a window into sample `slot` of a
/// [2 x (B * levels * tau)] model tensor.
void write_model_target(Mat<float>& x, Eigen::Index slot, const EncodedBlock& future, const PreprocessStats& stats);

/// Inverse of write_model_target; tod columns are copied from `clock`.
EncodedBlock read_model_output(const Mat<float>& x, Eigen::Index slot, const EncodedBlock& clock,
                               const PreprocessStats& stats);

/// Produces encoded future blocks for a list of condition bundles. Outputs
/// depend only on the bundles and the seed.
class TrajectoryGenerator {
 public:
  virtual ~TrajectoryGenerator() = default;
  virtual std::vector<EncodedBlock> generate(std::span<const ConditionBundle> bundles, std::uint64_t seed) = 0;
  virtual const PreprocessStats& stats() const = 0;
};

struct GeneratorOptions {
  double guidance = 1.0;
  int batch_size = 32;
  bool use_ema = true;
};

/// Reverse-diffusion sampler around a denoiser. Uses the controlled pathway
/// whenever the model carries control parameters that have been trained.
class DiffusionGenerator final : public TrajectoryGenerator {
 public:
  DiffusionGenerator(const Checkpoint& checkpoint, GeneratorOptions options);
  DiffusionGenerator(Denoiser<float> model, DiffusionSchedule schedule, PreprocessStats stats, ForwardMode mode,
                     GeneratorOptions options);

  std::vector<EncodedBlock> generate(std::span<const ConditionBundle> bundles, std::uint64_t seed) override;
  const PreprocessStats& stats() const override { return stats_; }

 private:
  Denoiser<float> model_;
  DiffusionSchedule schedule_;
  PreprocessStats stats_;
  ForwardMode mode_;
  GeneratorOptions options_;
};

/// Returns each bundle's clock block, which for observed bundles is the real
/// future. The oracle stub for protocol checks: realism distances against
/// the same windows vanish.
class PassThroughGenerator final : public TrajectoryGenerator {
 public:
  explicit PassThroughGenerator(PreprocessStats stats) : stats_(std::move(stats)) {}
  std::vector<EncodedBlock> generate(std::span<const ConditionBundle> bundles, std::uint64_t seed) override;
  const PreprocessStats& stats() const override { return stats_; }

 private:
  PreprocessStats stats_;
};

/// Sampler around a freshly initialized network with the checkpoint's shape.
std::unique_ptr<TrajectoryGenerator> untrained_generator(const Checkpoint& like, std::uint64_t init_seed,
                                                         GeneratorOptions options);

}  // namespace difflob
