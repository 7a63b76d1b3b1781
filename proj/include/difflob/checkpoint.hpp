#pragma once

#include <filesystem>

#include "difflob/diffusion.hpp"
#include "difflob/io.hpp"
#include "difflob/network.hpp"
#include "difflob/preprocess.hpp"

namespace difflob {

/// Trained model state. `params` holds both groups (base and, when the
/// config enables it, control) tagged by ParamGroup; `ema_params` is the
/// shadow copy with identical names and shapes.
struct Checkpoint {
  ModelConfig config;
  DiffusionSchedule schedule;
  PreprocessStats preprocess;
  int stage = 1;
  ParameterSet<float> params;
  ParameterSet<float> ema_params;

  /// Denoiser built from the trained or the EMA weights.
  Denoiser<float> model(bool ema = true) const;
};

io::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const io::json& doc);

/// Directory layout: manifest.json plus params/<name>.f32le and
/// ema/<name>.f32le for every parameter listed in the manifest.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace difflob
