#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "difflob/checkpoint.hpp"
#include "difflob/downstream.hpp"
#include "difflob/evaluation.hpp"
#include "difflob/generator.hpp"
#include "difflob/ingest.hpp"
#include "difflob/io.hpp"
#include "difflob/network.hpp"
#include "difflob/preprocess.hpp"
#include "difflob/training.hpp"

namespace difflob::cli {

/// Where snapshot series come from.
struct DataConfig {
  std::string source = "synthetic";  // synthetic | lobster
  SynthConfig synth;                 // day d uses synth.seed + d
  int synthetic_days = 3;
  std::vector<std::string> orderbooks;  // LOBSTER orderbook CSVs, one per day
  int levels = 10;                      // LOBSTER depth to read
  double tick = 100.0;                  // price units
};

/// How series become window datasets. With several series the last
/// `test_days` go to test and the `val_days` before them to validation;
/// a single series is cut by fraction.
struct SplitConfig {
  int val_days = 1;
  int test_days = 1;
  double train_frac = 0.8;
  double val_frac = 0.1;
  std::size_t stride = 1;       // training windows
  std::size_t eval_stride = 1;  // validation and test windows
};

struct EvalConfig {
  double q = 0.2;
  std::size_t realism_windows = 400;  // 0 for every test window
  std::size_t cf_histories = 200;     // per scenario
  std::size_t usefulness_cf = 100;    // histories per side and task
  std::size_t usefulness_max_train = 0;
  bool baseline = true;  // realism of an untrained network with the same shape
  std::vector<RegimeComponent> components{kAllComponents, kAllComponents + 4};
};

/// Everything a command needs. Training seeds and evaluation seeds are all
/// derived from `seed`; the per-stage seed fields are overwritten.
struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  SplitConfig split;
  ModelConfig model;
  TrainConfig stage1;
  TrainConfig stage2;
  std::string stages = "both";  // 1 | 2 | both
  GeneratorOptions sample;
  EvalConfig eval;
  bool verbose = false;
};

void validate(const RunConfig& config);
io::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const io::json& doc, RunConfig defaults = {});

/// Seeds for every random consumer of a run.
struct RunSeeds {
  std::uint64_t stage1, stage2, realism, baseline_init, baseline, counterfactual, usefulness;
};
RunSeeds derive_seeds(std::uint64_t seed);

/// Series in chronological order.
std::vector<SnapshotSeries> ingest_series(const DataConfig& config);

struct Dataset {
  PreprocessStats stats;
  std::vector<WindowPair> train, val, test;
};

Dataset build_dataset(const std::vector<SnapshotSeries>& series, const SplitConfig& split, double tick);
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

struct TrainedModel {
  Checkpoint final;  // stage-2 checkpoint when stage 2 ran, else stage 1
  std::optional<Checkpoint> stage1;
};

/// Runs the configured stages. `stage1_in` is required when only stage 2 runs.
TrainedModel train_model(const Dataset& data, const RunConfig& config, const Checkpoint* stage1_in,
                         const std::filesystem::path& out);

struct PipelineReports {
  EvalReport realism;
  std::optional<EvalReport> baseline;
  CounterfactualReport counterfactual;
  UsefulnessTable usefulness;
};

/// Evaluates a checkpoint and writes realism/, baseline/, counterfactual/
/// and usefulness/ under `out`.
PipelineReports evaluate_all(const Checkpoint& checkpoint, const Dataset& data, const RunConfig& config,
                             const std::filesystem::path& out);

/// ingest -> preprocess -> train -> evaluate into a fresh directory.
PipelineReports run_pipeline(const RunConfig& config, const std::filesystem::path& out);

/// Larger allocator thresholds; the training loop churns large temporaries.
void tune_allocator();

/// Entry point of the command-line tool; returns the process exit code.
int run(int argc, char** argv);

}  // namespace difflob::cli
