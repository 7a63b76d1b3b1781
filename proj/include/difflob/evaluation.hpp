#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difflob/generator.hpp"
#include "difflob/io.hpp"
#include "difflob/metrics.hpp"
#include "difflob/preprocess.hpp"
#include "difflob/regimes.hpp"

namespace difflob {

/// Real and generated histograms over one shared range.
struct HistogramPair {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<double> real;
  std::vector<double> generated;
};

inline constexpr int kFactBins = 50;
inline constexpr int kAcfLags = 20;
inline const std::vector<int> kReturnHorizons{1, 5, 10};

struct StylizedFacts {
  std::vector<int> horizons;
  std::vector<HistogramPair> returns;  // one per horizon, mid changes in price units
  HistogramPair spread;
  std::vector<double> acf_real;  // |r| autocorrelation, lags 1..kAcfLags
  std::vector<double> acf_generated;
  Eigen::MatrixXd volume_diff_corr_real;  // 2K x 2K, ask levels then bid levels
  Eigen::MatrixXd volume_diff_corr_generated;
  std::vector<HistogramPair> level_volume;  // per book row
};

/// Pools decoded windows into the stylized-fact curves.
StylizedFacts stylized_facts(const std::vector<DecodedWindow>& real, const std::vector<DecodedWindow>& generated,
                             int bins = kFactBins);

/// The |r| ACF of each window averaged over windows; windows with constant
/// |r| are skipped. Empty when no window qualifies.
std::vector<double> mean_abs_return_acf(const std::vector<DecodedWindow>& windows, int max_lag = kAcfLags);

struct RegimeComparison {
  RegimeComponent component = RegimeComponent::trend;
  DistanceQuad distance;
  double mean_real = 0.0;
  double mean_generated = 0.0;
};

struct EvalReport {
  std::string scenario;
  std::size_t n_real = 0;
  std::size_t n_generated = 0;
  DistanceQuad price;
  DistanceQuad volume;
  std::vector<RegimeComparison> regimes;
  StylizedFacts facts;
  std::size_t clamp_count = 0;
};

/// Decoded real future and its pooled features.
struct DecodedSet {
  std::vector<DecodedWindow> windows;
  std::vector<double> price_features;
  std::vector<double> volume_features;
  std::vector<RegimeVector> regimes;
  std::size_t clamp_count = 0;
};

/// Decodes encoded futures against their anchors, re-encodes the decoded
/// books and pools the price and volume rows.
DecodedSet decode_set(const std::vector<EncodedBlock>& futures, const std::vector<double>& anchors,
                      const PreprocessStats& stats);

/// Compares a generated set with a real set.
EvalReport compare_sets(const std::string& scenario, const DecodedSet& real, const DecodedSet& generated);

/// Evenly spaced subset of at most `max_count` windows (all when 0).
std::vector<const WindowPair*> spaced_subset(const std::vector<WindowPair>& windows, std::size_t max_count);

/// One generation per test window conditioned on its observed regime.
EvalReport realism_eval(TrajectoryGenerator& generator, const std::vector<WindowPair>& test, std::uint64_t seed,
                        std::size_t max_windows = 0);

struct CounterfactualScenario {
  RegimeComponent component = RegimeComponent::trend;
  TailSide side = TailSide::high;
  RegimeTarget target;
  EvalReport report;                   // generated pool vs real test windows in the same tail
  std::vector<double> realized;        // component summary of each generated window
};

struct DirectionalResult {
  RegimeComponent component = RegimeComponent::trend;
  double mean_high = 0.0;
  double mean_low = 0.0;
  double statistic = 0.0;  // mean_high - mean_low
  TTestResult test;
  std::size_t n_high = 0;
  std::size_t n_low = 0;
  bool sign_correct() const { return statistic > 0 && test.p_value < 0.01; }
};

struct CounterfactualReport {
  double q = 0.2;
  std::vector<CounterfactualScenario> scenarios;  // component-major, high then low
  std::vector<DirectionalResult> directional;
};

/// Generates under top-q and bottom-q interventions of each component for
/// up to `max_histories` test histories, other components held at their
/// observed values. Tails of the real comparison pool use training-set
/// thresholds.
CounterfactualReport counterfactual_eval(TrajectoryGenerator& generator, const std::vector<WindowPair>& train,
                                         const std::vector<WindowPair>& test,
                                         const std::vector<RegimeComponent>& components, double q,
                                         std::size_t max_histories, std::uint64_t seed);

io::json to_json(const DistanceQuad& d);
io::json to_json(const EvalReport& report);  // without the stylized-fact curves
io::json to_json(const CounterfactualReport& report);

/// Writes report.json, realism_table.csv, regime_distances.csv and one CSV
/// per stylized-fact panel under facts/.
void write_realism_report(const EvalReport& report, const std::filesystem::path& dir);
/// Writes report.json, counterfactual_table.csv and directional.csv.
void write_counterfactual_report(const CounterfactualReport& report, const std::filesystem::path& dir);

}  // namespace difflob
