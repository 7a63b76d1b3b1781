#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "difflob/ingest.hpp"

namespace difflob {

/// Future-window descriptors: scalar trend and volatility (price units),
/// per-step liquidity (shares) and imbalance (in [-1, 1]).
struct RegimeVector {
  double trend = 0.0;
  double vol = 0.0;
  std::vector<double> liq;
  std::vector<double> imb;

  bool operator==(const RegimeVector&) const = default;
};

enum class RegimeComponent { trend, vol, liq, imb };
enum class TailSide { high, low };

inline constexpr RegimeComponent kAllComponents[] = {RegimeComponent::trend, RegimeComponent::vol,
                                                     RegimeComponent::liq, RegimeComponent::imb};

std::string_view to_string(RegimeComponent c);
std::string_view to_string(TailSide s);
RegimeComponent parse_component(std::string_view name);
TailSide parse_side(std::string_view name);

double trend(std::span<const double> returns);
/// Population (divide-by-n) standard deviation.
double volatility(std::span<const double> returns);
double liquidity(const LobSnapshot& snap);
/// (sum ask - sum bid) / (sum ask + sum bid); 0 for an empty book.
double imbalance(const LobSnapshot& snap);

/// Regime from explicit per-step returns and the matching books.
RegimeVector regime_from_returns(std::span<const double> returns, std::span<const LobSnapshot> books);

/// Regime of a future window given the mid just before it.
RegimeVector compute_regime(double anchor_mid, std::span<const LobSnapshot> future);

/// Scalar summary used to rank windows: the value itself for trend/vol, the
/// per-step mean for liq/imb.
double component_summary(const RegimeVector& r, RegimeComponent c);

/// z-score constants, fitted on the training split. liq and imb pool all steps.
struct RegimeStats {
  double trend_mean = 0.0, trend_std = 0.0;
  double vol_mean = 0.0, vol_std = 0.0;
  double liq_mean = 0.0, liq_std = 0.0;
  double imb_mean = 0.0, imb_std = 0.0;

  bool fitted() const noexcept { return trend_std > 0 && vol_std > 0 && liq_std > 0 && imb_std > 0; }
  bool operator==(const RegimeStats&) const = default;
};

RegimeStats fit_regime_stats(std::span<const RegimeVector> training);
RegimeVector normalize(const RegimeVector& regime, const RegimeStats& stats);
RegimeVector denormalize(const RegimeVector& normalized, const RegimeStats& stats);

/// Intervention value for one component: scalar tail mean for trend/vol,
/// per-step mean profile (and its scalar mean) for liq/imb.
struct RegimeTarget {
  RegimeComponent component = RegimeComponent::trend;
  TailSide side = TailSide::high;
  double scalar = 0.0;
  std::vector<double> profile;
  std::size_t tail_count = 0;
};

/// Mean of the component over the top (or bottom) q fraction of windows.
RegimeTarget regime_quantile_targets(std::span<const RegimeVector> training, RegimeComponent component,
                                     TailSide side, double q);

/// Returns `base` with `component` replaced by the target.
RegimeVector apply_target(const RegimeVector& base, const RegimeTarget& target);

/// Tail thresholds on the component summary: values at or above `high` are in
/// the top-q tail, at or below `low` in the bottom-q tail.
struct TailThresholds {
  double low = 0.0;
  double high = 0.0;
};
TailThresholds tail_thresholds(std::span<const RegimeVector> training, RegimeComponent component, double q);

}  // namespace difflob
