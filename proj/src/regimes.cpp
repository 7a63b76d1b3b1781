#include "difflob/regimes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "difflob/error.hpp"

namespace difflob {

std::string_view to_string(RegimeComponent c) {
  switch (c) {
    case RegimeComponent::trend: return "trend";
    case RegimeComponent::vol: return "vol";
    case RegimeComponent::liq: return "liq";
    case RegimeComponent::imb: return "imb";
  }
  return "?";
}

std::string_view to_string(TailSide s) { return s == TailSide::high ? "high" : "low"; }

RegimeComponent parse_component(std::string_view name) {
  for (auto c : kAllComponents) {
    if (to_string(c) == name) return c;
  }
  throw ConfigError("unknown regime component '" + std::string(name) + "'");
}

TailSide parse_side(std::string_view name) {
  if (name == "high") return TailSide::high;
  if (name == "low") return TailSide::low;
  throw ConfigError("unknown tail side '" + std::string(name) + "'");
}

double trend(std::span<const double> returns) {
  if (returns.empty()) throw DataError("trend of an empty return series");
  return std::accumulate(returns.begin(), returns.end(), 0.0);
}

double volatility(std::span<const double> returns) {
  if (returns.empty()) throw DataError("volatility of an empty return series");
  const double n = static_cast<double>(returns.size());
  const double mean = std::accumulate(returns.begin(), returns.end(), 0.0) / n;
  // Centered two-pass form of sqrt(E[r^2] - E[r]^2); avoids cancellation.
  double ss = 0.0;
  for (double r : returns) ss += (r - mean) * (r - mean);
  return std::sqrt(ss / n);
}

double liquidity(const LobSnapshot& snap) {
  double total = 0.0;
  for (std::size_t i = 0; i < snap.levels(); ++i) total += snap.ask_volume[i] + snap.bid_volume[i];
  return total;
}

double imbalance(const LobSnapshot& snap) {
  double ask = 0.0, bid = 0.0;
  for (std::size_t i = 0; i < snap.levels(); ++i) {
    ask += snap.ask_volume[i];
    bid += snap.bid_volume[i];
  }
  const double total = ask + bid;
  return total > 0 ? (ask - bid) / total : 0.0;
}

RegimeVector regime_from_returns(std::span<const double> returns, std::span<const LobSnapshot> books) {
  if (returns.size() != books.size()) throw DataError("returns and books differ in length");
  RegimeVector r;
  r.trend = trend(returns);
  r.vol = volatility(returns);
  r.liq.reserve(books.size());
  r.imb.reserve(books.size());
  for (const auto& b : books) {
    r.liq.push_back(liquidity(b));
    r.imb.push_back(imbalance(b));
  }
  return r;
}

RegimeVector compute_regime(double anchor_mid, std::span<const LobSnapshot> future) {
  std::vector<double> returns;
  returns.reserve(future.size());
  double prev = anchor_mid;
  for (const auto& snap : future) {
    const double mid = (snap.ask_price[0] + snap.bid_price[0]) / 2.0;
    returns.push_back(mid - prev);
    prev = mid;
  }
  return regime_from_returns(returns, future);
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct Moments {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++n;
  }
  double mean() const { return sum / static_cast<double>(n); }
  double std() const {
    const double m = mean();
    return std::sqrt(std::max(0.0, sum_sq / static_cast<double>(n) - m * m));
  }
};

}  // namespace

double component_summary(const RegimeVector& r, RegimeComponent c) {
  switch (c) {
    case RegimeComponent::trend: return r.trend;
    case RegimeComponent::vol: return r.vol;
    case RegimeComponent::liq: return mean_of(r.liq);
    case RegimeComponent::imb: return mean_of(r.imb);
  }
  return 0.0;
}

RegimeStats fit_regime_stats(std::span<const RegimeVector> training) {
  if (training.empty()) throw DataError("cannot fit regime statistics on an empty set");
  Moments trend_m, vol_m, liq_m, imb_m;
  for (const auto& r : training) {
    trend_m.add(r.trend);
    vol_m.add(r.vol);
    for (double v : r.liq) liq_m.add(v);
    for (double v : r.imb) imb_m.add(v);
  }
  // Degenerate components get unit scale so normalization stays invertible.
  auto positive = [](double s) { return s > 1e-12 ? s : 1.0; };
  RegimeStats s;
  s.trend_mean = trend_m.mean();
  s.trend_std = positive(trend_m.std());
  s.vol_mean = vol_m.mean();
  s.vol_std = positive(vol_m.std());
  s.liq_mean = liq_m.mean();
  s.liq_std = positive(liq_m.std());
  s.imb_mean = imb_m.mean();
  s.imb_std = positive(imb_m.std());
  return s;
}

RegimeVector normalize(const RegimeVector& regime, const RegimeStats& s) {
  if (!s.fitted()) throw ConfigError("regime statistics are not fitted");
  RegimeVector out;
  out.trend = (regime.trend - s.trend_mean) / s.trend_std;
  out.vol = (regime.vol - s.vol_mean) / s.vol_std;
  out.liq.reserve(regime.liq.size());
  out.imb.reserve(regime.imb.size());
  for (double v : regime.liq) out.liq.push_back((v - s.liq_mean) / s.liq_std);
  for (double v : regime.imb) out.imb.push_back((v - s.imb_mean) / s.imb_std);
  return out;
}

RegimeVector denormalize(const RegimeVector& z, const RegimeStats& s) {
  if (!s.fitted()) throw ConfigError("regime statistics are not fitted");
  RegimeVector out;
  out.trend = z.trend * s.trend_std + s.trend_mean;
  out.vol = z.vol * s.vol_std + s.vol_mean;
  for (double v : z.liq) out.liq.push_back(v * s.liq_std + s.liq_mean);
  for (double v : z.imb) out.imb.push_back(v * s.imb_std + s.imb_mean);
  return out;
}

namespace {

std::vector<std::size_t> tail_indices(std::span<const RegimeVector> training, RegimeComponent component,
                                      TailSide side, double q) {
  if (!(q > 0.0 && q <= 0.5)) throw ConfigError("tail fraction q must lie in (0, 0.5]");
  const std::size_t n = training.size();
  const auto count = static_cast<std::size_t>(std::floor(q * static_cast<double>(n) + 1e-9));
  if (count < 10) throw DataError("fewer than 10 windows in the requested tail");
  std::vector<double> keys(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = component_summary(training[i], component);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  if (side == TailSide::high) return {order.end() - static_cast<std::ptrdiff_t>(count), order.end()};
  return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count)};
}

}  // namespace

RegimeTarget regime_quantile_targets(std::span<const RegimeVector> training, RegimeComponent component,
                                     TailSide side, double q) {
  const auto idx = tail_indices(training, component, side, q);
  RegimeTarget t;
  t.component = component;
  t.side = side;
  t.tail_count = idx.size();
  if (component == RegimeComponent::liq || component == RegimeComponent::imb) {
    const auto& first = component == RegimeComponent::liq ? training[idx[0]].liq : training[idx[0]].imb;
    t.profile.assign(first.size(), 0.0);
    for (std::size_t i : idx) {
      const auto& series = component == RegimeComponent::liq ? training[i].liq : training[i].imb;
      if (series.size() != t.profile.size()) throw DataError("per-step regime lengths differ");
      for (std::size_t s = 0; s < series.size(); ++s) t.profile[s] += series[s];
    }
    for (double& v : t.profile) v /= static_cast<double>(idx.size());
    t.scalar = mean_of(t.profile);
  } else {
    double sum = 0.0;
    for (std::size_t i : idx) sum += component_summary(training[i], component);
    t.scalar = sum / static_cast<double>(idx.size());
  }
  return t;
}

RegimeVector apply_target(const RegimeVector& base, const RegimeTarget& target) {
  RegimeVector out = base;
  switch (target.component) {
    case RegimeComponent::trend: out.trend = target.scalar; break;
    case RegimeComponent::vol: out.vol = target.scalar; break;
    case RegimeComponent::liq: out.liq = target.profile; break;
    case RegimeComponent::imb: out.imb = target.profile; break;
  }
  return out;
}

TailThresholds tail_thresholds(std::span<const RegimeVector> training, RegimeComponent component, double q) {
  const auto hi = tail_indices(training, component, TailSide::high, q);
  const auto lo = tail_indices(training, component, TailSide::low, q);
  TailThresholds t;
  t.high = component_summary(training[hi.front()], component);
  t.low = component_summary(training[lo.back()], component);
  return t;
}

}  // namespace difflob
