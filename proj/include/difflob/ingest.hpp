#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace difflob {

inline constexpr double kDefaultSessionOpen = 34200.0;   // 09:30
inline constexpr double kDefaultSessionClose = 57600.0;  // 16:00

/// One book state. Prices are in LOBSTER units (1e-4 currency), volumes in
/// shares. Both are integral for real data but held as doubles so decoded
/// model output can share the type.
struct LobSnapshot {
  double timestamp = 0.0;
  std::vector<double> ask_price;
  std::vector<double> ask_volume;
  std::vector<double> bid_price;
  std::vector<double> bid_volume;

  std::size_t levels() const noexcept { return ask_price.size(); }

  bool operator==(const LobSnapshot&) const = default;
};

/// Returns a description of the first violated snapshot invariant, if any.
std::optional<std::string> check_snapshot(const LobSnapshot& snap);

struct SnapshotSeries {
  std::string symbol;
  std::string date;
  int levels = 10;
  double session_open = kDefaultSessionOpen;
  double session_close = kDefaultSessionClose;
  std::vector<LobSnapshot> snapshots;

  bool operator==(const SnapshotSeries&) const = default;
};

struct ParsedEvents {
  std::vector<LobSnapshot> snapshots;
  std::size_t crossed_dropped = 0;
  std::size_t invalid_dropped = 0;
};

/// Parses a LOBSTER orderbook file (4K columns per row: ask price, ask size,
/// bid price, bid size per level). Timestamps come from column 1 of the
/// optional message file, otherwise the row index is used.
ParsedEvents parse_lobster(std::istream& orderbook, std::istream* message, int levels);

/// Resamples event-time snapshots to one snapshot per integer second in
/// [open, close); second u carries the last event with timestamp <= u. The
/// series starts at the second that holds the first event, which that event covers.
SnapshotSeries sample_one_hz(const std::vector<LobSnapshot>& events, double open, double close);

/// Writes a series as LOBSTER orderbook and message CSV files.
void write_lobster(const SnapshotSeries& series, std::ostream& orderbook, std::ostream& message);

struct SynthConfig {
  std::uint64_t seed = 7;
  int n_seconds = 23400;
  int levels = 10;
  double open = kDefaultSessionOpen;
  double start_price = 1000000.0;  // 100.00 in LOBSTER units
  double drift = 0.0;              // price units per step
  double vol = 100.0;              // price units per step
  double base_depth = 400.0;       // shares at level 1
  double depth_scale = 1.15;
  double imbalance_bias = 0.0;
  double tick = 100.0;
  // Latent regime modulation. Each of drift, vol, depth and imbalance is
  // driven by its own AR(1) factor with the given persistence so that
  // windows a minute apart sit in different regimes.
  double regime_persistence = 90.0;  // seconds
  double drift_swing = 25.0;         // price units per step
  double vol_swing = 0.45;           // log-scale std
  double depth_swing = 0.35;         // log-scale std
  double imbalance_swing = 0.6;      // std on the atanh scale
};

void validate(const SynthConfig& config);

/// Regime-controllable synthetic book. Deterministic for a given seed.
SnapshotSeries synthesize_lob(const SynthConfig& config);

/// Series directory: meta.json, timestamps.f64le, snapshots.f32le.
void save_series(const SnapshotSeries& series, const std::filesystem::path& dir);
SnapshotSeries load_series(const std::filesystem::path& dir);

}  // namespace difflob
