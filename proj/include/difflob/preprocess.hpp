#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "difflob/ingest.hpp"
#include "difflob/io.hpp"
#include "difflob/regimes.hpp"

namespace difflob {

inline constexpr std::size_t kHistoryLength = 32;
inline constexpr std::size_t kFutureLength = 32;

/// Constants fitted on the training split.
struct PreprocessStats {
  int levels = 10;        // K per side
  double tick = 100.0;    // price units
  double v_cap = 0.0;     // 99th percentile volume, shares
  double c_scale = 0.0;   // sqrt(v_cap), so capped encoded volumes lie in [0, 1]
  double session_open = kDefaultSessionOpen;
  double session_close = kDefaultSessionClose;
  RegimeStats regime;
  // Per-row standardization of the model input, 4K entries: the 2K price
  // rows followed by the 2K volume rows.
  std::vector<double> feature_mean;
  std::vector<double> feature_std;

  bool operator==(const PreprocessStats&) const = default;
};

/// One encoded time step. `price` is [r, da_2..da_K, ds, db_2..db_K] in price
/// units; `volume` is [va_1..va_K, vb_1..vb_K] after capping and sqrt scaling.
struct EncodedState {
  std::vector<double> price;
  std::vector<double> volume;
  double tod_sin = 0.0;
  double tod_cos = 1.0;
};

/// A run of encoded states stored flat as floats. Row layout per step:
/// [price (2K), volume (2K), tod_sin, tod_cos].
class EncodedBlock {
 public:
  EncodedBlock() = default;
  EncodedBlock(std::size_t steps, std::size_t levels);

  std::size_t steps() const noexcept { return steps_; }
  std::size_t levels() const noexcept { return levels_; }
  std::size_t rows() const noexcept { return 2 * levels_; }
  std::size_t row_width() const noexcept { return 4 * levels_ + 2; }

  float& price(std::size_t step, std::size_t row) { return data_[step * row_width() + row]; }
  float price(std::size_t step, std::size_t row) const { return data_[step * row_width() + row]; }
  float& volume(std::size_t step, std::size_t row) { return data_[step * row_width() + rows() + row]; }
  float volume(std::size_t step, std::size_t row) const { return data_[step * row_width() + rows() + row]; }
  float& tod_sin(std::size_t step) { return data_[step * row_width() + 4 * levels_]; }
  float tod_sin(std::size_t step) const { return data_[step * row_width() + 4 * levels_]; }
  float& tod_cos(std::size_t step) { return data_[step * row_width() + 4 * levels_ + 1]; }
  float tod_cos(std::size_t step) const { return data_[step * row_width() + 4 * levels_ + 1]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool operator==(const EncodedBlock&) const = default;

 private:
  std::size_t steps_ = 0;
  std::size_t levels_ = 0;
  std::vector<float> data_;
};

EncodedBlock to_block(std::span<const EncodedState> states);

struct WindowPair {
  EncodedBlock history;   // kHistoryLength steps
  EncodedBlock future;    // kFutureLength steps
  double anchor_mid = 0;  // mid of the last history snapshot
  RegimeVector regime;    // computed from the raw future books
};

double mid_price(const LobSnapshot& snap);

/// Encodes transitions u -> u+1. Step u carries r_u = m_{u+1} - m_u together
/// with the book, volumes and time of snapshot u+1, so the output has one
/// step fewer than the input.
std::vector<EncodedState> encode_series(const SnapshotSeries& series, const PreprocessStats& stats);

struct DecodedWindow {
  std::vector<LobSnapshot> snapshots;
  std::vector<double> returns;  // snapped mid increments, one per snapshot
  std::size_t clamp_count = 0;
};

/// Inverts the representation. Mid i is anchor + sum_{j<=i} r_j with r on the
/// half-tick grid; spreads and level gaps are snapped to the tick grid and
/// clamped to at least one tick; negative volumes are clamped to zero.
DecodedWindow decode_future(const EncodedBlock& generated, double anchor_mid, const PreprocessStats& stats);

/// Encodes a run of books that follows a known mid. Step i carries the mid
/// increment into book i; time of day comes from the book timestamps.
EncodedBlock encode_window(double anchor_mid, std::span<const LobSnapshot> books, const PreprocessStats& stats);

/// Sliding windows of history+future encoded steps. `raw` is the series that
/// produced `encoded`; encoded step u corresponds to raw snapshot u + 1.
std::vector<WindowPair> make_windows(std::span<const EncodedState> encoded, const SnapshotSeries& raw,
                                     std::size_t stride, std::size_t history = kHistoryLength,
                                     std::size_t future = kFutureLength);

/// 99th-percentile volume over every level and side of the given series.
double volume_cap(std::span<const SnapshotSeries> series);

/// Fits all preprocessing constants on the training series.
PreprocessStats fit_stats(std::span<const SnapshotSeries> training, double tick, std::size_t stride = 1);

io::json stats_to_json(const PreprocessStats& stats);
PreprocessStats stats_from_json(const io::json& doc);
void save_stats(const PreprocessStats& stats, const std::filesystem::path& path);
PreprocessStats load_stats(const std::filesystem::path& path);

/// Window dataset directory: meta.json plus history/future/regimes/anchors f32le.
void save_windows(const std::vector<WindowPair>& windows, const std::filesystem::path& dir);
std::vector<WindowPair> load_windows(const std::filesystem::path& dir);

}  // namespace difflob
