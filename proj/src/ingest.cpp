#include "difflob/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <string_view>

#include "difflob/error.hpp"
#include "difflob/io.hpp"

namespace difflob {

std::optional<std::string> check_snapshot(const LobSnapshot& snap) {
  const std::size_t k = snap.ask_price.size();
  if (k == 0) return "snapshot has no levels";
  if (snap.bid_price.size() != k || snap.ask_volume.size() != k || snap.bid_volume.size() != k) {
    return "ragged level arrays";
  }
  if (!(snap.ask_price[0] > snap.bid_price[0])) return "crossed or locked book";
  for (std::size_t i = 1; i < k; ++i) {
    if (!(snap.ask_price[i] > snap.ask_price[i - 1])) return "ask prices not strictly increasing";
    if (!(snap.bid_price[i] < snap.bid_price[i - 1])) return "bid prices not strictly decreasing";
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (snap.ask_volume[i] < 0 || snap.bid_volume[i] < 0) return "negative volume";
  }
  if (!(snap.ask_volume[0] > 0) || !(snap.bid_volume[0] > 0)) return "empty best level";
  return std::nullopt;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

double parse_number(std::string_view field, std::size_t row) {
  field = trim(field);
  double value = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (field.empty() || ec != std::errc() || ptr != last || !std::isfinite(value)) {
    throw ParseError(row, "non-numeric field '" + std::string(field) + "'");
  }
  return value;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

std::string format_csv_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  if (ec != std::errc()) return io::format_double(v);
  return std::string(buf, ptr);
}

}  // namespace

ParsedEvents parse_lobster(std::istream& orderbook, std::istream* message, int levels) {
  if (levels < 1) throw ConfigError("level count must be positive");
  const std::size_t k = static_cast<std::size_t>(levels);
  ParsedEvents out;
  std::string line;
  std::string msg_line;
  std::size_t row = 0;
  while (std::getline(orderbook, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_csv(trim(line));
    if (fields.size() != 4 * k) {
      throw ParseError(row, "expected " + std::to_string(4 * k) + " columns, got " + std::to_string(fields.size()));
    }
    LobSnapshot snap;
    snap.timestamp = static_cast<double>(row - 1);
    if (message != nullptr) {
      do {
        if (!std::getline(*message, msg_line)) throw ParseError(row, "message file has fewer rows than orderbook");
      } while (trim(msg_line).empty());
      const auto msg_fields = split_csv(trim(msg_line));
      snap.timestamp = parse_number(msg_fields.front(), row);
    }
    snap.ask_price.resize(k);
    snap.ask_volume.resize(k);
    snap.bid_price.resize(k);
    snap.bid_volume.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      snap.ask_price[i] = parse_number(fields[4 * i + 0], row);
      snap.ask_volume[i] = parse_number(fields[4 * i + 1], row);
      snap.bid_price[i] = parse_number(fields[4 * i + 2], row);
      snap.bid_volume[i] = parse_number(fields[4 * i + 3], row);
    }
    if (!(snap.ask_price[0] > snap.bid_price[0])) {
      ++out.crossed_dropped;
      continue;
    }
    if (check_snapshot(snap)) {
      ++out.invalid_dropped;
      continue;
    }
    out.snapshots.push_back(std::move(snap));
  }
  if (row == 0) throw ParseError(0, "no rows");
  return out;
}

SnapshotSeries sample_one_hz(const std::vector<LobSnapshot>& events, double open, double close) {
  if (!(open < close)) throw ConfigError("session open must precede close");
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (events[i].timestamp < events[i - 1].timestamp) throw DataError("events are not timestamp-sorted");
  }
  SnapshotSeries series;
  series.session_open = open;
  series.session_close = close;
  if (!events.empty()) series.levels = static_cast<int>(events.front().levels());

  std::size_t next = 0;  // first event not yet consumed
  std::optional<std::size_t> current;
  for (double u = std::ceil(open); u < close; u += 1.0) {
    while (next < events.size() && events[next].timestamp <= u) current = next++;
    // The second holding the first event is covered by that event.
    if (!current && next < events.size() && events[next].timestamp < u + 1.0) current = next++;
    if (!current) continue;
    LobSnapshot snap = events[*current];
    snap.timestamp = u;
    series.snapshots.push_back(std::move(snap));
  }
  if (series.snapshots.empty()) throw DataError("empty session");
  return series;
}

void write_lobster(const SnapshotSeries& series, std::ostream& orderbook, std::ostream& message) {
  for (const auto& snap : series.snapshots) {
    for (std::size_t i = 0; i < snap.levels(); ++i) {
      if (i) orderbook << ',';
      orderbook << format_csv_number(snap.ask_price[i]) << ',' << format_csv_number(snap.ask_volume[i]) << ','
                << format_csv_number(snap.bid_price[i]) << ',' << format_csv_number(snap.bid_volume[i]);
    }
    orderbook << '\n';
    // time, type, order id, size, price, direction
    message << format_csv_number(snap.timestamp) << ",1,0,0,0,0\n";
  }
}

void validate(const SynthConfig& c) {
  if (!(c.vol > 0)) throw ConfigError("synthetic vol must be positive");
  if (!(c.base_depth > 0)) throw ConfigError("synthetic base_depth must be positive");
  if (!(std::abs(c.imbalance_bias) < 1)) throw ConfigError("synthetic imbalance_bias must lie in (-1, 1)");
  if (c.n_seconds < 1) throw ConfigError("synthetic n_seconds must be positive");
  if (c.levels < 1) throw ConfigError("synthetic levels must be positive");
  if (!(c.tick > 0)) throw ConfigError("synthetic tick must be positive");
  if (!(c.depth_scale > 0)) throw ConfigError("synthetic depth_scale must be positive");
  if (!(c.regime_persistence > 0)) throw ConfigError("synthetic regime_persistence must be positive");
  if (c.drift_swing < 0 || c.vol_swing < 0 || c.depth_swing < 0 || c.imbalance_swing < 0) {
    throw ConfigError("synthetic swing parameters must be non-negative");
  }
}

SnapshotSeries synthesize_lob(const SynthConfig& c) {
  validate(c);
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const std::size_t k = static_cast<std::size_t>(c.levels);
  const double half = c.tick / 2.0;

  const double phi = std::exp(-1.0 / c.regime_persistence);
  const double innov = std::sqrt(1.0 - phi * phi);
  double factor[4];
  for (double& f : factor) f = normal(rng);

  auto draw_gap = [&] {
    const double u = uniform(rng);
    return u < 0.75 ? 1.0 : (u < 0.93 ? 2.0 : 3.0);
  };
  std::vector<double> ask_gap(k), bid_gap(k);
  for (std::size_t i = 1; i < k; ++i) {
    ask_gap[i] = draw_gap();
    bid_gap[i] = draw_gap();
  }
  constexpr double kVolPhi = 0.9;
  constexpr double kVolNoise = 0.3;
  const double vol_innov = kVolNoise * std::sqrt(1.0 - kVolPhi * kVolPhi);
  std::vector<double> ask_noise(k), bid_noise(k);
  for (std::size_t i = 0; i < k; ++i) {
    ask_noise[i] = kVolNoise * normal(rng);
    bid_noise[i] = kVolNoise * normal(rng);
  }

  SnapshotSeries series;
  series.symbol = "SYNTH";
  series.date = "synthetic-" + std::to_string(c.seed);
  series.levels = c.levels;
  series.session_open = c.open;
  series.session_close = c.open + c.n_seconds;
  series.snapshots.reserve(static_cast<std::size_t>(c.n_seconds));

  const double imb_center = std::atanh(c.imbalance_bias);
  double latent = c.start_price;
  for (int s = 0; s < c.n_seconds; ++s) {
    for (double& f : factor) f = phi * f + innov * normal(rng);
    const double drift_t = c.drift + c.drift_swing * factor[0];
    const double vol_t = c.vol * std::exp(c.vol_swing * factor[1] - 0.5 * c.vol_swing * c.vol_swing);
    const double depth_t = std::exp(c.depth_swing * factor[2] - 0.5 * c.depth_swing * c.depth_swing);
    const double imb_t = std::tanh(imb_center + c.imbalance_swing * factor[3]);
    const double step_noise = normal(rng);
    if (s > 0) latent += drift_t + vol_t * step_noise;

    const double mid_halves = std::round(latent / half);
    const double mid = mid_halves * half;
    const bool off_grid = std::fmod(std::abs(mid_halves), 2.0) == 1.0;
    const double wide_prob = std::clamp(0.1 + 0.25 * vol_t / c.tick, 0.0, 0.8);
    double spread_ticks = uniform(rng) < wide_prob ? 2.0 : 1.0;
    if ((std::fmod(spread_ticks, 2.0) == 1.0) != off_grid) spread_ticks += 1.0;

    LobSnapshot snap;
    snap.timestamp = c.open + s;
    snap.ask_price.resize(k);
    snap.bid_price.resize(k);
    snap.ask_volume.resize(k);
    snap.bid_volume.resize(k);
    snap.ask_price[0] = mid + spread_ticks * half;
    snap.bid_price[0] = mid - spread_ticks * half;
    for (std::size_t i = 1; i < k; ++i) {
      if (uniform(rng) < 0.05) ask_gap[i] = draw_gap();
      if (uniform(rng) < 0.05) bid_gap[i] = draw_gap();
      snap.ask_price[i] = snap.ask_price[i - 1] + ask_gap[i] * c.tick;
      snap.bid_price[i] = snap.bid_price[i - 1] - bid_gap[i] * c.tick;
    }
    double level_depth = c.base_depth * depth_t;
    for (std::size_t i = 0; i < k; ++i) {
      ask_noise[i] = kVolPhi * ask_noise[i] + vol_innov * normal(rng);
      bid_noise[i] = kVolPhi * bid_noise[i] + vol_innov * normal(rng);
      const double bias = -0.5 * kVolNoise * kVolNoise;
      snap.ask_volume[i] = std::max(1.0, std::round(level_depth * (1.0 + imb_t) * std::exp(ask_noise[i] + bias)));
      snap.bid_volume[i] = std::max(1.0, std::round(level_depth * (1.0 - imb_t) * std::exp(bid_noise[i] + bias)));
      level_depth *= c.depth_scale;
    }
    series.snapshots.push_back(std::move(snap));
  }
  return series;
}

void save_series(const SnapshotSeries& series, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t k = static_cast<std::size_t>(series.levels);
  std::vector<double> timestamps;
  std::vector<float> rows;
  timestamps.reserve(series.snapshots.size());
  rows.reserve(series.snapshots.size() * 4 * k);
  for (const auto& snap : series.snapshots) {
    if (snap.levels() != k) throw DataError("snapshot level count differs from series");
    timestamps.push_back(snap.timestamp);
    for (const auto* column : {&snap.ask_price, &snap.ask_volume, &snap.bid_price, &snap.bid_volume}) {
      for (double v : *column) rows.push_back(static_cast<float>(v));
    }
  }
  io::json meta = {{"symbol", series.symbol},     {"date", series.date},
                   {"K", series.levels},          {"open", series.session_open},
                   {"close", series.session_close}, {"count", series.snapshots.size()}};
  io::write_json(dir / "meta.json", meta);
  io::write_f64le(dir / "timestamps.f64le", timestamps);
  io::write_f32le(dir / "snapshots.f32le", rows);
}

SnapshotSeries load_series(const std::filesystem::path& dir) {
  const auto meta = io::read_json(dir / "meta.json");
  SnapshotSeries series;
  try {
    series.symbol = meta.at("symbol").get<std::string>();
    series.date = meta.at("date").get<std::string>();
    series.levels = meta.at("K").get<int>();
    series.session_open = meta.at("open").get<double>();
    series.session_close = meta.at("close").get<double>();
  } catch (const io::json::exception& e) {
    throw DataError("bad series meta.json: " + std::string(e.what()));
  }
  const auto count = meta.value("count", std::size_t{0});
  const auto timestamps = io::read_f64le(dir / "timestamps.f64le");
  const auto rows = io::read_f32le(dir / "snapshots.f32le");
  const std::size_t k = static_cast<std::size_t>(series.levels);
  if (timestamps.size() != count || rows.size() != count * 4 * k) {
    throw DataError("series arrays disagree with meta.json count in " + dir.string());
  }
  series.snapshots.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    auto& snap = series.snapshots[r];
    snap.timestamp = timestamps[r];
    const float* row = rows.data() + r * 4 * k;
    snap.ask_price.assign(row, row + k);
    snap.ask_volume.assign(row + k, row + 2 * k);
    snap.bid_price.assign(row + 2 * k, row + 3 * k);
    snap.bid_volume.assign(row + 3 * k, row + 4 * k);
  }
  return series;
}

}  // namespace difflob
