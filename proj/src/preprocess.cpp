#include "difflob/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>

#include "difflob/error.hpp"
#include "difflob/io.hpp"

namespace difflob {

EncodedBlock::EncodedBlock(std::size_t steps, std::size_t levels)
    : steps_(steps), levels_(levels), data_(steps * (4 * levels + 2), 0.0f) {}

EncodedBlock to_block(std::span<const EncodedState> states) {
  if (states.empty()) return {};
  const std::size_t k = states.front().price.size() / 2;
  EncodedBlock block(states.size(), k);
  for (std::size_t s = 0; s < states.size(); ++s) {
    for (std::size_t j = 0; j < 2 * k; ++j) {
      block.price(s, j) = static_cast<float>(states[s].price[j]);
      block.volume(s, j) = static_cast<float>(states[s].volume[j]);
    }
    block.tod_sin(s) = static_cast<float>(states[s].tod_sin);
    block.tod_cos(s) = static_cast<float>(states[s].tod_cos);
  }
  return block;
}

double mid_price(const LobSnapshot& snap) {
  if (snap.ask_price.empty() || !(snap.ask_price[0] > snap.bid_price[0])) {
    throw DataError("mid_price requires a positive spread");
  }
  return (snap.ask_price[0] + snap.bid_price[0]) / 2.0;
}

namespace {

EncodedState encode_book(const LobSnapshot& snap, double return_into, const PreprocessStats& stats, double open,
                         double close) {
  const std::size_t k = snap.levels();
  EncodedState e;
  e.price.resize(2 * k);
  e.volume.resize(2 * k);
  e.price[0] = return_into;
  for (std::size_t i = 1; i < k; ++i) e.price[i] = snap.ask_price[i] - snap.ask_price[i - 1];
  e.price[k] = snap.ask_price[0] - snap.bid_price[0];
  for (std::size_t i = 1; i < k; ++i) e.price[k + i] = snap.bid_price[i - 1] - snap.bid_price[i];
  for (std::size_t i = 0; i < k; ++i) {
    e.volume[i] = std::sqrt(std::min(snap.ask_volume[i], stats.v_cap)) / stats.c_scale;
    e.volume[k + i] = std::sqrt(std::min(snap.bid_volume[i], stats.v_cap)) / stats.c_scale;
  }
  const double phase = 2.0 * std::numbers::pi * (snap.timestamp - open) / (close - open);
  e.tod_sin = std::sin(phase);
  e.tod_cos = std::cos(phase);
  return e;
}

}  // namespace

std::vector<EncodedState> encode_series(const SnapshotSeries& series, const PreprocessStats& stats) {
  if (series.snapshots.size() < 2) throw DataError("encode_series needs at least two snapshots");
  if (!(stats.v_cap > 0 && stats.c_scale > 0)) throw ConfigError("preprocess statistics are not fitted");
  if (!(series.session_open < series.session_close)) throw DataError("series session bounds are inverted");
  std::vector<EncodedState> out;
  out.reserve(series.snapshots.size() - 1);
  for (std::size_t u = 0; u + 1 < series.snapshots.size(); ++u) {
    const auto& next = series.snapshots[u + 1];
    const double r = mid_price(next) - mid_price(series.snapshots[u]);
    out.push_back(encode_book(next, r, stats, series.session_open, series.session_close));
  }
  return out;
}

EncodedBlock encode_window(double anchor_mid, std::span<const LobSnapshot> books, const PreprocessStats& stats) {
  std::vector<EncodedState> states;
  states.reserve(books.size());
  double prev = anchor_mid;
  for (const auto& b : books) {
    const double mid = mid_price(b);
    states.push_back(encode_book(b, mid - prev, stats, stats.session_open, stats.session_close));
    prev = mid;
  }
  return to_block(states);
}

DecodedWindow decode_future(const EncodedBlock& gen, double anchor_mid, const PreprocessStats& stats) {
  const std::size_t k = gen.levels();
  const double tick = stats.tick;
  const double half = tick / 2.0;
  DecodedWindow out;
  out.snapshots.reserve(gen.steps());
  out.returns.reserve(gen.steps());
  auto gap = [&](double raw) {
    double snapped = std::round(raw / tick) * tick;
    if (!(snapped >= tick)) {
      ++out.clamp_count;
      snapped = tick;
    }
    return snapped;
  };
  auto volume = [&](double encoded) {
    if (encoded < 0) {
      ++out.clamp_count;
      encoded = 0;
    }
    const double root = encoded * stats.c_scale;
    return std::round(root * root);
  };
  const double session = stats.session_close - stats.session_open;
  double mid = anchor_mid;
  for (std::size_t s = 0; s < gen.steps(); ++s) {
    const double r = std::round(gen.price(s, 0) / half) * half;
    mid += r;
    out.returns.push_back(r);
    LobSnapshot snap;
    double phase = std::atan2(gen.tod_sin(s), gen.tod_cos(s));
    if (phase < 0) phase += 2.0 * std::numbers::pi;
    snap.timestamp = stats.session_open + std::round(phase / (2.0 * std::numbers::pi) * session);
    snap.ask_price.resize(k);
    snap.bid_price.resize(k);
    snap.ask_volume.resize(k);
    snap.bid_volume.resize(k);
    const double spread = gap(gen.price(s, k));
    snap.ask_price[0] = mid + spread / 2.0;
    snap.bid_price[0] = mid - spread / 2.0;
    for (std::size_t i = 1; i < k; ++i) {
      snap.ask_price[i] = snap.ask_price[i - 1] + gap(gen.price(s, i));
      snap.bid_price[i] = snap.bid_price[i - 1] - gap(gen.price(s, k + i));
    }
    for (std::size_t i = 0; i < k; ++i) {
      snap.ask_volume[i] = volume(gen.volume(s, i));
      snap.bid_volume[i] = volume(gen.volume(s, k + i));
    }
    out.snapshots.push_back(std::move(snap));
  }
  return out;
}

std::vector<WindowPair> make_windows(std::span<const EncodedState> encoded, const SnapshotSeries& raw,
                                     std::size_t stride, std::size_t history, std::size_t future) {
  if (stride == 0) throw ConfigError("window stride must be positive");
  if (raw.snapshots.size() != encoded.size() + 1) {
    throw DataError("raw series does not match the encoded sequence");
  }
  const std::size_t span_len = history + future;
  std::vector<WindowPair> windows;
  if (encoded.size() < span_len) {
    std::cerr << "warning: sequence of " << encoded.size() << " steps is shorter than one window (" << span_len
              << "); no windows produced\n";
    return windows;
  }
  const std::size_t count = (encoded.size() - span_len) / stride + 1;
  windows.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t s = w * stride;
    WindowPair pair;
    pair.history = to_block(encoded.subspan(s, history));
    pair.future = to_block(encoded.subspan(s + history, future));
    // Encoded step u is snapshot u + 1; the last history step is s + history - 1.
    pair.anchor_mid = mid_price(raw.snapshots[s + history]);
    const std::span<const LobSnapshot> books(raw.snapshots.data() + s + history + 1, future);
    pair.regime = compute_regime(pair.anchor_mid, books);
    windows.push_back(std::move(pair));
  }
  return windows;
}

double volume_cap(std::span<const SnapshotSeries> series) {
  std::vector<double> volumes;
  for (const auto& s : series) {
    for (const auto& snap : s.snapshots) {
      volumes.insert(volumes.end(), snap.ask_volume.begin(), snap.ask_volume.end());
      volumes.insert(volumes.end(), snap.bid_volume.begin(), snap.bid_volume.end());
    }
  }
  if (volumes.empty()) throw DataError("no volumes to fit the cap on");
  // Linear interpolation between order statistics.
  const double pos = 0.99 * static_cast<double>(volumes.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  std::nth_element(volumes.begin(), volumes.begin() + static_cast<std::ptrdiff_t>(lo), volumes.end());
  const double v_lo = volumes[lo];
  if (lo + 1 >= volumes.size()) return std::max(v_lo, 1.0);
  const double v_hi = *std::min_element(volumes.begin() + static_cast<std::ptrdiff_t>(lo) + 1, volumes.end());
  return std::max(v_lo + (pos - static_cast<double>(lo)) * (v_hi - v_lo), 1.0);
}

PreprocessStats fit_stats(std::span<const SnapshotSeries> training, double tick, std::size_t stride) {
  if (training.empty()) throw DataError("no training series");
  PreprocessStats stats;
  stats.levels = training.front().levels;
  stats.tick = tick;
  stats.session_open = training.front().session_open;
  stats.session_close = training.front().session_close;
  stats.v_cap = volume_cap(training);
  stats.c_scale = std::sqrt(stats.v_cap);

  const std::size_t rows = 2 * static_cast<std::size_t>(stats.levels);
  std::vector<double> sum(2 * rows, 0.0), sum_sq(2 * rows, 0.0);
  std::size_t steps = 0;
  std::vector<RegimeVector> regimes;
  for (const auto& series : training) {
    if (series.levels != stats.levels) throw DataError("training series disagree on level count");
    const auto encoded = encode_series(series, stats);
    for (const auto& e : encoded) {
      for (std::size_t j = 0; j < rows; ++j) {
        sum[j] += e.price[j];
        sum_sq[j] += e.price[j] * e.price[j];
        sum[rows + j] += e.volume[j];
        sum_sq[rows + j] += e.volume[j] * e.volume[j];
      }
      ++steps;
    }
    for (auto& w : make_windows(encoded, series, stride)) regimes.push_back(std::move(w.regime));
  }
  if (regimes.empty()) throw DataError("training split yields no windows");
  stats.feature_mean.resize(2 * rows);
  stats.feature_std.resize(2 * rows);
  for (std::size_t j = 0; j < 2 * rows; ++j) {
    const double m = sum[j] / static_cast<double>(steps);
    const double var = std::max(0.0, sum_sq[j] / static_cast<double>(steps) - m * m);
    stats.feature_mean[j] = m;
    stats.feature_std[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  stats.regime = fit_regime_stats(regimes);
  return stats;
}

io::json stats_to_json(const PreprocessStats& s) {
  return {
      {"K", s.levels},
      {"tick", s.tick},
      {"v_cap", s.v_cap},
      {"c_scale", s.c_scale},
      {"session_open", s.session_open},
      {"session_close", s.session_close},
      {"regime",
       {{"trend_mean", s.regime.trend_mean},
        {"trend_std", s.regime.trend_std},
        {"vol_mean", s.regime.vol_mean},
        {"vol_std", s.regime.vol_std},
        {"liq_mean", s.regime.liq_mean},
        {"liq_std", s.regime.liq_std},
        {"imb_mean", s.regime.imb_mean},
        {"imb_std", s.regime.imb_std}}},
      {"feature_mean", s.feature_mean},
      {"feature_std", s.feature_std},
  };
}

void save_stats(const PreprocessStats& stats, const std::filesystem::path& path) {
  io::write_json(path, stats_to_json(stats));
}

PreprocessStats stats_from_json(const io::json& doc) {
  PreprocessStats s;
  s.levels = doc.at("K").get<int>();
  s.tick = doc.at("tick").get<double>();
  s.v_cap = doc.at("v_cap").get<double>();
  s.c_scale = doc.at("c_scale").get<double>();
  s.session_open = doc.at("session_open").get<double>();
  s.session_close = doc.at("session_close").get<double>();
  const auto& r = doc.at("regime");
  s.regime.trend_mean = r.at("trend_mean").get<double>();
  s.regime.trend_std = r.at("trend_std").get<double>();
  s.regime.vol_mean = r.at("vol_mean").get<double>();
  s.regime.vol_std = r.at("vol_std").get<double>();
  s.regime.liq_mean = r.at("liq_mean").get<double>();
  s.regime.liq_std = r.at("liq_std").get<double>();
  s.regime.imb_mean = r.at("imb_mean").get<double>();
  s.regime.imb_std = r.at("imb_std").get<double>();
  s.feature_mean = doc.at("feature_mean").get<std::vector<double>>();
  s.feature_std = doc.at("feature_std").get<std::vector<double>>();
  return s;
}

PreprocessStats load_stats(const std::filesystem::path& path) {
  try {
    return stats_from_json(io::read_json(path));
  } catch (const io::json::exception& e) {
    throw DataError("bad preprocess stats " + path.string() + ": " + e.what());
  }
}

void save_windows(const std::vector<WindowPair>& windows, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::size_t k = 0, hist = 0, fut = 0;
  if (!windows.empty()) {
    k = windows.front().history.levels();
    hist = windows.front().history.steps();
    fut = windows.front().future.steps();
  }
  std::vector<float> history, future, regimes, anchors;
  for (const auto& w : windows) {
    if (w.history.steps() != hist || w.future.steps() != fut || w.history.levels() != k) {
      throw DataError("windows differ in shape");
    }
    history.insert(history.end(), w.history.data().begin(), w.history.data().end());
    future.insert(future.end(), w.future.data().begin(), w.future.data().end());
    regimes.push_back(static_cast<float>(w.regime.trend));
    regimes.push_back(static_cast<float>(w.regime.vol));
    for (double v : w.regime.liq) regimes.push_back(static_cast<float>(v));
    for (double v : w.regime.imb) regimes.push_back(static_cast<float>(v));
    anchors.push_back(static_cast<float>(w.anchor_mid));
  }
  io::json meta = {{"count", windows.size()}, {"K", k}, {"history", hist}, {"future", fut},
                   {"row_width", 4 * k + 2},
                   {"row_layout", "price[2K], volume[2K], tod_sin, tod_cos"},
                   {"regime_layout", "trend, vol, liq[tau], imb[tau]"}};
  io::write_json(dir / "meta.json", meta);
  io::write_f32le(dir / "history.f32le", history);
  io::write_f32le(dir / "future.f32le", future);
  io::write_f32le(dir / "regimes.f32le", regimes);
  io::write_f32le(dir / "anchors.f32le", anchors);
}

std::vector<WindowPair> load_windows(const std::filesystem::path& dir) {
  const auto meta = io::read_json(dir / "meta.json");
  std::size_t count = 0, k = 0, hist = 0, fut = 0;
  try {
    count = meta.at("count").get<std::size_t>();
    k = meta.at("K").get<std::size_t>();
    hist = meta.at("history").get<std::size_t>();
    fut = meta.at("future").get<std::size_t>();
  } catch (const io::json::exception& e) {
    throw DataError("bad window meta.json: " + std::string(e.what()));
  }
  const auto history = io::read_f32le(dir / "history.f32le");
  const auto future = io::read_f32le(dir / "future.f32le");
  const auto regimes = io::read_f32le(dir / "regimes.f32le");
  const auto anchors = io::read_f32le(dir / "anchors.f32le");
  const std::size_t width = 4 * k + 2;
  const std::size_t regime_width = 2 + 2 * fut;
  if (history.size() != count * hist * width || future.size() != count * fut * width ||
      regimes.size() != count * regime_width || anchors.size() != count) {
    throw DataError("window arrays disagree with meta.json in " + dir.string());
  }
  std::vector<WindowPair> windows(count);
  for (std::size_t w = 0; w < count; ++w) {
    auto& pair = windows[w];
    pair.history = EncodedBlock(hist, k);
    pair.future = EncodedBlock(fut, k);
    std::copy_n(history.begin() + static_cast<std::ptrdiff_t>(w * hist * width), hist * width,
                pair.history.data().begin());
    std::copy_n(future.begin() + static_cast<std::ptrdiff_t>(w * fut * width), fut * width,
                pair.future.data().begin());
    const float* r = regimes.data() + w * regime_width;
    pair.regime.trend = r[0];
    pair.regime.vol = r[1];
    pair.regime.liq.assign(r + 2, r + 2 + fut);
    pair.regime.imb.assign(r + 2 + fut, r + 2 + 2 * fut);
    pair.anchor_mid = anchors[w];
  }
  return windows;
}

}  // namespace difflob
