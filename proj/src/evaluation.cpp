#include "difflob/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "difflob/error.hpp"

namespace difflob {

namespace fs = std::filesystem;

namespace {

HistogramPair histogram_pair(const std::vector<double>& real, const std::vector<double>& gen, int bins) {
  HistogramPair h;
  bool any = false;
  for (const auto* v : {&real, &gen}) {
    for (double x : *v) {
      if (!any) {
        h.lo = h.hi = x;
        any = true;
      }
      h.lo = std::min(h.lo, x);
      h.hi = std::max(h.hi, x);
    }
  }
  h.real = histogram(real, h.lo, h.hi, bins);
  h.generated = histogram(gen, h.lo, h.hi, bins);
  return h;
}

std::vector<double> mids_of(const DecodedWindow& w) {
  // Reconstruct the anchor from the first book and its return.
  std::vector<double> mids;
  mids.reserve(w.snapshots.size() + 1);
  mids.push_back(mid_price(w.snapshots.front()) - w.returns.front());
  for (const auto& s : w.snapshots) mids.push_back(mid_price(s));
  return mids;
}

struct Pools {
  std::vector<std::vector<double>> returns;  // per horizon
  std::vector<double> spread;
  std::vector<std::vector<double>> level_volume;
  Eigen::MatrixXd volume_diffs;
};

Pools pool(const std::vector<DecodedWindow>& windows, const std::vector<int>& horizons) {
  Pools p;
  p.returns.resize(horizons.size());
  std::size_t k = windows.empty() ? 0 : windows.front().snapshots.front().levels();
  p.level_volume.resize(2 * k);
  std::size_t diff_rows = 0;
  for (const auto& w : windows) diff_rows += w.snapshots.size() > 0 ? w.snapshots.size() - 1 : 0;
  p.volume_diffs.resize(static_cast<Eigen::Index>(diff_rows), static_cast<Eigen::Index>(2 * k));
  Eigen::Index row = 0;
  for (const auto& w : windows) {
    if (w.snapshots.empty()) continue;
    const auto mids = mids_of(w);
    for (std::size_t h = 0; h < horizons.size(); ++h) {
      const auto step = static_cast<std::size_t>(horizons[h]);
      for (std::size_t i = 0; i + step < mids.size(); ++i) p.returns[h].push_back(mids[i + step] - mids[i]);
    }
    for (std::size_t s = 0; s < w.snapshots.size(); ++s) {
      const auto& b = w.snapshots[s];
      p.spread.push_back(b.ask_price[0] - b.bid_price[0]);
      for (std::size_t i = 0; i < k; ++i) {
        p.level_volume[i].push_back(b.ask_volume[i]);
        p.level_volume[k + i].push_back(b.bid_volume[i]);
      }
      if (s == 0) continue;
      const auto& prev = w.snapshots[s - 1];
      for (std::size_t i = 0; i < k; ++i) {
        p.volume_diffs(row, static_cast<Eigen::Index>(i)) = b.ask_volume[i] - prev.ask_volume[i];
        p.volume_diffs(row, static_cast<Eigen::Index>(k + i)) = b.bid_volume[i] - prev.bid_volume[i];
      }
      ++row;
    }
  }
  return p;
}

std::vector<double> component_values(const std::vector<RegimeVector>& regimes, RegimeComponent c) {
  std::vector<double> v;
  v.reserve(regimes.size());
  for (const auto& r : regimes) v.push_back(component_summary(r, c));
  return v;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> mean_abs_return_acf(const std::vector<DecodedWindow>& windows, int max_lag) {
  std::vector<double> sum(static_cast<std::size_t>(max_lag), 0.0);
  std::size_t used = 0;
  for (const auto& w : windows) {
    std::vector<double> a(w.returns.size());
    std::transform(w.returns.begin(), w.returns.end(), a.begin(), [](double r) { return std::abs(r); });
    const auto acf = autocorrelation(a, max_lag);
    if (acf.size() != sum.size()) continue;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += acf[i];
    ++used;
  }
  if (used == 0) return {};
  for (double& v : sum) v /= static_cast<double>(used);
  return sum;
}

StylizedFacts stylized_facts(const std::vector<DecodedWindow>& real, const std::vector<DecodedWindow>& generated,
                             int bins) {
  StylizedFacts f;
  f.horizons = kReturnHorizons;
  const Pools pr = pool(real, f.horizons);
  const Pools pg = pool(generated, f.horizons);
  for (std::size_t h = 0; h < f.horizons.size(); ++h) f.returns.push_back(histogram_pair(pr.returns[h], pg.returns[h], bins));
  f.spread = histogram_pair(pr.spread, pg.spread, bins);
  f.acf_real = mean_abs_return_acf(real);
  f.acf_generated = mean_abs_return_acf(generated);
  f.volume_diff_corr_real = correlation_matrix(pr.volume_diffs);
  f.volume_diff_corr_generated = correlation_matrix(pg.volume_diffs);
  const std::size_t rows = std::max(pr.level_volume.size(), pg.level_volume.size());
  for (std::size_t j = 0; j < rows; ++j) {
    const std::vector<double> empty;
    f.level_volume.push_back(histogram_pair(j < pr.level_volume.size() ? pr.level_volume[j] : empty,
                                            j < pg.level_volume.size() ? pg.level_volume[j] : empty, bins));
  }
  return f;
}

DecodedSet decode_set(const std::vector<EncodedBlock>& futures, const std::vector<double>& anchors,
                      const PreprocessStats& stats) {
  if (futures.size() != anchors.size()) throw ConfigError("decode_set needs one anchor per future");
  DecodedSet out;
  out.windows.reserve(futures.size());
  for (std::size_t i = 0; i < futures.size(); ++i) {
    DecodedWindow d = decode_future(futures[i], anchors[i], stats);
    const EncodedBlock re = encode_window(anchors[i], d.snapshots, stats);
    for (std::size_t s = 0; s < re.steps(); ++s) {
      for (std::size_t j = 0; j < re.rows(); ++j) {
        out.price_features.push_back(re.price(s, j));
        out.volume_features.push_back(re.volume(s, j));
      }
    }
    out.regimes.push_back(compute_regime(anchors[i], d.snapshots));
    out.clamp_count += d.clamp_count;
    out.windows.push_back(std::move(d));
  }
  return out;
}

EvalReport compare_sets(const std::string& scenario, const DecodedSet& real, const DecodedSet& gen) {
  EvalReport r;
  r.scenario = scenario;
  r.n_real = real.windows.size();
  r.n_generated = gen.windows.size();
  r.clamp_count = gen.clamp_count;
  if (real.windows.empty() || gen.windows.empty()) return r;
  r.price = distance_quad(real.price_features, gen.price_features);
  r.volume = distance_quad(real.volume_features, gen.volume_features);
  for (RegimeComponent c : kAllComponents) {
    RegimeComparison cmp;
    cmp.component = c;
    const auto a = component_values(real.regimes, c);
    const auto b = component_values(gen.regimes, c);
    cmp.distance = distance_quad(a, b);
    cmp.mean_real = mean_of(a);
    cmp.mean_generated = mean_of(b);
    r.regimes.push_back(cmp);
  }
  r.facts = stylized_facts(real.windows, gen.windows);
  return r;
}

std::vector<const WindowPair*> spaced_subset(const std::vector<WindowPair>& windows, std::size_t max_count) {
  std::vector<const WindowPair*> out;
  if (max_count == 0 || max_count >= windows.size()) {
    for (const auto& w : windows) out.push_back(&w);
    return out;
  }
  for (std::size_t i = 0; i < max_count; ++i) out.push_back(&windows[i * windows.size() / max_count]);
  return out;
}

namespace {

DecodedSet decode_real(const std::vector<const WindowPair*>& windows, const PreprocessStats& stats) {
  std::vector<EncodedBlock> futures;
  std::vector<double> anchors;
  for (const auto* w : windows) {
    futures.push_back(w->future);
    anchors.push_back(w->anchor_mid);
  }
  return decode_set(futures, anchors, stats);
}

DecodedSet generate_set(TrajectoryGenerator& gen, const std::vector<const WindowPair*>& windows,
                        const std::vector<ConditionBundle>& bundles, std::uint64_t seed) {
  const auto futures = gen.generate(bundles, seed);
  std::vector<double> anchors;
  for (const auto* w : windows) anchors.push_back(w->anchor_mid);
  return decode_set(futures, anchors, gen.stats());
}

}  // namespace

EvalReport realism_eval(TrajectoryGenerator& generator, const std::vector<WindowPair>& test, std::uint64_t seed,
                        std::size_t max_windows) {
  if (test.empty()) throw DataError("empty test set");
  const auto chosen = spaced_subset(test, max_windows);
  std::vector<ConditionBundle> bundles;
  for (const auto* w : chosen) bundles.push_back(observed_bundle(*w));
  const DecodedSet real = decode_real(chosen, generator.stats());
  const DecodedSet gen = generate_set(generator, chosen, bundles, seed);
  return compare_sets("observed", real, gen);
}

CounterfactualReport counterfactual_eval(TrajectoryGenerator& generator, const std::vector<WindowPair>& train,
                                         const std::vector<WindowPair>& test,
                                         const std::vector<RegimeComponent>& components, double q,
                                         std::size_t max_histories, std::uint64_t seed) {
  if (train.empty() || test.empty()) throw DataError("counterfactual evaluation needs train and test windows");
  std::vector<RegimeVector> train_regimes;
  train_regimes.reserve(train.size());
  for (const auto& w : train) train_regimes.push_back(w.regime);
  const auto histories = spaced_subset(test, max_histories);

  CounterfactualReport out;
  out.q = q;
  for (std::size_t ci = 0; ci < components.size(); ++ci) {
    const RegimeComponent c = components[ci];
    const TailThresholds th = tail_thresholds(train_regimes, c, q);
    DirectionalResult dir;
    dir.component = c;
    for (TailSide side : {TailSide::high, TailSide::low}) {
      CounterfactualScenario sc;
      sc.component = c;
      sc.side = side;
      sc.target = regime_quantile_targets(train_regimes, c, side, q);
      std::vector<const WindowPair*> tail;
      for (const auto& w : test) {
        const double v = component_summary(w.regime, c);
        if (side == TailSide::high ? v >= th.high : v <= th.low) tail.push_back(&w);
      }
      std::vector<ConditionBundle> bundles;
      for (const auto* w : histories) {
        auto b = observed_bundle(*w);
        b.regime = apply_target(w->regime, sc.target);
        bundles.push_back(std::move(b));
      }
      const std::uint64_t scenario_seed = seed + 1000 * (ci + 1) + (side == TailSide::high ? 0 : 1);
      const DecodedSet gen = generate_set(generator, histories, bundles, scenario_seed);
      const DecodedSet real = decode_real(tail, generator.stats());
      sc.report = compare_sets(std::string(to_string(c)) + "_" + std::string(to_string(side)), real, gen);
      sc.realized = component_values(gen.regimes, c);
      if (side == TailSide::high) {
        dir.mean_high = mean_of(sc.realized);
        dir.n_high = sc.realized.size();
      } else {
        dir.mean_low = mean_of(sc.realized);
        dir.n_low = sc.realized.size();
      }
      out.scenarios.push_back(std::move(sc));
    }
    const auto& high = out.scenarios[out.scenarios.size() - 2].realized;
    const auto& low = out.scenarios.back().realized;
    dir.statistic = dir.mean_high - dir.mean_low;
    if (high.size() >= 2 && low.size() >= 2) dir.test = welch_t_test_greater(high, low);
    out.directional.push_back(dir);
  }
  return out;
}

io::json to_json(const DistanceQuad& d) {
  return {{"ks", d.ks}, {"wasserstein", d.wasserstein}, {"kl", d.kl}, {"js", d.js}};
}

io::json to_json(const EvalReport& r) {
  io::json regimes = io::json::array();
  for (const auto& c : r.regimes) {
    regimes.push_back({{"component", to_string(c.component)},
                       {"distance", to_json(c.distance)},
                       {"mean_real", c.mean_real},
                       {"mean_generated", c.mean_generated}});
  }
  return {{"scenario", r.scenario},
          {"n_real", r.n_real},
          {"n_generated", r.n_generated},
          {"groups", {{"price", to_json(r.price)}, {"volume", to_json(r.volume)}}},
          {"regimes", regimes},
          {"clamp_count", r.clamp_count}};
}

io::json to_json(const CounterfactualReport& r) {
  io::json scenarios = io::json::array();
  for (const auto& s : r.scenarios) {
    scenarios.push_back({{"component", to_string(s.component)},
                         {"side", to_string(s.side)},
                         {"target", s.target.scalar},
                         {"tail_count", s.target.tail_count},
                         {"realized_mean", mean_of(s.realized)},
                         {"report", to_json(s.report)}});
  }
  io::json dirs = io::json::array();
  for (const auto& d : r.directional) {
    dirs.push_back({{"component", to_string(d.component)},
                    {"mean_high", d.mean_high},
                    {"mean_low", d.mean_low},
                    {"statistic", d.statistic},
                    {"t", d.test.statistic},
                    {"dof", d.test.dof},
                    {"p_value", d.test.p_value},
                    {"n_high", d.n_high},
                    {"n_low", d.n_low},
                    {"sign_correct", d.sign_correct()}});
  }
  return {{"q", r.q}, {"scenarios", scenarios}, {"directional", dirs}};
}

namespace {

using io::format_double;

std::string quad_cells(const DistanceQuad& d) {
  return format_double(d.ks) + "," + format_double(d.wasserstein) + "," + format_double(d.kl) + "," +
         format_double(d.js);
}

void write_histogram_csv(const fs::path& path, const HistogramPair& h) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,real,generated\n";
  const std::size_t bins = h.real.size();
  const double width = bins ? (h.hi - h.lo) / static_cast<double>(bins) : 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    os << format_double(h.lo + width * static_cast<double>(i)) << ','
       << format_double(h.lo + width * static_cast<double>(i + 1)) << ',' << format_double(h.real[i]) << ','
       << format_double(h.generated[i]) << '\n';
  }
  io::write_text(path, os.str());
}

void write_matrix_csv(const fs::path& path, const Eigen::MatrixXd& m) {
  std::ostringstream os;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << format_double(m(i, j));
    os << '\n';
  }
  io::write_text(path, os.str());
}

void write_facts(const StylizedFacts& f, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t h = 0; h < f.returns.size(); ++h) {
    write_histogram_csv(dir / ("returns_h" + std::to_string(f.horizons[h]) + ".csv"), f.returns[h]);
  }
  write_histogram_csv(dir / "spread.csv", f.spread);
  std::ostringstream acf;
  acf << "lag,real,generated\n";
  for (std::size_t i = 0; i < static_cast<std::size_t>(kAcfLags); ++i) {
    acf << i + 1 << ',' << (i < f.acf_real.size() ? format_double(f.acf_real[i]) : "") << ','
        << (i < f.acf_generated.size() ? format_double(f.acf_generated[i]) : "") << '\n';
  }
  io::write_text(dir / "abs_return_acf.csv", acf.str());
  write_matrix_csv(dir / "volume_diff_corr_real.csv", f.volume_diff_corr_real);
  write_matrix_csv(dir / "volume_diff_corr_generated.csv", f.volume_diff_corr_generated);
  std::ostringstream lv;
  lv << "row,bin_lo,bin_hi,real,generated\n";
  for (std::size_t j = 0; j < f.level_volume.size(); ++j) {
    const auto& h = f.level_volume[j];
    const std::size_t bins = h.real.size();
    const double width = bins ? (h.hi - h.lo) / static_cast<double>(bins) : 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
      lv << j << ',' << format_double(h.lo + width * static_cast<double>(i)) << ','
         << format_double(h.lo + width * static_cast<double>(i + 1)) << ',' << format_double(h.real[i]) << ','
         << format_double(h.generated[i]) << '\n';
    }
  }
  io::write_text(dir / "level_volume.csv", lv.str());
}

}  // namespace

void write_realism_report(const EvalReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_json(dir / "report.json", to_json(report));
  std::ostringstream t;
  t << "group,ks,wasserstein,kl,js\n";
  t << "price," << quad_cells(report.price) << '\n';
  t << "volume," << quad_cells(report.volume) << '\n';
  io::write_text(dir / "realism_table.csv", t.str());
  std::ostringstream rg;
  rg << "component,ks,wasserstein,kl,js,mean_real,mean_generated\n";
  for (const auto& c : report.regimes) {
    rg << to_string(c.component) << ',' << quad_cells(c.distance) << ',' << format_double(c.mean_real) << ','
       << format_double(c.mean_generated) << '\n';
  }
  io::write_text(dir / "regime_distances.csv", rg.str());
  write_facts(report.facts, dir / "facts");
}

void write_counterfactual_report(const CounterfactualReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_json(dir / "report.json", to_json(report));
  std::ostringstream t;
  t << "component,side,group,ks,wasserstein,kl,js\n";
  for (const auto& s : report.scenarios) {
    t << to_string(s.component) << ',' << to_string(s.side) << ",price," << quad_cells(s.report.price) << '\n';
    t << to_string(s.component) << ',' << to_string(s.side) << ",volume," << quad_cells(s.report.volume) << '\n';
  }
  io::write_text(dir / "counterfactual_table.csv", t.str());
  std::ostringstream d;
  d << "component,mean_high,mean_low,statistic,t,dof,p_value,sign_correct\n";
  for (const auto& r : report.directional) {
    d << to_string(r.component) << ',' << format_double(r.mean_high) << ',' << format_double(r.mean_low) << ','
      << format_double(r.statistic) << ',' << format_double(r.test.statistic) << ',' << format_double(r.test.dof)
      << ',' << format_double(r.test.p_value) << ',' << (r.sign_correct() ? "true" : "false") << '\n';
  }
  io::write_text(dir / "directional.csv", d.str());
}

}  // namespace difflob
