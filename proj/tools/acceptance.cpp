// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difflob/checkpoint.hpp"
#include "difflob/cli.hpp"
#include "difflob/diffusion.hpp"
#include "difflob/error.hpp"
#include "difflob/generator.hpp"
#include "difflob/ingest.hpp"
#include "difflob/io.hpp"
#include "difflob/metrics.hpp"
#include "difflob/network.hpp"
#include "difflob/preprocess.hpp"
#include "difflob/regimes.hpp"

namespace fs = std::filesystem;
using namespace difflob;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failed checks so a criterion reports every broken property at once.
class Checks {
 public:
  void require(bool ok, const std::string& what) {
    ++count_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  Outcome outcome(const std::string& summary) const {
    if (failed_ == 0) return {true, summary};
    std::ostringstream os;
    os << failed_ << "/" << count_ << " checks failed";
    for (const auto& f : failures_) os << "; " << f;
    return {false, os.str()};
  }

 private:
  std::size_t count_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

bool bit_equal(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

double rel_err(double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

// ---------------------------------------------------------------------------

Outcome diffusion_core() {
  const auto schedule = build_schedule();
  const Eigen::Index dim = 16, n = 10000;
  std::mt19937_64 rng(20240601);
  const ScoreField score = [](const Eigen::MatrixXf& x, double, bool) { return Eigen::MatrixXf(-x); };
  SampleOptions so;
  so.guidance = 0.0;
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXf x = ancestral_sample(score, schedule, dim, n, rng, so);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Checks c;
  c.require(schedule.steps() == 100, "N = 100");
  double worst_mean = 0, lo_var = 1e9, hi_var = 0;
  for (Eigen::Index i = 0; i < dim; ++i) {
    const Eigen::ArrayXd row = x.row(i).cast<double>().transpose().array();
    const double mean = row.mean();
    const double var = (row - mean).square().sum() / static_cast<double>(n - 1);
    worst_mean = std::max(worst_mean, std::abs(mean));
    lo_var = std::min(lo_var, var);
    hi_var = std::max(hi_var, var);
    c.require(std::abs(mean) < 0.05, "coordinate " + std::to_string(i) + " mean " + fmt(mean));
    c.require(var >= 0.85 && var <= 1.15, "coordinate " + std::to_string(i) + " variance " + fmt(var));
  }
  c.require(secs < 60.0, "runtime " + fmt(secs) + " s");
  return c.outcome("max |mean| " + fmt(worst_mean) + ", variance in [" + fmt(lo_var) + ", " + fmt(hi_var) + "], " +
                   fmt(secs) + " s");
}

Outcome forward_marginal() {
  const auto schedule = build_schedule();
  const Eigen::Index n = 200000;
  const double x0v = 1.5;
  std::mt19937_64 rng(77);
  Checks c;
  std::ostringstream summary;
  for (int level : {1, 50, 100}) {
    const int i = level - 1;
    const Eigen::MatrixXd x0 = Eigen::MatrixXd::Constant(1, n, x0v);
    Eigen::MatrixXd z(1, n);
    fill_normal(z, rng);
    const Eigen::MatrixXd xt = forward_perturb(x0, schedule, i, z);
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(i)];
    const double want_mean = std::sqrt(ab) * x0v;
    const double want_var = 1.0 - ab;
    const double mean = xt.mean();
    const double var = (xt.array() - mean).square().sum() / static_cast<double>(n - 1);
    const double se_mean = std::sqrt(want_var / static_cast<double>(n));
    const double se_var = want_var * std::sqrt(2.0 / static_cast<double>(n - 1));
    c.require(std::abs(mean - want_mean) <= 3 * se_mean, "level " + std::to_string(level) + " mean " + fmt(mean) +
                                                              " vs " + fmt(want_mean));
    c.require(std::abs(var - want_var) <= 3 * se_var,
              "level " + std::to_string(level) + " variance " + fmt(var) + " vs " + fmt(want_var));
    summary << "level " << level << ": mean " << fmt((mean - want_mean) / se_mean) << " se, var "
            << fmt((var - want_var) / se_var) << " se; ";
  }
  return c.outcome(summary.str());
}

Outcome zero_init_identity(const fs::path& stage1_dir, const fs::path& work) {
  const Checkpoint s1 = load_checkpoint(stage1_dir);
  Checks c;
  c.require(s1.stage == 1 && s1.config.use_control, "stage-1 checkpoint with a control pathway");
  // Stage-2 start: the stage-1 EMA weights with a fresh control pathway.
  Denoiser<float> start = s1.model(true);
  start.init_control_from_base();
  const auto& mc = start.config();
  const cli::Dataset data = cli::load_dataset(stage1_dir.parent_path().parent_path().parent_path() / "preprocess");
  const std::size_t b = std::min<std::size_t>(8, data.test.size());
  std::vector<ConditionBundle> bundles;
  for (std::size_t i = 0; i < b; ++i) bundles.push_back(observed_bundle(data.test[i]));
  if (b > 1) bundles[1].present = false;
  const auto cond = make_condition_batch(bundles, data.stats, mc.tau);
  Mat<float> x(2, static_cast<Eigen::Index>(b) * mc.levels * mc.tau);
  std::mt19937_64 rng(5);
  fill_normal(x, rng);
  std::vector<double> t;
  for (std::size_t i = 0; i < b; ++i) t.push_back(static_cast<double>(i + 1) / static_cast<double>(b));

  c.require(bit_equal(start.forward(x, t, cond, ForwardMode::base), start.forward(x, t, cond, ForwardMode::controlled)),
            "bit identity at stage-2 start");
  Checkpoint saved = s1;
  saved.stage = 2;
  saved.params = start.params();
  saved.ema_params = start.params();
  const fs::path dir = work / "zero-init-checkpoint";
  fs::remove_all(dir);
  save_checkpoint(saved, dir);
  const Denoiser<float> reloaded = load_checkpoint(dir).model(true);
  const auto base = reloaded.forward(x, t, cond, ForwardMode::base);
  c.require(bit_equal(base, reloaded.forward(x, t, cond, ForwardMode::controlled)), "bit identity after reload");
  c.require(bit_equal(base, start.forward(x, t, cond, ForwardMode::base)), "reload reproduces the base output");
  return c.outcome(std::to_string(b) + " samples, bit-identical at stage-2 start and after reload");
}

Outcome guidance_algebra() {
  std::mt19937_64 rng(3);
  Eigen::MatrixXd sc(40, 6), su(40, 6);
  fill_normal(sc, rng);
  fill_normal(su, rng);
  Checks c;
  c.require(guided_score(sc, su, 0.0) == sc, "w = 0 gives the conditional score exactly");
  c.require(guided_score(sc, su, -1.0) == su, "w = -1 gives the unconditional score exactly");
  double worst = 0;
  for (const auto& w : std::vector<std::array<double, 3>>{{0.5, 1.5, 4.0}, {-0.7, 0.2, 2.5}, {1.0, 3.0, 7.5}}) {
    const Eigen::MatrixXd g1 = guided_score(sc, su, w[0]);
    const Eigen::MatrixXd g2 = guided_score(sc, su, w[1]);
    const Eigen::MatrixXd g3 = guided_score(sc, su, w[2]);
    const Eigen::MatrixXd off = (g3 - g1) - ((w[2] - w[0]) / (w[1] - w[0])) * (g2 - g1);
    worst = std::max(worst, off.cwiseAbs().maxCoeff());
  }
  c.require(worst < 1e-7, "collinearity residual " + fmt(worst));
  return c.outcome("exact at w = 0 and w = -1, collinearity residual " + fmt(worst));
}

Outcome gradient_check() {
  ModelConfig mc;
  mc.n_blocks = 2;
  mc.channels = 6;
  mc.levels = 4;
  mc.tau = 8;
  mc.t_emb_dim = 6;
  mc.local_dim = 5;
  mc.global_dim = 4;
  mc.dilation_cycle = 2;
  Denoiser<double> net(mc, 11);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : net.params()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
  }
  const Eigen::Index b = 3;
  ConditionBatch<double> cond;
  cond.local.resize(mc.local_inputs(), b * mc.tau);
  cond.global.resize(2, b);
  fill_normal(cond.local, rng);
  fill_normal(cond.global, rng);
  cond.present = {1, 0, 1};
  Mat<double> x(2, b * mc.levels * mc.tau), noise(2, b * mc.levels * mc.tau);
  fill_normal(x, rng);
  fill_normal(noise, rng);
  const std::vector<double> t{0.05, 0.4, 0.93};

  Checks c;
  double worst = 0;
  std::size_t probes = 0;
  for (ForwardMode mode : {ForwardMode::base, ForwardMode::controlled}) {
    const TrainableGroups groups{mode == ForwardMode::base, mode == ForwardMode::controlled};
    Denoiser<double>::Cache cache;
    const Mat<double> eps = net.forward(x, t, cond, mode, &cache);
    auto grads = Gradients<double>::like(net.params());
    net.backward(dsm_loss_grad(eps, noise), cache, grads, groups);
    auto loss = [&] { return dsm_loss(net.forward(x, t, cond, mode), noise); };
    std::uniform_int_distribution<Eigen::Index> pick(0, 1 << 30);
    for (std::size_t i = 0; i < net.params().size(); ++i) {
      auto& p = net.params()[i];
      if ((p.group == ParamGroup::base) != groups.base) continue;
      for (int k = 0; k < 4; ++k) {
        const Eigen::Index j = pick(rng) % p.value.size();
        const double saved = p.value.data()[j];
        const double h = 1e-5;
        p.value.data()[j] = saved + h;
        const double lp = loss();
        p.value.data()[j] = saved - h;
        const double lm = loss();
        p.value.data()[j] = saved;
        const double numeric = (lp - lm) / (2 * h);
        const double analytic = grads.values[i].data()[j];
        const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        const double rel = std::abs(numeric - analytic) / scale;
        worst = std::max(worst, rel);
        ++probes;
        c.require(rel < 1e-3, p.name + " relative error " + fmt(rel));
      }
    }
  }
  return c.outcome(std::to_string(probes) + " probes over both groups, worst relative error " + fmt(worst));
}

Outcome round_trip() {
  SynthConfig sc;
  sc.seed = 404;
  sc.n_seconds = 3000;
  sc.levels = 10;
  const SnapshotSeries s = synthesize_lob(sc);
  PreprocessStats st = fit_stats(std::vector<SnapshotSeries>{s}, sc.tick);
  const auto enc = encode_series(s, st);
  const auto windows = make_windows(enc, s, 1);
  Checks c;
  std::size_t books = 0, volumes = 0;
  double worst_volume = 0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto d = decode_future(windows[w].future, windows[w].anchor_mid, st);
    const std::size_t first = w + kHistoryLength + 1;
    for (std::size_t i = 0; i < d.snapshots.size(); ++i) {
      const auto& raw = s.snapshots[first + i];
      const auto& dec = d.snapshots[i];
      ++books;
      c.require(dec.ask_price == raw.ask_price && dec.bid_price == raw.bid_price,
                "prices differ in window " + std::to_string(w) + " step " + std::to_string(i));
      for (std::size_t k = 0; k < raw.levels(); ++k) {
        for (auto [got, want] : {std::pair{dec.ask_volume[k], raw.ask_volume[k]}, {dec.bid_volume[k], raw.bid_volume[k]}}) {
          if (want > st.v_cap) continue;
          ++volumes;
          worst_volume = std::max(worst_volume, std::abs(got - want));
          c.require(std::abs(got - want) <= 1.0, "volume off by " + fmt(got - want));
        }
      }
    }
  }
  c.require(books > 50000, "enough books checked");
  return c.outcome(std::to_string(windows.size()) + " windows, " + std::to_string(books) + " books exact, " +
                   std::to_string(volumes) + " capped-range volumes within " + fmt(worst_volume) + " shares");
}

Outcome regime_oracles() {
  SynthConfig sc;
  sc.seed = 505;
  sc.n_seconds = 6000;
  sc.levels = 10;
  const SnapshotSeries s = synthesize_lob(sc);
  const PreprocessStats st = fit_stats(std::vector<SnapshotSeries>{s}, sc.tick);
  const auto windows = make_windows(encode_series(s, st), s, 1);
  std::mt19937_64 rng(606);
  std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);
  Checks c;
  double worst = 0;
  auto check = [&](double got, double want, const std::string& what) {
    const double e = rel_err(got, want);
    worst = std::max(worst, e);
    c.require(e <= 1e-6, what + " " + fmt(got) + " vs " + fmt(want));
  };
  auto mid = [](const LobSnapshot& b) { return (b.ask_price[0] + b.bid_price[0]) / 2; };
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t w = pick(rng);
    const RegimeVector& r = windows[w].regime;
    // Raw books of the future: snapshots w+33 .. w+64; the mid before them is raw w+32.
    const std::size_t first = w + kHistoryLength + 1;
    const double anchor = mid(s.snapshots[first - 1]);
    double prev = anchor, sum = 0, sum_sq = 0;
    for (std::size_t i = 0; i < kFutureLength; ++i) {
      const double m = mid(s.snapshots[first + i]);
      sum += m - prev;
      sum_sq += (m - prev) * (m - prev);
      prev = m;
    }
    const double n = static_cast<double>(kFutureLength);
    check(r.trend, prev - anchor, "trend");
    check(r.vol, std::sqrt(std::max(0.0, sum_sq / n - (sum / n) * (sum / n))), "vol");
    c.require(r.liq.size() == kFutureLength && r.imb.size() == kFutureLength, "per-step lengths");
    for (std::size_t i = 0; i < kFutureLength && i < r.liq.size(); ++i) {
      const auto& b = s.snapshots[first + i];
      double ask = 0, bid = 0;
      for (std::size_t k = 0; k < b.levels(); ++k) {
        ask += b.ask_volume[k];
        bid += b.bid_volume[k];
      }
      check(r.liq[i], ask + bid, "liq");
      check(r.imb[i], ask + bid > 0 ? (ask - bid) / (ask + bid) : 0.0, "imb");
    }
  }
  return c.outcome("100 windows, worst relative error " + fmt(worst));
}

Outcome metric_oracles() {
  using V = std::vector<double>;
  Checks c;
  auto near = [&](double got, double want, const std::string& what) {
    c.require(std::abs(got - want) <= 1e-6, what + " = " + fmt(got) + ", want " + fmt(want));
  };
  near(ks_distance(V{0, 1}, V{0.5, 1.5}), 0.5, "KS({0,1},{0.5,1.5})");
  near(ks_distance(V{0, 1}, V{5, 6}), 1.0, "KS disjoint");
  near(wasserstein_1d(V{0, 2}, V{1, 1}), 1.0, "W({0,2},{1,1})");
  near(wasserstein_1d(V{3}, V{-2}), 5.0, "W point masses");
  const auto d = kl_js_from_histograms(V{0.5, 0.5}, V{0.25, 0.75});
  near(d.kl, 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), "KL([.5,.5],[.25,.75])");
  c.require(std::abs(d.kl - 0.1438) < 1e-4, "KL approx 0.1438");
  c.require(std::abs(kl_js_from_histograms(V{1, 0}, V{0, 1}).js - std::log(2.0)) < 1e-3, "JS maximal limit");

  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0, 1);
  std::uniform_int_distribution<int> len(1, 60);
  std::uniform_real_distribution<double> u(-5, 5);
  V a(500);
  for (auto& x : a) x = nd(rng);
  const auto same = distance_quad(a, a);
  c.require(same.ks == 0 && same.wasserstein == 0 && std::abs(same.kl) < 1e-9 && std::abs(same.js) < 1e-9,
            "all four vanish on identical samples");
  for (int trial = 0; trial < 1000; ++trial) {
    V x(static_cast<std::size_t>(len(rng))), y(static_cast<std::size_t>(len(rng)));
    const int mode = trial % 3;  // continuous, heavily tied, disjoint
    for (auto& v : x) v = mode == 1 ? std::round(u(rng)) : u(rng);
    for (auto& v : y) v = mode == 1 ? std::round(u(rng)) : (mode == 2 ? 20 + u(rng) : u(rng) * 2 + 1);
    const auto q = distance_quad(x, y);
    c.require(q.ks >= 0 && q.ks <= 1, "KS in [0, 1]");
    c.require(q.js >= -1e-12 && q.js <= std::log(2.0) + 1e-12, "JS in [0, ln 2]");
    c.require(q.kl >= -1e-12, "KL non-negative");
    c.require(q.wasserstein >= 0, "W non-negative");
  }
  return c.outcome("hand examples to 1e-6, zero on identical samples, bounds hold on 1000 fuzzed pairs");
}

// ---------------------------------------------------------------------------
// Desk-scale criteria read a finished pipeline directory.

double group_metric(const io::json& report, const char* group, const char* metric) {
  return report.at("groups").at(group).at(metric).get<double>();
}

Outcome desk_realism(const fs::path& run) {
  const auto realism = io::read_json(run / "eval" / "realism" / "report.json");
  const auto cfg = io::read_json(run / "run_config.json");
  const auto timings = io::read_json(run / "timings.json");
  const auto meta = io::read_json(run / "preprocess" / "train" / "meta.json");
  Checks c;
  const auto windows = meta.at("count").get<std::size_t>();
  const int channels = cfg.at("model").at("channels").get<int>();
  const double train_s = timings.at("train_s").get<double>();
  c.require(windows >= 20000, "training windows " + std::to_string(windows));
  c.require(channels == 64, "channels " + std::to_string(channels));
  c.require(train_s <= 7200, "training took " + fmt(train_s) + " s");
  const double pks = group_metric(realism, "price", "ks");
  const double vks = group_metric(realism, "volume", "ks");
  c.require(pks < 0.25, "price KS " + fmt(pks));
  c.require(vks < 0.25, "volume KS " + fmt(vks));
  std::ostringstream os;
  os << windows << " windows, train " << fmt(train_s / 60) << " min; price KS " << fmt(pks) << ", volume KS "
     << fmt(vks);
  if (!fs::exists(run / "eval" / "baseline" / "report.json")) {
    c.require(false, "baseline report missing");
  } else {
    const auto base = io::read_json(run / "eval" / "baseline" / "report.json");
    os << "; price vs untrained:";
    for (const char* m : {"ks", "wasserstein", "kl", "js"}) {
      const double mine = group_metric(realism, "price", m);
      const double theirs = group_metric(base, "price", m);
      c.require(mine < theirs, std::string("price ") + m + " " + fmt(mine) + " not below untrained " + fmt(theirs));
      os << " " << m << " " << fmt(mine) << "<" << fmt(theirs);
    }
  }
  return c.outcome(os.str());
}

Outcome desk_counterfactual(const fs::path& run) {
  const auto cf = io::read_json(run / "eval" / "counterfactual" / "report.json");
  Checks c;
  std::ostringstream os;
  std::set<std::string> seen;
  for (const auto& d : cf.at("directional")) {
    const auto name = d.at("component").get<std::string>();
    seen.insert(name);
    const double stat = d.at("statistic").get<double>();
    const double p = d.at("p_value").get<double>();
    const auto nh = d.at("n_high").get<std::size_t>();
    const auto nl = d.at("n_low").get<std::size_t>();
    c.require(nh >= 200 && nl >= 200, name + " has " + std::to_string(nh) + "/" + std::to_string(nl) + " generations");
    c.require(stat > 0 && p < 0.01, name + " statistic " + fmt(stat) + ", p " + fmt(p));
    os << name << " " << fmt(stat) << " (p " << fmt(p) << ") ";
  }
  c.require(seen == std::set<std::string>{"trend", "vol", "liq", "imb"}, "all four components reported");
  return c.outcome(os.str());
}

Outcome usefulness_integrity(const fs::path& run) {
  const auto u = io::read_json(run / "eval" / "usefulness" / "report.json");
  Checks c;
  std::map<std::string, double> cell;
  for (const auto& x : u.at("cells")) {
    const std::string key =
        x.at("task").get<std::string>() + "/" + x.at("setting").get<std::string>() + "/" + x.at("tail").get<std::string>();
    c.require(!cell.count(key), "duplicate cell " + key);
    cell[key] = x.at("value").get<double>();
    c.require(std::isfinite(cell[key]), key + " finite");
  }
  c.require(cell.size() == 12, std::to_string(cell.size()) + " cells");
  std::ostringstream os;
  for (const char* task : {"trend", "liquidity"}) {
    for (const char* tail : {"high", "low"}) {
      const std::string pre = std::string(task) + "/";
      const std::string suf = std::string("/") + tail;
      if (!cell.count(pre + "Real" + suf) || !cell.count(pre + "Real*2" + suf) || !cell.count(pre + "Real+CF" + suf)) {
        c.require(false, pre + tail + " incomplete");
        continue;
      }
      const double real = cell[pre + "Real" + suf];
      const double twice = cell[pre + "Real*2" + suf];
      c.require(std::abs(real - twice) <= 1e-9, pre + tail + " Real " + fmt(real) + " vs Real*2 " + fmt(twice));
      os << task << "-" << tail << " Real " << fmt(real) << " Real+CF " << fmt(cell[pre + "Real+CF" + suf]) << "; ";
    }
  }
  c.require(u.at("cf_samples").get<std::size_t>() > 0, "Real+CF used generated samples");
  return c.outcome("2x3x2 table, Real == Real*2; informational: " + os.str());
}

// Numeric-tolerant comparison of two report trees.
void compare_json(const io::json& a, const io::json& b, const std::string& where, Checks& c) {
  if (a.is_number() && b.is_number()) {
    const double x = a.get<double>(), y = b.get<double>();
    c.require(std::abs(x - y) <= 1e-6 * std::max(1.0, std::max(std::abs(x), std::abs(y))), where + " " + fmt(x) +
                                                                                                  " vs " + fmt(y));
    return;
  }
  if (a.type() != b.type() || a.size() != b.size()) {
    c.require(false, where + " differs in shape");
    return;
  }
  if (a.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (!b.contains(it.key())) {
        c.require(false, where + "." + it.key() + " missing");
        continue;
      }
      compare_json(it.value(), b.at(it.key()), where + "." + it.key(), c);
    }
  } else if (a.is_array()) {
    for (std::size_t i = 0; i < a.size(); ++i) compare_json(a[i], b[i], where + "[" + std::to_string(i) + "]", c);
  } else {
    c.require(a == b, where + " differs");
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

void compare_csv(const fs::path& a, const fs::path& b, const std::string& where, Checks& c) {
  std::ifstream fa(a), fb(b);
  std::string la, lb;
  std::size_t row = 0;
  while (true) {
    const bool ga = static_cast<bool>(std::getline(fa, la));
    const bool gb = static_cast<bool>(std::getline(fb, lb));
    if (ga != gb) {
      c.require(false, where + " row counts differ");
      return;
    }
    if (!ga) return;
    const auto ca = split_csv_line(la), cb = split_csv_line(lb);
    if (ca.size() != cb.size()) {
      c.require(false, where + " row " + std::to_string(row) + " widths differ");
      return;
    }
    for (std::size_t i = 0; i < ca.size(); ++i) {
      char* ea = nullptr;
      char* eb = nullptr;
      const double x = std::strtod(ca[i].c_str(), &ea);
      const double y = std::strtod(cb[i].c_str(), &eb);
      if (!ca[i].empty() && *ea == '\0' && !cb[i].empty() && *eb == '\0') {
        c.require(std::abs(x - y) <= 1e-6 * std::max(1.0, std::max(std::abs(x), std::abs(y))),
                  where + " row " + std::to_string(row) + " col " + std::to_string(i));
      } else {
        c.require(ca[i] == cb[i], where + " row " + std::to_string(row) + " col " + std::to_string(i));
      }
    }
    ++row;
  }
}

Outcome reproducibility(const fs::path& a, const fs::path& b) {
  Checks c;
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a / "eval")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    const fs::path other = b / rel;
    if (!fs::exists(other)) {
      c.require(false, rel.string() + " missing in the second run");
      continue;
    }
    ++files;
    if (e.path().extension() == ".json") {
      compare_json(io::read_json(e.path()), io::read_json(other), rel.string(), c);
    } else if (e.path().extension() == ".csv") {
      compare_csv(e.path(), other, rel.string(), c);
    }
  }
  c.require(files >= 10, "report files compared: " + std::to_string(files));
  return c.outcome(std::to_string(files) + " report files agree to 1e-6");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  fs::path work = "acceptance-work";
  fs::path tiny = fs::path(DIFFLOB_SOURCE_DIR) / "configs" / "tiny.json";
  fs::path desk = fs::path(DIFFLOB_SOURCE_DIR) / "configs" / "desk.json";
  fs::path desk_run;
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory; wiped at start");
  app.add_option("--tiny-config", tiny, "Config of the small pipeline used for reproducibility");
  app.add_option("--desk-config", desk, "Config of the desk-scale pipeline");
  app.add_option("--desk-run", desk_run,
                 "Desk-scale pipeline directory; reused when it holds finished reports, else trained there");
  app.add_option("--only", only, "Criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  cli::tune_allocator();
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  fs::remove_all(work);
  fs::create_directories(work);

  // Pipelines are built lazily so that --only runs stay short.
  std::optional<fs::path> tiny_a, tiny_b, desk_dir;
  auto run_tiny = [&](const char* name) {
    const fs::path dir = work / name;
    cli::run_pipeline(cli::run_config_from_json(io::read_json(tiny)), dir);
    return dir;
  };
  auto need_tiny_a = [&] {
    if (!tiny_a) tiny_a = run_tiny("tiny-a");
    return *tiny_a;
  };
  auto need_desk = [&] {
    if (!desk_dir) {
      desk_dir = desk_run.empty() ? work / "desk" : desk_run;
      if (!fs::exists(*desk_dir / "eval" / "usefulness" / "report.json")) {
        auto cfg = cli::run_config_from_json(io::read_json(desk));
        cfg.verbose = true;
        fs::remove_all(*desk_dir);
        cli::run_pipeline(cfg, *desk_dir);
      }
    }
    return *desk_dir;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"diffusion core recovers N(0, I)", diffusion_core},
      {"forward marginals", forward_marginal},
      {"zero-init control identity", [&] { return zero_init_identity(need_tiny_a() / "train" / "stage1" / "best", work); }},
      {"guidance algebra", guidance_algebra},
      {"gradient check", gradient_check},
      {"encode/decode round trip", round_trip},
      {"regime oracles", regime_oracles},
      {"metric oracles", metric_oracles},
      {"desk-scale controllable realism", [&] { return desk_realism(need_desk()); }},
      {"desk-scale counterfactual validity", [&] { return desk_counterfactual(need_desk()); }},
      {"usefulness protocol integrity", [&] { return usefulness_integrity(need_desk()); }},
      {"reproducibility", [&] {
         const fs::path a = need_tiny_a();
         if (!tiny_b) tiny_b = run_tiny("tiny-b");
         return reproducibility(a, *tiny_b);
       }},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!wanted(n)) continue;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.pass;
    std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
              << o.detail << " [" << fmt(secs) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
