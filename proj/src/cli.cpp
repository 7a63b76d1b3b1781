#include "difflob/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "difflob/error.hpp"

namespace difflob::cli {

namespace fs = std::filesystem;

namespace {

template <typename T>
void read_field(const io::json& doc, const char* key, T& field) {
  if (doc.contains(key)) field = doc.at(key).get<T>();
}

io::json to_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"n_seconds", c.n_seconds},
          {"levels", c.levels},
          {"open", c.open},
          {"start_price", c.start_price},
          {"drift", c.drift},
          {"vol", c.vol},
          {"base_depth", c.base_depth},
          {"depth_scale", c.depth_scale},
          {"imbalance_bias", c.imbalance_bias},
          {"tick", c.tick},
          {"regime_persistence", c.regime_persistence},
          {"drift_swing", c.drift_swing},
          {"vol_swing", c.vol_swing},
          {"depth_swing", c.depth_swing},
          {"imbalance_swing", c.imbalance_swing}};
}

SynthConfig synth_from_json(const io::json& doc, SynthConfig c) {
  read_field(doc, "seed", c.seed);
  read_field(doc, "n_seconds", c.n_seconds);
  read_field(doc, "levels", c.levels);
  read_field(doc, "open", c.open);
  read_field(doc, "start_price", c.start_price);
  read_field(doc, "drift", c.drift);
  read_field(doc, "vol", c.vol);
  read_field(doc, "base_depth", c.base_depth);
  read_field(doc, "depth_scale", c.depth_scale);
  read_field(doc, "imbalance_bias", c.imbalance_bias);
  read_field(doc, "tick", c.tick);
  read_field(doc, "regime_persistence", c.regime_persistence);
  read_field(doc, "drift_swing", c.drift_swing);
  read_field(doc, "vol_swing", c.vol_swing);
  read_field(doc, "depth_swing", c.depth_swing);
  read_field(doc, "imbalance_swing", c.imbalance_swing);
  return c;
}

ModelConfig model_from_json(const io::json& doc, const ModelConfig& defaults) {
  io::json merged = difflob::to_json(defaults);
  for (auto it = doc.begin(); it != doc.end(); ++it) merged[it.key()] = it.value();
  return model_config_from_json(merged);
}

std::vector<std::string> component_names(const std::vector<RegimeComponent>& cs) {
  std::vector<std::string> out;
  for (auto c : cs) out.emplace_back(to_string(c));
  return out;
}

void log(const RunConfig& config, const std::string& msg) {
  if (!config.verbose) return;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::cerr << '[' << std::put_time(&tm, "%H:%M:%S") << "] " << msg << '\n';
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

void validate(const RunConfig& c) {
  if (c.data.source != "synthetic" && c.data.source != "lobster") {
    throw ConfigError("data.source must be synthetic or lobster");
  }
  if (c.data.source == "synthetic") {
    validate(c.data.synth);
    if (c.data.synthetic_days < 1) throw ConfigError("data.synthetic_days must be at least 1");
  } else {
    if (c.data.orderbooks.empty()) throw ConfigError("lobster source needs at least one orderbook file");
    for (const auto& f : c.data.orderbooks) {
      if (!fs::exists(f)) throw ConfigError("orderbook file does not exist: " + f);
    }
    if (c.data.levels < 1) throw ConfigError("data.levels must be positive");
  }
  if (!(c.data.tick > 0)) throw ConfigError("data.tick must be positive");
  if (c.split.val_days < 1 || c.split.test_days < 1) throw ConfigError("split needs at least one val and test day");
  if (!(c.split.train_frac > 0) || !(c.split.val_frac > 0) || c.split.train_frac + c.split.val_frac >= 1) {
    throw ConfigError("split fractions must be positive and leave room for a test part");
  }
  if (c.split.stride == 0 || c.split.eval_stride == 0) throw ConfigError("window strides must be positive");
  validate(c.model);
  validate(c.stage1);
  validate(c.stage2);
  if (c.stages != "1" && c.stages != "2" && c.stages != "both") throw ConfigError("stages must be 1, 2 or both");
  if (c.sample.batch_size < 1) throw ConfigError("sample.batch_size must be positive");
  if (!(c.eval.q > 0 && c.eval.q < 0.5)) throw ConfigError("eval.q must lie in (0, 0.5)");
  if (c.eval.components.empty()) throw ConfigError("eval.components must name at least one component");
}

io::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"verbose", c.verbose},
          {"data",
           {{"source", c.data.source},
            {"synthetic", to_json(c.data.synth)},
            {"synthetic_days", c.data.synthetic_days},
            {"orderbooks", c.data.orderbooks},
            {"levels", c.data.levels},
            {"tick", c.data.tick}}},
          {"split",
           {{"val_days", c.split.val_days},
            {"test_days", c.split.test_days},
            {"train_frac", c.split.train_frac},
            {"val_frac", c.split.val_frac},
            {"stride", c.split.stride},
            {"eval_stride", c.split.eval_stride}}},
          {"model", difflob::to_json(c.model)},
          {"train", {{"stages", c.stages}, {"stage1", difflob::to_json(c.stage1)}, {"stage2", difflob::to_json(c.stage2)}}},
          {"sample", {{"guidance", c.sample.guidance}, {"batch_size", c.sample.batch_size}, {"use_ema", c.sample.use_ema}}},
          {"eval",
           {{"q", c.eval.q},
            {"realism_windows", c.eval.realism_windows},
            {"cf_histories", c.eval.cf_histories},
            {"usefulness_cf", c.eval.usefulness_cf},
            {"usefulness_max_train", c.eval.usefulness_max_train},
            {"baseline", c.eval.baseline},
            {"components", component_names(c.eval.components)}}}};
}

RunConfig run_config_from_json(const io::json& doc, RunConfig c) {
  try {
    read_field(doc, "seed", c.seed);
    read_field(doc, "verbose", c.verbose);
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      read_field(d, "source", c.data.source);
      if (d.contains("synthetic")) c.data.synth = synth_from_json(d.at("synthetic"), c.data.synth);
      read_field(d, "synthetic_days", c.data.synthetic_days);
      read_field(d, "orderbooks", c.data.orderbooks);
      read_field(d, "levels", c.data.levels);
      read_field(d, "tick", c.data.tick);
    }
    if (doc.contains("split")) {
      const auto& s = doc.at("split");
      read_field(s, "val_days", c.split.val_days);
      read_field(s, "test_days", c.split.test_days);
      read_field(s, "train_frac", c.split.train_frac);
      read_field(s, "val_frac", c.split.val_frac);
      read_field(s, "stride", c.split.stride);
      read_field(s, "eval_stride", c.split.eval_stride);
    }
    if (doc.contains("model")) c.model = model_from_json(doc.at("model"), c.model);
    if (doc.contains("train")) {
      const auto& t = doc.at("train");
      read_field(t, "stages", c.stages);
      if (t.contains("stage1")) c.stage1 = train_config_from_json(t.at("stage1"), c.stage1);
      if (t.contains("stage2")) c.stage2 = train_config_from_json(t.at("stage2"), c.stage2);
    }
    if (doc.contains("sample")) {
      const auto& s = doc.at("sample");
      read_field(s, "guidance", c.sample.guidance);
      read_field(s, "batch_size", c.sample.batch_size);
      read_field(s, "use_ema", c.sample.use_ema);
    }
    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      read_field(e, "q", c.eval.q);
      read_field(e, "realism_windows", c.eval.realism_windows);
      read_field(e, "cf_histories", c.eval.cf_histories);
      read_field(e, "usefulness_cf", c.eval.usefulness_cf);
      read_field(e, "usefulness_max_train", c.eval.usefulness_max_train);
      read_field(e, "baseline", c.eval.baseline);
      if (e.contains("components")) {
        c.eval.components.clear();
        for (const auto& name : e.at("components")) c.eval.components.push_back(parse_component(name.get<std::string>()));
      }
    }
  } catch (const io::json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  c.stage1.stage = 1;
  c.stage2.stage = 2;
  return c;
}

RunSeeds derive_seeds(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::array<std::uint32_t, 14> words{};
  seq.generate(words.begin(), words.end());
  auto w = [&words](int i) {
    return (static_cast<std::uint64_t>(words[2 * i]) << 32) | words[2 * i + 1];
  };
  return {w(0), w(1), w(2), w(3), w(4), w(5), w(6)};
}

namespace {

// LOBSTER names files SYMBOL_DATE_OPENMS_CLOSEMS_orderbook_LEVELS.csv.
struct LobsterName {
  std::string symbol = "UNKNOWN";
  std::string date;
  double open = kDefaultSessionOpen;
  double close = kDefaultSessionClose;
  fs::path message;
};

LobsterName parse_lobster_name(const fs::path& orderbook) {
  LobsterName n;
  const std::string stem = orderbook.stem().string();
  std::vector<std::string> parts;
  std::stringstream ss(stem);
  for (std::string part; std::getline(ss, part, '_');) parts.push_back(part);
  if (parts.size() >= 4) {
    n.symbol = parts[0];
    n.date = parts[1];
    try {
      n.open = std::stod(parts[2]) / 1000.0;
      n.close = std::stod(parts[3]) / 1000.0;
    } catch (const std::exception&) {
      n.open = kDefaultSessionOpen;
      n.close = kDefaultSessionClose;
    }
  } else {
    n.date = stem;
  }
  std::string name = orderbook.filename().string();
  if (const auto pos = name.find("orderbook"); pos != std::string::npos) {
    name.replace(pos, 9, "message");
    const fs::path candidate = orderbook.parent_path() / name;
    if (fs::exists(candidate)) n.message = candidate;
  }
  return n;
}

SnapshotSeries slice(const SnapshotSeries& s, std::size_t begin, std::size_t end, const std::string& tag) {
  SnapshotSeries out = s;
  out.date = s.date + tag;
  out.snapshots.assign(s.snapshots.begin() + static_cast<std::ptrdiff_t>(begin),
                       s.snapshots.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

std::vector<WindowPair> windows_of(const std::vector<SnapshotSeries>& series, const PreprocessStats& stats,
                                   std::size_t stride) {
  std::vector<WindowPair> out;
  for (const auto& s : series) {
    const auto encoded = encode_series(s, stats);
    auto w = make_windows(encoded, s, stride);
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  return out;
}

}  // namespace

std::vector<SnapshotSeries> ingest_series(const DataConfig& config) {
  std::vector<SnapshotSeries> out;
  if (config.source == "synthetic") {
    for (int d = 0; d < config.synthetic_days; ++d) {
      SynthConfig sc = config.synth;
      sc.seed = config.synth.seed + static_cast<std::uint64_t>(d);
      SnapshotSeries s = synthesize_lob(sc);
      s.date = "day" + std::to_string(d);
      out.push_back(std::move(s));
    }
    return out;
  }
  for (const auto& file : config.orderbooks) {
    const LobsterName name = parse_lobster_name(file);
    std::ifstream ob(file);
    if (!ob) throw DataError("cannot open orderbook file: " + file);
    std::ifstream msg;
    if (!name.message.empty()) msg.open(name.message);
    const ParsedEvents events = parse_lobster(ob, msg.is_open() ? &msg : nullptr, config.levels);
    if (events.crossed_dropped + events.invalid_dropped > 0) {
      std::cerr << "warning: " << file << ": dropped " << events.crossed_dropped << " crossed and "
                << events.invalid_dropped << " invalid rows\n";
    }
    SnapshotSeries s = sample_one_hz(events.snapshots, name.open, name.close);
    s.symbol = name.symbol;
    s.date = name.date;
    out.push_back(std::move(s));
  }
  return out;
}

Dataset build_dataset(const std::vector<SnapshotSeries>& series, const SplitConfig& split, double tick) {
  std::vector<SnapshotSeries> train, val, test;
  const auto n = series.size();
  const auto held = static_cast<std::size_t>(split.val_days + split.test_days);
  if (n == 1) {
    const auto len = series.front().snapshots.size();
    const auto a = static_cast<std::size_t>(static_cast<double>(len) * split.train_frac);
    const auto b = static_cast<std::size_t>(static_cast<double>(len) * (split.train_frac + split.val_frac));
    train.push_back(slice(series.front(), 0, a, "/train"));
    val.push_back(slice(series.front(), a, b, "/val"));
    test.push_back(slice(series.front(), b, len, "/test"));
  } else if (n > held) {
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n - held) {
        train.push_back(series[i]);
      } else if (i < n - static_cast<std::size_t>(split.test_days)) {
        val.push_back(series[i]);
      } else {
        test.push_back(series[i]);
      }
    }
  } else {
    throw DataError("need one series or more than val_days + test_days series, got " + std::to_string(n));
  }
  Dataset d;
  d.stats = fit_stats(train, tick, split.stride);
  d.train = windows_of(train, d.stats, split.stride);
  d.val = windows_of(val, d.stats, split.eval_stride);
  d.test = windows_of(test, d.stats, split.eval_stride);
  if (d.train.empty() || d.val.empty() || d.test.empty()) throw DataError("a split produced no windows");
  return d;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  save_stats(data.stats, dir / "stats.json");
  save_windows(data.train, dir / "train");
  save_windows(data.val, dir / "val");
  save_windows(data.test, dir / "test");
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.stats = load_stats(dir / "stats.json");
  d.train = load_windows(dir / "train");
  d.val = load_windows(dir / "val");
  d.test = load_windows(dir / "test");
  return d;
}

TrainedModel train_model(const Dataset& data, const RunConfig& config, const Checkpoint* stage1_in,
                         const fs::path& out) {
  const RunSeeds seeds = derive_seeds(config.seed);
  TrainedModel result;
  const bool run1 = config.stages != "2";
  const bool run2 = config.stages != "1" && config.model.use_control;
  if (run1) {
    TrainConfig tc = config.stage1;
    tc.seed = seeds.stage1;
    tc.verbose = tc.verbose || config.verbose;
    const fs::path dir = out / "stage1";
    log(config, "stage 1: " + std::to_string(data.train.size()) + " training windows");
    TrainResult r = train_stage(data.train, data.val, tc, model_config_for(data.stats, config.model), data.stats,
                                nullptr, &dir);
    log(config, "stage 1 best epoch " + std::to_string(r.best_epoch));
    result.stage1 = std::move(r.checkpoint);
  } else {
    if (!stage1_in) throw ConfigError("stage 2 alone needs --checkpoint with a stage-1 checkpoint");
    result.stage1 = *stage1_in;
  }
  if (run2) {
    TrainConfig tc = config.stage2;
    tc.seed = seeds.stage2;
    tc.verbose = tc.verbose || config.verbose;
    const fs::path dir = out / "stage2";
    log(config, "stage 2");
    TrainResult r = train_stage(data.train, data.val, tc, result.stage1->config, data.stats, &*result.stage1, &dir);
    log(config, "stage 2 best epoch " + std::to_string(r.best_epoch));
    result.final = std::move(r.checkpoint);
  } else {
    result.final = *result.stage1;
  }
  save_checkpoint(result.final, out / "checkpoint");
  return result;
}

PipelineReports evaluate_all(const Checkpoint& checkpoint, const Dataset& data, const RunConfig& config,
                             const fs::path& out) {
  const RunSeeds seeds = derive_seeds(config.seed);
  PipelineReports reports;
  DiffusionGenerator gen(checkpoint, config.sample);
  Stopwatch clock;
  log(config, "realism");
  reports.realism = realism_eval(gen, data.test, seeds.realism, config.eval.realism_windows);
  write_realism_report(reports.realism, out / "realism");
  if (config.eval.baseline) {
    log(config, "untrained baseline");
    auto base = untrained_generator(checkpoint, seeds.baseline_init, config.sample);
    reports.baseline = realism_eval(*base, data.test, seeds.baseline, config.eval.realism_windows);
    reports.baseline->scenario = "untrained";
    write_realism_report(*reports.baseline, out / "baseline");
  }
  log(config, "counterfactual");
  reports.counterfactual = counterfactual_eval(gen, data.train, data.test, config.eval.components, config.eval.q,
                                               config.eval.cf_histories, seeds.counterfactual);
  write_counterfactual_report(reports.counterfactual, out / "counterfactual");
  log(config, "usefulness");
  UsefulnessOptions uo;
  uo.q = config.eval.q;
  uo.cf_histories = config.eval.usefulness_cf;
  uo.max_train = config.eval.usefulness_max_train;
  uo.seed = seeds.usefulness;
  reports.usefulness = usefulness_eval(gen, data.train, data.test, uo);
  write_usefulness_report(reports.usefulness, out / "usefulness");
  log(config, "evaluation took " + io::format_double(clock.seconds()) + " s");
  return reports;
}

PipelineReports run_pipeline(const RunConfig& config, const fs::path& out) {
  validate(config);
  io::create_fresh_directory(out);
  io::write_json(out / "run_config.json", to_json(config));
  io::json timings;
  Stopwatch t;
  const auto series = ingest_series(config.data);
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::ostringstream name;
    name << std::setw(3) << std::setfill('0') << i;
    save_series(series[i], out / "ingest" / name.str());
  }
  timings["ingest_s"] = t.seconds();
  const Dataset data = build_dataset(series, config.split, config.data.tick);
  save_dataset(data, out / "preprocess");
  timings["preprocess_s"] = t.seconds() - timings["ingest_s"].get<double>();
  Stopwatch tt;
  const TrainedModel model = train_model(data, config, nullptr, out / "train");
  timings["train_s"] = tt.seconds();
  Stopwatch te;
  PipelineReports reports = evaluate_all(model.final, data, config, out / "eval");
  timings["eval_s"] = te.seconds();
  timings["total_s"] = t.seconds();
  // Wall times live outside the reports so that reruns compare equal.
  io::write_json(out / "timings.json", timings);
  return reports;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

namespace {

struct Flags {
  std::string config_path;
  std::string data;
  bool synthetic = false;
  std::optional<std::uint64_t> seed;
  std::string stage;
  bool no_control = false;
  std::optional<double> guidance;
  std::string regime;
  std::string side;
  std::optional<double> q;
  std::string out;
  std::string checkpoint;
  std::string regime_file;
  std::size_t max_windows = 0;
  bool verbose = false;
};

RunConfig resolve(const Flags& f) {
  RunConfig c;
  if (!f.config_path.empty()) {
    if (!fs::exists(f.config_path)) throw ConfigError("config file does not exist: " + f.config_path);
    c = run_config_from_json(io::read_json(f.config_path));
  }
  if (f.seed) c.seed = *f.seed;
  if (!f.stage.empty()) c.stages = f.stage;
  if (f.no_control) {
    c.model.use_control = false;
    if (c.stages == "both") c.stages = "1";
    if (c.stages == "2") throw ConfigError("--no-control cannot be combined with --stage 2");
  }
  if (f.guidance) c.sample.guidance = *f.guidance;
  if (f.q) c.eval.q = *f.q;
  if (!f.regime.empty()) c.eval.components = {parse_component(f.regime)};
  if (f.verbose) c.verbose = true;
  return c;
}

fs::path run_directory(const Flags& f, const std::string& command) {
  if (!f.out.empty()) return f.out;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream base;
  base << "runs/" << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path dir = base.str();
  for (int i = 1; fs::exists(dir); ++i) dir = base.str() + "-" + std::to_string(i);
  return dir;
}

fs::path start_run(const Flags& f, const std::string& command, const RunConfig& config) {
  const fs::path dir = run_directory(f, command);
  io::create_fresh_directory(dir);
  io::json echo = to_json(config);
  echo["command"] = command;
  io::write_json(dir / "run_config.json", echo);
  return dir;
}

fs::path require_dir(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string(flag) + " is required");
  if (!fs::is_directory(path)) throw ConfigError(std::string(flag) + " directory does not exist: " + path);
  return path;
}

void cmd_ingest(const Flags& f, RunConfig c) {
  if (f.synthetic && !f.data.empty()) throw ConfigError("--synthetic and --data are mutually exclusive");
  if (!f.data.empty()) {
    c.data.source = "lobster";
    c.data.orderbooks.clear();
    std::stringstream ss(f.data);
    for (std::string p; std::getline(ss, p, ',');) c.data.orderbooks.push_back(p);
  } else if (f.synthetic) {
    c.data.source = "synthetic";
  }
  validate(c);
  const fs::path dir = start_run(f, "ingest", c);
  const auto series = ingest_series(c.data);
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::ostringstream name;
    name << std::setw(3) << std::setfill('0') << i;
    save_series(series[i], dir / name.str());
  }
  std::cout << dir.string() << '\n';
}

void cmd_preprocess(const Flags& f, const RunConfig& c) {
  validate(c);
  const fs::path in = require_dir(f.data, "--data");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(in)) {
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DataError("no series directories under " + in.string());
  std::vector<SnapshotSeries> series;
  for (const auto& d : dirs) series.push_back(load_series(d));
  const fs::path dir = start_run(f, "preprocess", c);
  const Dataset data = build_dataset(series, c.split, c.data.tick);
  save_dataset(data, dir);
  std::cout << dir.string() << '\n';
}

void cmd_train(const Flags& f, const RunConfig& c) {
  validate(c);
  const Dataset data = load_dataset(require_dir(f.data, "--data"));
  std::optional<Checkpoint> stage1;
  if (c.stages == "2") stage1 = load_checkpoint(require_dir(f.checkpoint, "--checkpoint"));
  const fs::path dir = start_run(f, "train", c);
  train_model(data, c, stage1 ? &*stage1 : nullptr, dir);
  std::cout << dir.string() << '\n';
}

// Replaces components named in a JSON object; liq and imb take a scalar or
// one value per future step.
RegimeVector override_regime(RegimeVector r, const io::json& doc) {
  auto series = [](const io::json& v, std::vector<double>& out) {
    if (v.is_array()) {
      auto vals = v.get<std::vector<double>>();
      if (vals.size() != out.size()) throw ConfigError("regime override series has the wrong length");
      out = std::move(vals);
    } else {
      std::fill(out.begin(), out.end(), v.get<double>());
    }
  };
  try {
    if (doc.contains("trend")) r.trend = doc.at("trend").get<double>();
    if (doc.contains("vol")) r.vol = doc.at("vol").get<double>();
    if (doc.contains("liq")) series(doc.at("liq"), r.liq);
    if (doc.contains("imb")) series(doc.at("imb"), r.imb);
  } catch (const io::json::exception& e) {
    throw ConfigError(std::string("bad regime override: ") + e.what());
  }
  return r;
}

void cmd_sample(const Flags& f, const RunConfig& c) {
  validate(c);
  const Dataset data = load_dataset(require_dir(f.data, "--data"));
  const Checkpoint ckpt = load_checkpoint(require_dir(f.checkpoint, "--checkpoint"));
  if (!f.side.empty() && f.regime.empty()) throw ConfigError("--side needs --regime");
  std::optional<RegimeTarget> target;
  if (!f.regime.empty()) {
    std::vector<RegimeVector> regimes;
    for (const auto& w : data.train) regimes.push_back(w.regime);
    target = regime_quantile_targets(regimes, parse_component(f.regime),
                                     f.side.empty() ? TailSide::high : parse_side(f.side), c.eval.q);
  }
  std::optional<io::json> overrides;
  if (!f.regime_file.empty()) overrides = io::read_json(f.regime_file);
  if (target && overrides) throw ConfigError("--regime and --regime-file are mutually exclusive");

  const auto chosen = spaced_subset(data.test, f.max_windows ? f.max_windows : c.eval.realism_windows);
  std::vector<ConditionBundle> bundles;
  std::vector<double> anchors;
  for (const auto* w : chosen) {
    auto b = observed_bundle(*w);
    if (target) b.regime = apply_target(w->regime, *target);
    if (overrides) b.regime = override_regime(w->regime, *overrides);
    bundles.push_back(std::move(b));
    anchors.push_back(w->anchor_mid);
  }
  const fs::path dir = start_run(f, "sample", c);
  DiffusionGenerator gen(ckpt, c.sample);
  const auto futures = gen.generate(bundles, derive_seeds(c.seed).realism);
  const DecodedSet decoded = decode_set(futures, anchors, data.stats);
  std::vector<WindowPair> out;
  io::json conditions = io::json::array();
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    WindowPair p;
    p.history = chosen[i]->history;
    p.future = futures[i];
    p.anchor_mid = anchors[i];
    p.regime = decoded.regimes[i];
    out.push_back(std::move(p));
    conditions.push_back({{"trend", bundles[i].regime.trend},
                          {"vol", bundles[i].regime.vol},
                          {"liq", bundles[i].regime.liq},
                          {"imb", bundles[i].regime.imb}});
  }
  save_windows(out, dir / "generated");
  io::write_json(dir / "conditions.json", conditions);
  std::cout << dir.string() << '\n';
}

void cmd_eval(const Flags& f, const RunConfig& c, const std::string& tier) {
  validate(c);
  const Dataset data = load_dataset(require_dir(f.data, "--data"));
  const Checkpoint ckpt = load_checkpoint(require_dir(f.checkpoint, "--checkpoint"));
  const RunSeeds seeds = derive_seeds(c.seed);
  const fs::path dir = start_run(f, "eval-" + tier, c);
  DiffusionGenerator gen(ckpt, c.sample);
  if (tier == "realism") {
    const EvalReport r = realism_eval(gen, data.test, seeds.realism, c.eval.realism_windows);
    write_realism_report(r, dir / "realism");
    if (c.eval.baseline) {
      auto base = untrained_generator(ckpt, seeds.baseline_init, c.sample);
      EvalReport b = realism_eval(*base, data.test, seeds.baseline, c.eval.realism_windows);
      b.scenario = "untrained";
      write_realism_report(b, dir / "baseline");
    }
  } else if (tier == "counterfactual") {
    const auto r = counterfactual_eval(gen, data.train, data.test, c.eval.components, c.eval.q, c.eval.cf_histories,
                                       seeds.counterfactual);
    write_counterfactual_report(r, dir / "counterfactual");
  } else {
    UsefulnessOptions uo;
    uo.q = c.eval.q;
    uo.cf_histories = c.eval.usefulness_cf;
    uo.max_train = c.eval.usefulness_max_train;
    uo.seed = seeds.usefulness;
    write_usefulness_report(usefulness_eval(gen, data.train, data.test, uo), dir / "usefulness");
  }
  std::cout << dir.string() << '\n';
}

void cmd_pipeline(const Flags& f, RunConfig c) {
  if (!f.data.empty()) throw ConfigError("pipeline reads data from the config; use ingest for files");
  if (f.synthetic) c.data.source = "synthetic";
  const fs::path dir = run_directory(f, "pipeline");
  run_pipeline(c, dir);
  std::cout << dir.string() << '\n';
}

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config_path, "JSON run config; flags override it");
  cmd->add_option("--seed", f.seed, "Run seed");
  cmd->add_option("--out", f.out, "Run directory (must not exist or be empty)");
  cmd->add_flag("--verbose,-v", f.verbose, "Progress on stderr");
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Regime-conditioned diffusion generator for limit order book trajectories"};
  app.require_subcommand(1);
  Flags f;
  std::string tier;

  auto* ingest = app.add_subcommand("ingest", "Read LOBSTER files or synthesize books into series directories");
  add_common(ingest, f);
  ingest->add_option("--data", f.data, "Comma-separated LOBSTER orderbook CSVs");
  ingest->add_flag("--synthetic", f.synthetic, "Use the synthetic generator");

  auto* preprocess = app.add_subcommand("preprocess", "Split series, fit statistics and build windows");
  add_common(preprocess, f);
  preprocess->add_option("--data", f.data, "Ingest run directory")->required();

  auto* train = app.add_subcommand("train", "Train stage 1, stage 2 or both");
  add_common(train, f);
  train->add_option("--data", f.data, "Preprocess run directory")->required();
  train->add_option("--stage", f.stage, "Stages to run")->check(CLI::IsMember({"1", "2", "both"}));
  train->add_flag("--no-control", f.no_control, "Base model only, no control pathway");
  train->add_option("--checkpoint", f.checkpoint, "Stage-1 checkpoint for --stage 2");

  auto* sample = app.add_subcommand("sample", "Generate futures for test histories");
  add_common(sample, f);
  sample->add_option("--data", f.data, "Preprocess run directory")->required();
  sample->add_option("--checkpoint", f.checkpoint, "Checkpoint directory")->required();
  sample->add_option("--guidance", f.guidance, "Guidance weight w");
  sample->add_option("--regime", f.regime, "Intervene on this component")
      ->check(CLI::IsMember({"trend", "vol", "liq", "imb"}));
  sample->add_option("--side", f.side, "Tail of the intervention")->check(CLI::IsMember({"high", "low"}));
  sample->add_option("--q", f.q, "Tail fraction");
  sample->add_option("--regime-file", f.regime_file, "JSON object of regime component overrides");
  sample->add_option("--max-windows", f.max_windows, "Number of test histories");

  auto* eval = app.add_subcommand("eval", "Run an evaluation tier");
  add_common(eval, f);
  eval->add_option("tier", tier, "realism | counterfactual | usefulness")
      ->required()
      ->check(CLI::IsMember({"realism", "counterfactual", "usefulness"}));
  eval->add_option("--data", f.data, "Preprocess run directory")->required();
  eval->add_option("--checkpoint", f.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--guidance", f.guidance, "Guidance weight w");
  eval->add_option("--regime", f.regime, "Restrict counterfactuals to one component")
      ->check(CLI::IsMember({"trend", "vol", "liq", "imb"}));
  eval->add_option("--q", f.q, "Tail fraction");

  auto* pipeline = app.add_subcommand("pipeline", "Ingest, preprocess, train and evaluate in one run directory");
  add_common(pipeline, f);
  pipeline->add_flag("--synthetic", f.synthetic, "Use the synthetic generator");
  pipeline->add_option("--data", f.data, "Not supported; present for a clear error");
  pipeline->add_option("--stage", f.stage, "Stages to run")->check(CLI::IsMember({"1", "2", "both"}));
  pipeline->add_flag("--no-control", f.no_control, "Base model only, no control pathway");
  pipeline->add_option("--guidance", f.guidance, "Guidance weight w");
  pipeline->add_option("--q", f.q, "Tail fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    tune_allocator();
    const RunConfig c = resolve(f);
    if (*ingest) cmd_ingest(f, c);
    if (*preprocess) cmd_preprocess(f, c);
    if (*train) cmd_train(f, c);
    if (*sample) cmd_sample(f, c);
    if (*eval) cmd_eval(f, c, tier);
    if (*pipeline) cmd_pipeline(f, c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace difflob::cli
