#include "difflob/checkpoint.hpp"

#include "difflob/error.hpp"

namespace difflob {

namespace fs = std::filesystem;

Denoiser<float> Checkpoint::model(bool ema) const { return Denoiser<float>(config, ema ? ema_params : params); }

io::json to_json(const ModelConfig& c) {
  return {{"n_blocks", c.n_blocks},     {"channels", c.channels},         {"levels", c.levels},
          {"tau", c.tau},               {"t_emb_dim", c.t_emb_dim},       {"local_dim", c.local_dim},
          {"global_dim", c.global_dim}, {"kernel", c.kernel},             {"local_kernel", c.local_kernel},
          {"dilation_cycle", c.dilation_cycle}, {"use_control", c.use_control}, {"dropout_p", c.dropout_p}};
}

ModelConfig model_config_from_json(const io::json& doc) {
  ModelConfig c;
  auto read = [&doc](const char* key, auto& field) {
    if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
  };
  read("n_blocks", c.n_blocks);
  read("channels", c.channels);
  read("levels", c.levels);
  read("tau", c.tau);
  read("t_emb_dim", c.t_emb_dim);
  read("local_dim", c.local_dim);
  read("global_dim", c.global_dim);
  read("kernel", c.kernel);
  read("local_kernel", c.local_kernel);
  read("dilation_cycle", c.dilation_cycle);
  read("use_control", c.use_control);
  read("dropout_p", c.dropout_p);
  return c;
}

namespace {

std::string_view group_name(ParamGroup g) { return g == ParamGroup::base ? "base" : "control"; }

void write_params(const ParameterSet<float>& params, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& p : params) {
    io::write_f32le(dir / (p.name + ".f32le"), std::span<const float>(p.value.data(), static_cast<std::size_t>(p.value.size())));
  }
}

ParameterSet<float> read_params(const io::json& listing, const fs::path& dir) {
  ParameterSet<float> out;
  for (const auto& entry : listing) {
    const auto name = entry.at("name").get<std::string>();
    const auto group = entry.at("group").get<std::string>() == "base" ? ParamGroup::base : ParamGroup::control;
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const auto data = io::read_f32le(dir / (name + ".f32le"));
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw DataError("blob size mismatch for " + name);
    const auto i = out.add(name, group, rows, cols);
    std::copy(data.begin(), data.end(), out[i].value.data());
  }
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  if (ckpt.params.size() != ckpt.ema_params.size()) throw ConfigError("EMA parameters do not match trained parameters");
  io::json listing = io::json::array();
  for (const auto& p : ckpt.params) {
    listing.push_back({{"name", p.name}, {"group", group_name(p.group)}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  }
  const io::json manifest = {
      {"format", "difflob-checkpoint-1"},
      {"stage", ckpt.stage},
      {"config", to_json(ckpt.config)},
      {"schedule",
       {{"n", ckpt.schedule.steps()}, {"beta_min", ckpt.schedule.beta_min}, {"beta_max", ckpt.schedule.beta_max}}},
      {"preprocess", stats_to_json(ckpt.preprocess)},
      {"params", listing},
  };
  fs::create_directories(dir);
  write_params(ckpt.params, dir / "params");
  write_params(ckpt.ema_params, dir / "ema");
  io::write_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw DataError("no checkpoint manifest in " + dir.string());
  try {
    const auto m = io::read_json(dir / "manifest.json");
    Checkpoint c;
    c.stage = m.at("stage").get<int>();
    c.config = model_config_from_json(m.at("config"));
    validate(c.config);
    const auto& s = m.at("schedule");
    c.schedule = build_schedule(s.at("n").get<int>(), s.at("beta_min").get<double>(), s.at("beta_max").get<double>());
    c.preprocess = stats_from_json(m.at("preprocess"));
    c.params = read_params(m.at("params"), dir / "params");
    c.ema_params = read_params(m.at("params"), dir / "ema");
    return c;
  } catch (const io::json::exception& e) {
    throw DataError("bad checkpoint manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace difflob
