#include "difflob/network.hpp"

#include <cmath>
#include <random>

#include "difflob/error.hpp"

namespace difflob {

void validate(const ModelConfig& c) {
  if (c.n_blocks < 1) throw ConfigError("model needs at least one residual block");
  if (c.channels < 1 || c.levels < 1 || c.tau < 1) throw ConfigError("model dimensions must be positive");
  if (c.t_emb_dim < 2 || c.t_emb_dim % 2 != 0) throw ConfigError("t_emb_dim must be even and at least 2");
  if (c.local_dim < 1 || c.global_dim < 1) throw ConfigError("embedding widths must be positive");
  if (c.kernel < 1 || c.kernel % 2 == 0 || c.local_kernel < 1 || c.local_kernel % 2 == 0) {
    throw ConfigError("kernel sizes must be odd");
  }
  if (c.dilation_cycle < 1 || c.dilation_cycle > 20) throw ConfigError("dilation_cycle must lie in [1, 20]");
  if (!(c.dropout_p >= 0.0 && c.dropout_p <= 1.0)) throw ConfigError("dropout_p must lie in [0, 1]");
}

template <typename S>
std::size_t ParameterSet<S>::add(std::string name, ParamGroup group, Eigen::Index rows, Eigen::Index cols) {
  if (find(name)) throw ConfigError("duplicate parameter name " + name);
  items_.push_back({std::move(name), group, Mat<S>::Zero(rows, cols)});
  return items_.size() - 1;
}

template <typename S>
std::optional<std::size_t> ParameterSet<S>::find(const std::string& name) const {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename S>
std::size_t ParameterSet<S>::scalar_count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& p : items_) {
    if (p.group == group) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

template <typename S>
Gradients<S> Gradients<S>::like(const ParameterSet<S>& params) {
  Gradients g;
  g.values.reserve(params.size());
  for (const auto& p : params) g.values.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
  return g;
}

template <typename S>
void Gradients<S>::zero() {
  for (auto& v : values) v.setZero();
}

std::vector<double> timestep_features(double t, int dim) {
  std::vector<double> f(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  const double scaled = 1000.0 * t;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    f[static_cast<std::size_t>(2 * k)] = std::sin(scaled * freq);
    f[static_cast<std::size_t>(2 * k + 1)] = std::cos(scaled * freq);
  }
  return f;
}

namespace {

using Eigen::Index;

template <typename S>
using Arr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
Mat<S> silu(const Mat<S>& pre) {
  const Arr<S> sig = S(0.5) * (S(0.5) * pre.array()).tanh() + S(0.5);
  return (pre.array() * sig).matrix();
}

// Multiplies `grad` in place by silu'(pre).
template <typename S>
void silu_backward(Mat<S>& grad, const Mat<S>& pre) {
  const Arr<S> sig = S(0.5) * (S(0.5) * pre.array()).tanh() + S(0.5);
  grad.array() *= sig * (S(1) + pre.array() * (S(1) - sig));
}

struct DenseIdx {
  std::size_t w = 0, b = 0;
};

struct ConvIdx {
  std::size_t w = 0, b = 0;
  int in = 0, kernel = 1, dilation = 1;
};

struct TapRange {
  int first = 0;
  int count = 1;
};

// Taps whose offset can reach inside a length-T segment; they form a
// contiguous range around the center tap.
TapRange active_taps(int kernel, int dilation, Index T) {
  const int center = (kernel - 1) / 2;
  TapRange r{center, 1};
  for (int j = center - 1; j >= 0; --j) {
    if (static_cast<Index>(center - j) * dilation >= T) break;
    r.first = j;
    r.count += 2;
  }
  return r;
}

template <typename S>
Mat<S> im2col(const Mat<S>& x, Index T, int kernel, int dilation, TapRange taps) {
  const Index cin = x.rows();
  const Index n = x.cols();
  const Index segs = n / T;
  const int center = (kernel - 1) / 2;
  Mat<S> out(taps.count * cin, n);
  for (int a = 0; a < taps.count; ++a) {
    const Index o = static_cast<Index>(taps.first + a - center) * dilation;
    for (Index seg = 0; seg < segs; ++seg) {
      const Index base = seg * T;
      if (o >= 0) {
        out.block(a * cin, base, cin, T - o) = x.block(0, base + o, cin, T - o);
        out.block(a * cin, base + T - o, cin, o).setZero();
      } else {
        out.block(a * cin, base - o, cin, T + o) = x.block(0, base, cin, T + o);
        out.block(a * cin, base, cin, -o).setZero();
      }
    }
  }
  return out;
}

template <typename S>
void col2im_add(const Mat<S>& cols, Mat<S>& x, Index T, int kernel, int dilation, TapRange taps) {
  const Index cin = x.rows();
  const Index segs = x.cols() / T;
  const int center = (kernel - 1) / 2;
  for (int a = 0; a < taps.count; ++a) {
    const Index o = static_cast<Index>(taps.first + a - center) * dilation;
    for (Index seg = 0; seg < segs; ++seg) {
      const Index base = seg * T;
      if (o >= 0) {
        x.block(0, base + o, cin, T - o) += cols.block(a * cin, base, cin, T - o);
      } else {
        x.block(0, base, cin, T + o) += cols.block(a * cin, base - o, cin, T + o);
      }
    }
  }
}

template <typename S>
Mat<S> dense_forward(const ParameterSet<S>& p, DenseIdx d, const Mat<S>& x) {
  Mat<S> y = p[d.w].value * x;
  y.colwise() += p[d.b].value.col(0);
  return y;
}

// Accumulates parameter gradients when `want_params`; returns d/dx when `want_input`.
template <typename S>
Mat<S> dense_backward(const ParameterSet<S>& p, DenseIdx d, const Mat<S>& x, const Mat<S>& gy, Gradients<S>& g,
                      bool want_params, bool want_input) {
  if (want_params) {
    g.values[d.w].noalias() += gy * x.transpose();
    g.values[d.b] += gy.rowwise().sum();
  }
  if (!want_input) return {};
  return p[d.w].value.transpose() * gy;
}

template <typename S>
Mat<S> conv_forward(const ParameterSet<S>& p, const ConvIdx& c, const Mat<S>& x, Index T) {
  const TapRange taps = active_taps(c.kernel, c.dilation, T);
  const auto& w = p[c.w].value;
  Mat<S> y;
  if (taps.count == 1) {
    y.noalias() = w.middleCols(taps.first * c.in, c.in) * x;
  } else {
    const Mat<S> cols = im2col(x, T, c.kernel, c.dilation, taps);
    y.noalias() = w.middleCols(taps.first * c.in, taps.count * c.in) * cols;
  }
  y.colwise() += p[c.b].value.col(0);
  return y;
}

template <typename S>
Mat<S> conv_backward(const ParameterSet<S>& p, const ConvIdx& c, const Mat<S>& x, const Mat<S>& gy, Index T,
                     Gradients<S>& g, bool want_params, bool want_input) {
  const TapRange taps = active_taps(c.kernel, c.dilation, T);
  const auto w = p[c.w].value.middleCols(taps.first * c.in, taps.count * c.in);
  if (taps.count == 1) {
    if (want_params) {
      g.values[c.w].middleCols(taps.first * c.in, c.in).noalias() += gy * x.transpose();
      g.values[c.b] += gy.rowwise().sum();
    }
    if (!want_input) return {};
    return w.transpose() * gy;
  }
  if (want_params) {
    const Mat<S> cols = im2col(x, T, c.kernel, c.dilation, taps);
    g.values[c.w].middleCols(taps.first * c.in, taps.count * c.in).noalias() += gy * cols.transpose();
    g.values[c.b] += gy.rowwise().sum();
  }
  if (!want_input) return {};
  const Mat<S> gcols = w.transpose() * gy;
  Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
  col2im_add(gcols, gx, T, c.kernel, c.dilation, taps);
  return gx;
}

template <typename S>
void init_uniform(Mat<S>& m, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(u(rng));
}

template <typename S>
void init_normal(Mat<S>& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(n(rng));
}

}  // namespace

struct EncoderIdx {
  ConvIdx local1, local2;
  std::size_t local_null = 0;
  DenseIdx global1, global2;
  std::size_t global_null = 0;
};

struct BlockIdx {
  ConvIdx dil;
  DenseIdx film_t, film_l, film_g, out;
  DenseIdx ctrl_proj;
};

template <typename S>
struct Denoiser<S>::Layout {
  DenseIdx input;
  std::size_t level_emb = 0;
  DenseIdx temb1, temb2;
  EncoderIdx base_enc, ctrl_enc;
  std::vector<BlockIdx> blocks;
  DenseIdx head1, head2;
};

template <typename S>
Denoiser<S>::Denoiser(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  validate(config_);
  build();
  std::mt19937_64 rng(seed);
  const auto& l = *layout_;
  for (auto& p : params_) {
    if (p.value.cols() > 1 || p.name.ends_with(".w")) init_uniform(p.value, rng);
  }
  for (std::size_t i : {l.base_enc.local_null, l.base_enc.global_null}) init_normal(params_[i].value, rng, 0.5);
  init_normal(params_[l.level_emb].value, rng, 1.0);
  for (auto& p : params_) {
    if (p.name.ends_with(".b")) p.value.setZero();
  }
  params_[l.head2.w].value.setZero();
  if (config_.use_control) init_control_from_base();
}

template <typename S>
Denoiser<S>::Denoiser(const ModelConfig& config, ParameterSet<S> params) : config_(config) {
  validate(config_);
  build();
  if (params.size() != params_.size()) throw DataError("parameter set does not match the model layout");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = params[i];
    auto& dst = params_[i];
    if (src.name != dst.name || src.value.rows() != dst.value.rows() || src.value.cols() != dst.value.cols()) {
      throw DataError("parameter " + src.name + " does not match the model layout");
    }
    dst.value = src.value;
  }
}

template <typename S>
Denoiser<S>::~Denoiser() = default;

template <typename S>
Denoiser<S>::Denoiser(const Denoiser& other)
    : config_(other.config_), params_(other.params_), layout_(std::make_unique<Layout>(*other.layout_)) {}

template <typename S>
Denoiser<S>& Denoiser<S>::operator=(const Denoiser& other) {
  if (this != &other) {
    config_ = other.config_;
    params_ = other.params_;
    layout_ = std::make_unique<Layout>(*other.layout_);
  }
  return *this;
}

template <typename S>
Denoiser<S>::Denoiser(Denoiser&&) noexcept = default;
template <typename S>
Denoiser<S>& Denoiser<S>::operator=(Denoiser&&) noexcept = default;

template <typename S>
void Denoiser<S>::build() {
  layout_ = std::make_unique<Layout>();
  auto& l = *layout_;
  const int c = config_.channels;
  const int e = config_.t_emb_dim;
  const int ld = config_.local_dim;
  const int gd = config_.global_dim;
  auto dense = [&](const std::string& name, ParamGroup g, int out, int in) {
    DenseIdx d;
    d.w = params_.add(name + ".w", g, out, in);
    d.b = params_.add(name + ".b", g, out, 1);
    return d;
  };
  auto conv = [&](const std::string& name, ParamGroup g, int out, int in, int kernel, int dilation) {
    ConvIdx d;
    d.w = params_.add(name + ".w", g, out, in * kernel);
    d.b = params_.add(name + ".b", g, out, 1);
    d.in = in;
    d.kernel = kernel;
    d.dilation = dilation;
    return d;
  };
  auto encoder = [&](const std::string& prefix, ParamGroup g) {
    EncoderIdx enc;
    enc.local1 = conv(prefix + "local.conv1", g, ld, config_.local_inputs(), config_.local_kernel, 1);
    enc.local2 = conv(prefix + "local.conv2", g, ld, ld, config_.local_kernel, 1);
    enc.local_null = params_.add(prefix + "local.null", g, ld, 1);
    enc.global1 = dense(prefix + "global.fc1", g, gd, 2);
    enc.global2 = dense(prefix + "global.fc2", g, gd, gd);
    enc.global_null = params_.add(prefix + "global.null", g, gd, 1);
    return enc;
  };

  const auto base = ParamGroup::base;
  l.input = dense("input", base, c, 2);
  l.level_emb = params_.add("level_emb", base, c, config_.levels);
  l.temb1 = dense("temb.fc1", base, e, e);
  l.temb2 = dense("temb.fc2", base, e, e);
  l.base_enc = encoder("", base);
  l.blocks.resize(static_cast<std::size_t>(config_.n_blocks));
  for (int b = 0; b < config_.n_blocks; ++b) {
    auto& blk = l.blocks[static_cast<std::size_t>(b)];
    const std::string p = "block" + std::to_string(b) + ".";
    blk.dil = conv(p + "dil", base, 2 * c, c, config_.kernel, config_.dilation(b));
    blk.film_t = dense(p + "film_t", base, 4 * c, e);
    blk.film_l = dense(p + "film_l", base, 4 * c, ld);
    blk.film_g = dense(p + "film_g", base, 4 * c, gd);
    blk.out = dense(p + "out", base, 2 * c, c);
  }
  l.head1 = dense("head.fc1", base, c, c);
  l.head2 = dense("head.fc2", base, 2, c);
  if (config_.use_control) {
    const auto ctrl = ParamGroup::control;
    l.ctrl_enc = encoder("ctrl.", ctrl);
    for (int b = 0; b < config_.n_blocks; ++b) {
      l.blocks[static_cast<std::size_t>(b)].ctrl_proj =
          dense("ctrl.block" + std::to_string(b) + ".proj", ctrl, 2 * c, ld + gd);
    }
  }
}

template <typename S>
void Denoiser<S>::init_control_from_base() {
  if (!config_.use_control) throw ConfigError("model has no control pathway");
  const auto& l = *layout_;
  auto copy = [&](std::size_t dst, std::size_t src) { params_[dst].value = params_[src].value; };
  auto copy_conv = [&](const ConvIdx& dst, const ConvIdx& src) {
    copy(dst.w, src.w);
    copy(dst.b, src.b);
  };
  auto copy_dense = [&](const DenseIdx& dst, const DenseIdx& src) {
    copy(dst.w, src.w);
    copy(dst.b, src.b);
  };
  copy_conv(l.ctrl_enc.local1, l.base_enc.local1);
  copy_conv(l.ctrl_enc.local2, l.base_enc.local2);
  copy(l.ctrl_enc.local_null, l.base_enc.local_null);
  copy_dense(l.ctrl_enc.global1, l.base_enc.global1);
  copy_dense(l.ctrl_enc.global2, l.base_enc.global2);
  copy(l.ctrl_enc.global_null, l.base_enc.global_null);
  for (const auto& blk : l.blocks) {
    params_[blk.ctrl_proj.w].value.setZero();
    params_[blk.ctrl_proj.b].value.setZero();
  }
}

namespace {

template <typename S>
void check_inputs(const ModelConfig& cfg, const Mat<S>& x, std::span<const double> t, const ConditionBatch<S>& cond) {
  const Index b = static_cast<Index>(t.size());
  if (x.rows() != 2 || x.cols() != b * cfg.levels * cfg.tau) throw ConfigError("denoiser input has the wrong shape");
  if (cond.global.rows() != 2 || cond.global.cols() != b) throw ConfigError("global condition has the wrong shape");
  if (cond.local.rows() != cfg.local_inputs() || cond.local.cols() != b * cfg.tau) {
    throw ConfigError("local condition has the wrong shape");
  }
  if (static_cast<Index>(cond.present.size()) != b) throw ConfigError("condition mask has the wrong length");
}

template <typename S>
void encoder_forward(const ParameterSet<S>& p, const EncoderIdx& idx, const ConditionBatch<S>& cond, Index tau,
                     detail::EncoderCache<S>& ec) {
  const Index b = cond.batch();
  ec.local_in = cond.local;
  ec.local1_pre = conv_forward(p, idx.local1, ec.local_in, tau);
  ec.local1 = silu(ec.local1_pre);
  ec.local2_pre = conv_forward(p, idx.local2, ec.local1, tau);
  ec.local_emb = silu(ec.local2_pre);
  ec.global_in = cond.global;
  ec.global1_pre = dense_forward(p, idx.global1, ec.global_in);
  ec.global1 = silu(ec.global1_pre);
  ec.global2_pre = dense_forward(p, idx.global2, ec.global1);
  ec.global_emb = silu(ec.global2_pre);
  for (Index s = 0; s < b; ++s) {
    if (cond.present[static_cast<std::size_t>(s)]) continue;
    ec.local_emb.middleCols(s * tau, tau).colwise() = p[idx.local_null].value.col(0);
    ec.global_emb.col(s) = p[idx.global_null].value.col(0);
  }
}

template <typename S>
void encoder_backward(const ParameterSet<S>& p, const EncoderIdx& idx, const detail::EncoderCache<S>& ec,
                      const std::vector<std::uint8_t>& present, Index tau, Mat<S> g_local, Mat<S> g_global,
                      Gradients<S>& g) {
  const Index b = g_global.cols();
  for (Index s = 0; s < b; ++s) {
    if (present[static_cast<std::size_t>(s)]) continue;
    g.values[idx.local_null] += g_local.middleCols(s * tau, tau).rowwise().sum();
    g.values[idx.global_null] += g_global.col(s);
    g_local.middleCols(s * tau, tau).setZero();
    g_global.col(s).setZero();
  }
  silu_backward(g_local, ec.local2_pre);
  Mat<S> g1 = conv_backward(p, idx.local2, ec.local1, g_local, tau, g, true, true);
  silu_backward(g1, ec.local1_pre);
  conv_backward(p, idx.local1, ec.local_in, g1, tau, g, true, false);
  silu_backward(g_global, ec.global2_pre);
  Mat<S> gg1 = dense_backward(p, idx.global2, ec.global1, g_global, g, true, true);
  silu_backward(gg1, ec.global1_pre);
  dense_backward(p, idx.global1, ec.global_in, gg1, g, true, false);
}

// The three FiLM stages y <- y (1 + a) + b, applied in the order timestep,
// local, global and followed by the control injection, compose into
// y0 * scale + shift with one scale and shift column per time step.
template <typename S>
struct Modulation {
  Mat<S> at, bt, al, bl, ag, bg;  // [2C x (B * tau)], the a terms include the +1
  Mat<S> scale, shift;
};

template <typename S>
Mat<S> expand_steps(const Mat<S>& per_sample, Index tau) {
  Mat<S> out(per_sample.rows(), per_sample.cols() * tau);
  for (Index s = 0; s < per_sample.cols(); ++s) out.middleCols(s * tau, tau).colwise() = per_sample.col(s);
  return out;
}

template <typename S>
Mat<S> reduce_steps(const Mat<S>& per_step, Index tau) {
  const Index b = per_step.cols() / tau;
  Mat<S> out(per_step.rows(), b);
  for (Index s = 0; s < b; ++s) out.col(s) = per_step.middleCols(s * tau, tau).rowwise().sum();
  return out;
}

template <typename S>
Modulation<S> compose_modulation(const Mat<S>& film_t, const Mat<S>& film_l, const Mat<S>& film_g, const Mat<S>* ctrl,
                                 Index c2, Index tau) {
  Modulation<S> m;
  m.at = (expand_steps<S>(film_t.topRows(c2), tau).array() + S(1)).matrix();
  m.bt = expand_steps<S>(film_t.bottomRows(c2), tau);
  m.al = (film_l.topRows(c2).array() + S(1)).matrix();
  m.bl = film_l.bottomRows(c2);
  m.ag = (expand_steps<S>(film_g.topRows(c2), tau).array() + S(1)).matrix();
  m.bg = expand_steps<S>(film_g.bottomRows(c2), tau);
  m.scale = (m.at.array() * m.al.array() * m.ag.array()).matrix();
  m.shift = ((m.bt.array() * m.al.array() + m.bl.array()) * m.ag.array() + m.bg.array()).matrix();
  if (ctrl) m.shift += *ctrl;
  return m;
}

// Scale and shift only, without the expanded per-step factors that
// backward() needs. Same operation order as compose_modulation.
template <typename S>
Modulation<S> compose_scale_shift(const Mat<S>& film_t, const Mat<S>& film_l, const Mat<S>& film_g,
                                  const Mat<S>* ctrl, Index c2, Index tau) {
  Modulation<S> m;
  const Index b = film_t.cols();
  m.scale.resize(c2, b * tau);
  m.shift.resize(c2, b * tau);
  for (Index s = 0; s < b; ++s) {
    const Arr<S> at = film_t.col(s).head(c2).array() + S(1);
    const Arr<S> bt = film_t.col(s).tail(c2).array();
    const Arr<S> ag = film_g.col(s).head(c2).array() + S(1);
    const Arr<S> bg = film_g.col(s).tail(c2).array();
    const Arr<S> al = film_l.topRows(c2).middleCols(s * tau, tau).array() + S(1);
    const auto bl = film_l.bottomRows(c2).middleCols(s * tau, tau).array();
    m.scale.middleCols(s * tau, tau).array() = (al.colwise() * at.col(0)).colwise() * ag.col(0);
    m.shift.middleCols(s * tau, tau).array() =
        ((al.colwise() * bt.col(0) + bl).colwise() * ag.col(0)).colwise() + bg.col(0);
  }
  if (ctrl) m.shift += *ctrl;
  return m;
}

template <typename S>
void modulate(const Mat<S>& y0, const Modulation<S>& m, Mat<S>& out, Index levels, Index tau) {
  out.resize(y0.rows(), y0.cols());
  const Index b = m.scale.cols() / tau;
  for (Index s = 0; s < b; ++s) {
    const auto scale = m.scale.middleCols(s * tau, tau).array();
    const auto shift = m.shift.middleCols(s * tau, tau).array();
    for (Index l = 0; l < levels; ++l) {
      const Index col = (s * levels + l) * tau;
      out.middleCols(col, tau).array() = y0.middleCols(col, tau).array() * scale + shift;
    }
  }
}

}  // namespace

template <typename S>
Mat<S> Denoiser<S>::encode_local(const ConditionBatch<S>& cond, bool control_pathway) const {
  if (control_pathway && !config_.use_control) throw ConfigError("model has no control pathway");
  detail::EncoderCache<S> ec;
  encoder_forward(params_, control_pathway ? layout_->ctrl_enc : layout_->base_enc, cond, config_.tau, ec);
  return ec.local_emb;
}

template <typename S>
Mat<S> Denoiser<S>::encode_global(const ConditionBatch<S>& cond, bool control_pathway) const {
  if (control_pathway && !config_.use_control) throw ConfigError("model has no control pathway");
  detail::EncoderCache<S> ec;
  encoder_forward(params_, control_pathway ? layout_->ctrl_enc : layout_->base_enc, cond, config_.tau, ec);
  return ec.global_emb;
}

template <typename S>
Mat<S> Denoiser<S>::forward(const Mat<S>& x, std::span<const double> t, const ConditionBatch<S>& cond,
                            ForwardMode mode, Cache* cache) const {
  check_inputs(config_, x, t, cond);
  if (mode == ForwardMode::controlled && !config_.use_control) {
    throw ConfigError("controlled forward requires control parameters");
  }
  const auto& l = *layout_;
  const auto& p = params_;
  const Index b = static_cast<Index>(t.size());
  const Index levels = config_.levels;
  const Index tau = config_.tau;
  const Index c = config_.channels;
  const Index c2 = 2 * c;

  Cache local_cache;
  Cache& k = cache ? *cache : local_cache;
  const bool keep = cache != nullptr;
  k.batch = b;
  k.mode = mode;
  k.present = cond.present;

  k.temb_raw.resize(config_.t_emb_dim, b);
  for (Index s = 0; s < b; ++s) {
    const auto f = timestep_features(t[static_cast<std::size_t>(s)], config_.t_emb_dim);
    for (Index i = 0; i < config_.t_emb_dim; ++i) k.temb_raw(i, s) = static_cast<S>(f[static_cast<std::size_t>(i)]);
  }
  k.temb1_pre = dense_forward(p, l.temb1, k.temb_raw);
  k.temb1 = silu(k.temb1_pre);
  k.temb2_pre = dense_forward(p, l.temb2, k.temb1);
  k.temb = silu(k.temb2_pre);

  encoder_forward(p, l.base_enc, cond, tau, k.base_enc);
  if (mode == ForwardMode::controlled) {
    encoder_forward(p, l.ctrl_enc, cond, tau, k.ctrl_enc);
    k.ctrl_feat.resize(config_.local_dim + config_.global_dim, b * tau);
    k.ctrl_feat.topRows(config_.local_dim) = k.ctrl_enc.local_emb;
    for (Index s = 0; s < b; ++s) {
      k.ctrl_feat.block(config_.local_dim, s * tau, config_.global_dim, tau).colwise() = k.ctrl_enc.global_emb.col(s);
    }
  }

  if (keep) k.x = x;
  k.in_pre = dense_forward(p, l.input, x);
  Mat<S> h = silu(k.in_pre);
  for (Index s = 0; s < b; ++s) {
    for (Index lv = 0; lv < levels; ++lv) {
      h.middleCols((s * levels + lv) * tau, tau).colwise() += p[l.level_emb].value.col(lv);
    }
  }

  const S inv_sqrt2 = static_cast<S>(1.0 / std::sqrt(2.0));
  Mat<S> skip = Mat<S>::Zero(c, h.cols());
  k.blocks.resize(keep ? l.blocks.size() : 0);
  for (std::size_t bi = 0; bi < l.blocks.size(); ++bi) {
    const auto& blk = l.blocks[bi];
    Mat<S> y0 = conv_forward(p, blk.dil, h, tau);
    Mat<S> film_t = dense_forward(p, blk.film_t, k.temb);
    Mat<S> film_l = dense_forward(p, blk.film_l, k.base_enc.local_emb);
    Mat<S> film_g = dense_forward(p, blk.film_g, k.base_enc.global_emb);
    Mat<S> ctrl;
    if (mode == ForwardMode::controlled) ctrl = dense_forward(p, blk.ctrl_proj, k.ctrl_feat);
    const auto m = compose_scale_shift(film_t, film_l, film_g, ctrl.size() ? &ctrl : nullptr, c2, tau);
    Mat<S> y;
    modulate(y0, m, y, levels, tau);
    if (keep) {
      auto& bc = k.blocks[bi];
      bc.h = h;
      bc.y0 = std::move(y0);
    }
    const Arr<S> gate = y.topRows(c).array().tanh() * (S(0.5) * (S(0.5) * y.bottomRows(c).array()).tanh() + S(0.5));
    const Mat<S> o = dense_forward(p, blk.out, Mat<S>(gate.matrix()));
    h = (h + o.topRows(c)) * inv_sqrt2;
    skip += o.bottomRows(c);
    if (keep) {
      auto& bc = k.blocks[bi];
      bc.film_t = std::move(film_t);
      bc.film_l = std::move(film_l);
      bc.film_g = std::move(film_g);
    }
  }
  skip *= static_cast<S>(1.0 / std::sqrt(static_cast<double>(config_.n_blocks)));
  k.head1_pre = dense_forward(p, l.head1, skip);
  k.head1 = silu(k.head1_pre);
  if (keep) k.skip = std::move(skip);
  return dense_forward(p, l.head2, k.head1);
}

template <typename S>
void Denoiser<S>::backward(const Mat<S>& grad_eps, const Cache& k, Gradients<S>& g, TrainableGroups groups) const {
  if (k.blocks.size() != layout_->blocks.size()) throw ConfigError("backward requires a cache from forward");
  if (g.values.size() != params_.size()) throw ConfigError("gradient buffer does not match parameters");
  const bool controlled = k.mode == ForwardMode::controlled;
  if (groups.control && !controlled) throw ConfigError("control gradients need a controlled forward pass");
  const auto& l = *layout_;
  const auto& p = params_;
  const Index b = k.batch;
  const Index levels = config_.levels;
  const Index tau = config_.tau;
  const Index c = config_.channels;
  const Index c2 = 2 * c;
  const bool gb = groups.base;

  Mat<S> g_head1 = dense_backward(p, l.head2, k.head1, grad_eps, g, gb, true);
  silu_backward(g_head1, k.head1_pre);
  Mat<S> g_skip = dense_backward(p, l.head1, k.skip, g_head1, g, gb, true);
  g_skip *= static_cast<S>(1.0 / std::sqrt(static_cast<double>(config_.n_blocks)));

  const S inv_sqrt2 = static_cast<S>(1.0 / std::sqrt(2.0));
  Mat<S> g_h = Mat<S>::Zero(c, grad_eps.cols());
  Mat<S> g_temb, g_local, g_global, g_ctrl;
  if (gb) {
    g_temb = Mat<S>::Zero(config_.t_emb_dim, b);
    g_local = Mat<S>::Zero(config_.local_dim, b * tau);
    g_global = Mat<S>::Zero(config_.global_dim, b);
  }
  if (groups.control) g_ctrl = Mat<S>::Zero(config_.local_dim + config_.global_dim, b * tau);

  for (std::size_t bi = l.blocks.size(); bi-- > 0;) {
    const auto& blk = l.blocks[bi];
    const auto& bc = k.blocks[bi];
    // Recompute the modulated activations from the cached conv output.
    Mat<S> ctrl;
    if (controlled) ctrl = dense_forward(p, blk.ctrl_proj, k.ctrl_feat);
    const auto m = compose_modulation(bc.film_t, bc.film_l, bc.film_g, controlled ? &ctrl : nullptr, c2, tau);
    Mat<S> y3;
    modulate(bc.y0, m, y3, levels, tau);
    const Arr<S> ta = y3.topRows(c).array().tanh();
    const Arr<S> sg = S(0.5) * (S(0.5) * y3.bottomRows(c).array()).tanh() + S(0.5);

    Mat<S> g_o(c2, g_h.cols());
    g_o.topRows(c) = g_h * inv_sqrt2;
    g_o.bottomRows(c) = g_skip;
    if (gb) {
      const Mat<S> gate = (ta * sg).matrix();
      g.values[blk.out.w].noalias() += g_o * gate.transpose();
      g.values[blk.out.b] += g_o.rowwise().sum();
    }
    const Mat<S> g_gate = p[blk.out.w].value.transpose() * g_o;
    Mat<S> g_y(c2, g_h.cols());
    g_y.topRows(c) = (g_gate.array() * sg * (S(1) - ta * ta)).matrix();
    g_y.bottomRows(c) = (g_gate.array() * ta * sg * (S(1) - sg)).matrix();

    // Gradients of the per-step scale and shift; g_y becomes d/dy0 in place.
    Mat<S> d_scale = Mat<S>::Zero(c2, b * tau);
    Mat<S> d_shift = Mat<S>::Zero(c2, b * tau);
    for (Index s = 0; s < b; ++s) {
      const auto scale = m.scale.middleCols(s * tau, tau).array();
      for (Index lv = 0; lv < levels; ++lv) {
        const Index col = (s * levels + lv) * tau;
        auto gy = g_y.middleCols(col, tau).array();
        d_scale.middleCols(s * tau, tau).array() += gy * bc.y0.middleCols(col, tau).array();
        d_shift.middleCols(s * tau, tau).array() += gy;
        gy *= scale;
      }
    }
    if (groups.control) {
      g.values[blk.ctrl_proj.w].noalias() += d_shift * k.ctrl_feat.transpose();
      g.values[blk.ctrl_proj.b] += d_shift.rowwise().sum();
      g_ctrl.noalias() += p[blk.ctrl_proj.w].value.transpose() * d_shift;
    }
    if (!gb && bi == 0) break;  // nothing below the first block needs gradients

    if (gb) {
      const auto ds = d_scale.array();
      const auto dh = d_shift.array();
      Mat<S> d_film_t(2 * c2, b), d_film_l(2 * c2, b * tau), d_film_g(2 * c2, b);
      const Mat<S> alg = (m.al.array() * m.ag.array()).matrix();
      d_film_t.topRows(c2) = reduce_steps<S>((ds * alg.array()).matrix(), tau);
      d_film_t.bottomRows(c2) = reduce_steps<S>((dh * alg.array()).matrix(), tau);
      d_film_l.topRows(c2) = ((ds * m.at.array() + dh * m.bt.array()) * m.ag.array()).matrix();
      d_film_l.bottomRows(c2) = (dh * m.ag.array()).matrix();
      d_film_g.topRows(c2) = reduce_steps<S>(
          (ds * m.at.array() * m.al.array() + dh * (m.bt.array() * m.al.array() + m.bl.array())).matrix(), tau);
      d_film_g.bottomRows(c2) = reduce_steps<S>(d_shift, tau);
      g_temb += dense_backward(p, blk.film_t, k.temb, d_film_t, g, true, true);
      g_local += dense_backward(p, blk.film_l, k.base_enc.local_emb, d_film_l, g, true, true);
      g_global += dense_backward(p, blk.film_g, k.base_enc.global_emb, d_film_g, g, true, true);
    }
    const bool need_input = gb || bi > 0;
    Mat<S> g_in = conv_backward(p, blk.dil, bc.h, g_y, tau, g, gb, need_input);
    if (need_input) g_h = g_in + g_h * inv_sqrt2;
  }

  if (groups.control) {
    Mat<S> g_cl = g_ctrl.topRows(config_.local_dim);
    Mat<S> g_cg(config_.global_dim, b);
    for (Index s = 0; s < b; ++s) {
      g_cg.col(s) = g_ctrl.block(config_.local_dim, s * tau, config_.global_dim, tau).rowwise().sum();
    }
    encoder_backward(p, l.ctrl_enc, k.ctrl_enc, k.present, tau, std::move(g_cl), std::move(g_cg), g);
  }
  if (!gb) return;

  for (Index s = 0; s < b; ++s) {
    for (Index lv = 0; lv < levels; ++lv) {
      g.values[l.level_emb].col(lv) += g_h.middleCols((s * levels + lv) * tau, tau).rowwise().sum();
    }
  }
  silu_backward(g_h, k.in_pre);
  dense_backward(p, l.input, k.x, g_h, g, true, false);

  silu_backward(g_temb, k.temb2_pre);
  Mat<S> g_t1 = dense_backward(p, l.temb2, k.temb1, g_temb, g, true, true);
  silu_backward(g_t1, k.temb1_pre);
  dense_backward(p, l.temb1, k.temb_raw, g_t1, g, true, false);

  encoder_backward(p, l.base_enc, k.base_enc, k.present, tau, std::move(g_local), std::move(g_global), g);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct Gradients<float>;
template struct Gradients<double>;
template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace difflob
