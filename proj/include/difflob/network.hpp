#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace difflob {

/// Denoiser hyperparameters. `levels` counts the 2K book rows.
struct ModelConfig {
  int n_blocks = 16;
  int channels = 64;
  int levels = 20;
  int tau = 32;
  int t_emb_dim = 128;
  int local_dim = 64;
  int global_dim = 64;
  int kernel = 3;
  int local_kernel = 3;
  int dilation_cycle = 10;  // block b uses dilation 2^(b mod cycle)
  bool use_control = true;
  double dropout_p = 0.5;

  /// Per-step local inputs: history step and last history step (price and
  /// volume rows each), liquidity, imbalance and the time-of-day pair.
  int local_inputs() const noexcept { return 4 * levels + 4; }
  int dilation(int block) const noexcept { return 1 << (block % dilation_cycle); }

  bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& config);

enum class ParamGroup { base, control };
enum class ForwardMode { base, controlled };

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::base;
  Mat<S> value;
};

/// Ordered, named parameters. Index order is the registration order and is
/// stable across save/load.
template <typename S>
class ParameterSet {
 public:
  std::size_t add(std::string name, ParamGroup group, Eigen::Index rows, Eigen::Index cols);

  std::size_t size() const noexcept { return items_.size(); }
  Parameter<S>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return items_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;

  /// Number of scalars in a group.
  std::size_t scalar_count(ParamGroup group) const;

  template <typename T>
  ParameterSet<T> cast() const {
    ParameterSet<T> out;
    for (const auto& p : items_) {
      const auto i = out.add(p.name, p.group, p.value.rows(), p.value.cols());
      out[i].value = p.value.template cast<T>();
    }
    return out;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Parameter<S>> items_;
};

/// One gradient matrix per parameter, shape-congruent with a ParameterSet.
template <typename S>
struct Gradients {
  std::vector<Mat<S>> values;

  static Gradients like(const ParameterSet<S>& params);
  void zero();
};

/// Network-ready conditioning for a batch of B samples.
///   local:  [local_inputs x (B * tau)], tau consecutive columns per sample
///   global: [2 x B] (normalized trend, vol)
///   present: per sample; absent samples see the learned null embeddings.
template <typename S>
struct ConditionBatch {
  Mat<S> local;
  Mat<S> global;
  std::vector<std::uint8_t> present;

  Eigen::Index batch() const noexcept { return global.cols(); }
};

/// Which parameter groups receive gradients in backward().
struct TrainableGroups {
  bool base = true;
  bool control = false;
};

/// Raw sinusoidal features of diffusion time, interleaved [sin, cos] at
/// geometrically spaced frequencies; time is scaled by 1000 first.
std::vector<double> timestep_features(double t, int dim);

namespace detail {

template <typename S>
struct EncoderCache {
  Mat<S> local_in, local1_pre, local1, local2_pre, local_emb;
  Mat<S> global_in, global1_pre, global1, global2_pre, global_emb;
};

template <typename S>
struct BlockCache {
  Mat<S> h;       // block input [C x N]
  Mat<S> y0;      // dilated convolution output [2C x N]
  Mat<S> film_t;  // [4C x B]: scale offsets then shifts
  Mat<S> film_l;  // [4C x (B * tau)]
  Mat<S> film_g;  // [4C x B]
};

}  // namespace detail

/// Wavenet-style denoiser with FiLM conditioning and a zero-initialized
/// control pathway. Inputs and outputs are [2 x (B * levels * tau)] with
/// channel 0 the price row and channel 1 the volume row; column index is
/// (b * levels + l) * tau + t.
template <typename S>
class Denoiser {
 public:
  /// Activations kept by forward() for backward().
  struct Cache {
    Eigen::Index batch = 0;
    ForwardMode mode = ForwardMode::base;
    std::vector<std::uint8_t> present;
    Mat<S> x, in_pre;
    Mat<S> temb_raw, temb1_pre, temb1, temb2_pre, temb;
    detail::EncoderCache<S> base_enc, ctrl_enc;
    Mat<S> ctrl_feat;
    std::vector<detail::BlockCache<S>> blocks;
    Mat<S> skip, head1_pre, head1;
  };

  Denoiser(const ModelConfig& config, std::uint64_t seed);
  Denoiser(const ModelConfig& config, ParameterSet<S> params);
  ~Denoiser();
  Denoiser(const Denoiser&);
  Denoiser& operator=(const Denoiser&);
  Denoiser(Denoiser&&) noexcept;
  Denoiser& operator=(Denoiser&&) noexcept;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet<S>& params() noexcept { return params_; }
  const ParameterSet<S>& params() const noexcept { return params_; }
  bool has_control() const noexcept { return config_.use_control; }

  /// Predicted noise. Fills `cache` for a later backward() when given.
  Mat<S> forward(const Mat<S>& x, std::span<const double> t, const ConditionBatch<S>& cond, ForwardMode mode,
                 Cache* cache = nullptr) const;

  /// Accumulates d loss / d params for the requested groups into `grads`.
  void backward(const Mat<S>& grad_eps, const Cache& cache, Gradients<S>& grads, TrainableGroups groups) const;

  /// Per-step local embedding [local_dim x (B * tau)] of the base (or control) encoder.
  Mat<S> encode_local(const ConditionBatch<S>& cond, bool control_pathway = false) const;
  /// Global embedding [global_dim x B].
  Mat<S> encode_global(const ConditionBatch<S>& cond, bool control_pathway = false) const;

  /// Starts the control pathway as a copy of the base condition encoders with
  /// zeroed injection projections.
  void init_control_from_base();

 private:
  struct Layout;

  void build();

  ModelConfig config_;
  ParameterSet<S> params_;
  std::unique_ptr<Layout> layout_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template struct Gradients<float>;
extern template struct Gradients<double>;
extern template class Denoiser<float>;
extern template class Denoiser<double>;

}  // namespace difflob
