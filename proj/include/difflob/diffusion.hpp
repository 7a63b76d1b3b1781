#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "difflob/error.hpp"

namespace difflob {

/// Discrete DDPM noise schedule and its continuous-time reading.
///
/// Level i (0-based) sits at diffusion time t = (i + 1) / N. The continuous
/// rate is piecewise constant, beta(t) = N * beta[i], so that one step of
/// length 1/N integrates to exactly beta[i].
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  double beta_min = 0.0;
  double beta_max = 0.0;

  int steps() const noexcept { return static_cast<int>(beta.size()); }
  double time_of(int level) const { return static_cast<double>(level + 1) / steps(); }
  int level_of(double t) const;
  double continuous_beta(double t) const { return steps() * beta[static_cast<std::size_t>(level_of(t))]; }
};

// The classic 1000-step DDPM grid (1e-4, 0.02) rescaled to 100 levels so
// that alpha_bar at the last level is near zero; in continuous time this is
// beta(t) running linearly from 0.1 to 20.
inline constexpr int kDefaultNoiseLevels = 100;
inline constexpr double kDefaultBetaMin = 1e-3;
inline constexpr double kDefaultBetaMax = 0.2;

/// Linear beta grid between the endpoints.
DiffusionSchedule build_schedule(int n = kDefaultNoiseLevels, double beta_min = kDefaultBetaMin,
                                 double beta_max = kDefaultBetaMax);

/// x_i = sqrt(alpha_bar[i]) x0 + sqrt(1 - alpha_bar[i]) z.
template <typename Derived>
auto forward_perturb(const Eigen::MatrixBase<Derived>& x0, const DiffusionSchedule& schedule, int level,
                     const Eigen::MatrixBase<Derived>& noise) {
  using Scalar = typename Derived::Scalar;
  if (level < 0 || level >= schedule.steps()) throw ConfigError("noise level out of range");
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols()) throw ConfigError("forward_perturb shape mismatch");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(level)];
  using Plain = typename Derived::PlainObject;
  Plain out = static_cast<Scalar>(std::sqrt(ab)) * x0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * noise;
  return out;
}

/// Mean squared error between predicted and injected noise.
template <typename DerivedA, typename DerivedB>
double dsm_loss(const Eigen::MatrixBase<DerivedA>& eps_pred, const Eigen::MatrixBase<DerivedB>& noise) {
  if (eps_pred.rows() != noise.rows() || eps_pred.cols() != noise.cols()) throw ConfigError("dsm_loss shape mismatch");
  const auto n = static_cast<double>(eps_pred.size());
  if (n == 0) return 0.0;
  return static_cast<double>((eps_pred - noise).squaredNorm()) / n;
}

/// d dsm_loss / d eps_pred.
template <typename DerivedA, typename DerivedB>
typename DerivedA::PlainObject dsm_loss_grad(const Eigen::MatrixBase<DerivedA>& eps_pred,
                                             const Eigen::MatrixBase<DerivedB>& noise) {
  using Scalar = typename DerivedA::Scalar;
  if (eps_pred.rows() != noise.rows() || eps_pred.cols() != noise.cols()) throw ConfigError("dsm_loss shape mismatch");
  const Scalar scale = Scalar(2) / static_cast<Scalar>(eps_pred.size());
  return scale * (eps_pred - noise);
}

/// Converts predicted noise at a level to a score: s = -eps / sqrt(1 - alpha_bar).
template <typename Derived>
typename Derived::PlainObject eps_to_score(const Eigen::MatrixBase<Derived>& eps, const DiffusionSchedule& schedule,
                                           int level) {
  using Scalar = typename Derived::Scalar;
  const double ab = schedule.alpha_bar.at(static_cast<std::size_t>(level));
  return static_cast<Scalar>(-1.0 / std::sqrt(1.0 - ab)) * eps;
}

/// Classifier-free guidance: (1 + w) s_cond - w s_uncond.
template <typename DerivedA, typename DerivedB>
typename DerivedA::PlainObject guided_score(const Eigen::MatrixBase<DerivedA>& s_cond,
                                            const Eigen::MatrixBase<DerivedB>& s_uncond, double w) {
  using Scalar = typename DerivedA::Scalar;
  if (s_cond.rows() != s_uncond.rows() || s_cond.cols() != s_uncond.cols()) {
    throw ConfigError("guided_score shape mismatch");
  }
  return static_cast<Scalar>(1.0 + w) * s_cond - static_cast<Scalar>(w) * s_uncond;
}

/// Score of a batch of states, one column per trajectory. `conditioned`
/// selects the conditional or the unconditional pathway.
using ScoreField = std::function<Eigen::MatrixXf(const Eigen::MatrixXf& x, double t, bool conditioned)>;

/// Fills `m` with standard normal draws in column-major order.
template <typename Derived, typename Rng>
void fill_normal(Eigen::MatrixBase<Derived>& m, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto* data = m.derived().data();
  for (Eigen::Index i = 0; i < m.size(); ++i) data[i] = static_cast<typename Derived::Scalar>(normal(rng));
}

struct SampleOptions {
  double guidance = 1.0;
  /// Zero the injected noise at every step (deterministic integrator checks).
  bool disable_noise = false;
};

/// Reverse-time ancestral sampler. Starts at x ~ N(0, I) and for
/// i = N..1 with t = i/N, dt = 1/N applies
///   x <- x + (beta(t)/2 x + beta(t) s) dt + sqrt(beta(t) dt) z
/// where s is the guided score. The unconditional pathway is evaluated only
/// when the guidance weight is non-zero.
Eigen::MatrixXf ancestral_sample(const ScoreField& score, const DiffusionSchedule& schedule, Eigen::Index dim,
                                 Eigen::Index batch, std::mt19937_64& rng, const SampleOptions& options = {});

}  // namespace difflob
