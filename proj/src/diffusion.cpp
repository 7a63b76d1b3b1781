#include "difflob/diffusion.hpp"

#include <algorithm>

namespace difflob {

int DiffusionSchedule::level_of(double t) const {
  const int n = steps();
  const int level = static_cast<int>(std::lround(t * n)) - 1;
  return std::clamp(level, 0, n - 1);
}

DiffusionSchedule build_schedule(int n, double beta_min, double beta_max) {
  if (n < 1) throw ConfigError("schedule needs at least one noise level");
  if (!(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max)) {
    throw ConfigError("schedule endpoints must satisfy 0 < beta_min <= beta_max < 1");
  }
  if (n > 1 && beta_min == beta_max) throw ConfigError("schedule endpoints must differ for more than one level");
  DiffusionSchedule s;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(static_cast<std::size_t>(n));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    const auto idx = static_cast<std::size_t>(i);
    s.beta[idx] = beta_min + (beta_max - beta_min) * frac;
    s.alpha[idx] = 1.0 - s.beta[idx];
    prod *= s.alpha[idx];
    s.alpha_bar[idx] = prod;
  }
  return s;
}

Eigen::MatrixXf ancestral_sample(const ScoreField& score, const DiffusionSchedule& schedule, Eigen::Index dim,
                                 Eigen::Index batch, std::mt19937_64& rng, const SampleOptions& options) {
  const int n = schedule.steps();
  const double dt = 1.0 / n;
  Eigen::MatrixXf x(dim, batch);
  fill_normal(x, rng);
  Eigen::MatrixXf z(dim, batch);
  for (int i = n; i >= 1; --i) {
    const double t = static_cast<double>(i) / n;
    const double beta_t = schedule.continuous_beta(t);
    if (options.disable_noise) {
      z.setZero();
    } else {
      fill_normal(z, rng);
    }
    Eigen::MatrixXf s = score(x, t, true);
    if (s.rows() != dim || s.cols() != batch) throw ConfigError("score field returned the wrong shape");
    if (options.guidance != 0.0) {
      const Eigen::MatrixXf s_uncond = score(x, t, false);
      s = guided_score(s, s_uncond, options.guidance);
    }
    x += static_cast<float>(dt) * (static_cast<float>(0.5 * beta_t) * x + static_cast<float>(beta_t) * s) +
         static_cast<float>(std::sqrt(beta_t * dt)) * z;
  }
  return x;
}

}  // namespace difflob
