#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace difflob {

/// Two-sample distances between pooled scalar samples.
struct DistanceQuad {
  double ks = 0.0;
  double wasserstein = 0.0;
  double kl = 0.0;
  double js = 0.0;
};

inline constexpr int kDefaultHistogramBins = 100;
inline constexpr double kHistogramEpsilon = 1e-10;

/// sup_x |F_a(x) - F_b(x)| over the pooled sample points.
double ks_distance(std::span<const double> a, std::span<const double> b);

/// Order-1 Wasserstein distance, the integral of |F_a - F_b|.
double wasserstein_1d(std::span<const double> a, std::span<const double> b);

struct Divergences {
  double kl = 0.0;  // KL(a || b), nats
  double js = 0.0;  // nats, in [0, ln 2]
};

/// KL and JS between two probability vectors after epsilon smoothing and renormalization.
Divergences kl_js_from_histograms(std::span<const double> p, std::span<const double> q,
                                  double epsilon = kHistogramEpsilon);

/// Histograms both samples on their shared min-max range, then divergences.
Divergences kl_js(std::span<const double> a, std::span<const double> b, int bins = kDefaultHistogramBins);

DistanceQuad distance_quad(std::span<const double> a, std::span<const double> b, int bins = kDefaultHistogramBins);

/// Normalized histogram over [lo, hi] with `bins` equal bins; the top edge is inclusive.
std::vector<double> histogram(std::span<const double> sample, double lo, double hi, int bins);

/// Sample autocorrelation at lags 1..max_lag. Empty when the series has no variance.
std::vector<double> autocorrelation(std::span<const double> series, int max_lag);

/// Pearson correlation between the columns of `samples` (rows are observations).
/// Zero-variance columns correlate 0 with others and 1 with themselves.
Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& samples);

struct TTestResult {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;  // one-sided, H1: mean(a) > mean(b)
};

/// Welch's unequal-variance t-test.
TTestResult welch_t_test_greater(std::span<const double> a, std::span<const double> b);

}  // namespace difflob
