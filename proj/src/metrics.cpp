#include "difflob/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "difflob/error.hpp"

namespace difflob {

namespace {

std::vector<double> sorted_copy(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  std::sort(out.begin(), out.end());
  return out;
}

void require_nonempty(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DataError("distance between empty samples");
}

}  // namespace

double ks_distance(std::span<const double> a_in, std::span<const double> b_in) {
  require_nonempty(a_in, b_in);
  const auto a = sorted_copy(a_in);
  const auto b = sorted_copy(b_in);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double best = 0.0;
  while (i < a.size() || j < b.size()) {
    double x;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j])) {
      x = a[i];
    } else {
      x = b[j];
    }
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    best = std::max(best, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return best;
}

double wasserstein_1d(std::span<const double> a_in, std::span<const double> b_in) {
  require_nonempty(a_in, b_in);
  const auto a = sorted_copy(a_in);
  const auto b = sorted_copy(b_in);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double total = 0.0;
  double prev = std::min(a.front(), b.front());
  while (i < a.size() || j < b.size()) {
    double x;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j])) {
      x = a[i];
    } else {
      x = b[j];
    }
    // CDF difference is constant on [prev, x).
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (x - prev);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    prev = x;
  }
  return total;
}

Divergences kl_js_from_histograms(std::span<const double> p_in, std::span<const double> q_in, double epsilon) {
  if (p_in.size() != q_in.size() || p_in.empty()) throw DataError("histograms differ in size");
  std::vector<double> p(p_in.begin(), p_in.end()), q(q_in.begin(), q_in.end());
  auto smooth = [epsilon](std::vector<double>& h) {
    double total = 0.0;
    for (double& v : h) {
      v += epsilon;
      total += v;
    }
    for (double& v : h) v /= total;
  };
  smooth(p);
  smooth(q);
  Divergences d;
  double kl_pm = 0.0, kl_qm = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    d.kl += p[i] * std::log(p[i] / q[i]);
    kl_pm += p[i] * std::log(p[i] / m);
    kl_qm += q[i] * std::log(q[i] / m);
  }
  d.kl = std::max(0.0, d.kl);
  d.js = std::clamp(0.5 * (kl_pm + kl_qm), 0.0, std::log(2.0));
  return d;
}

std::vector<double> histogram(std::span<const double> sample, double lo, double hi, int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  if (sample.empty()) return h;
  const double width = hi - lo;
  for (double x : sample) {
    int b = 0;
    if (width > 0) {
      b = static_cast<int>(std::floor((x - lo) / width * bins));
      b = std::clamp(b, 0, bins - 1);
    }
    h[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& v : h) v /= static_cast<double>(sample.size());
  return h;
}

Divergences kl_js(std::span<const double> a, std::span<const double> b, int bins) {
  if (bins < 2) throw ConfigError("kl_js needs at least two bins");
  require_nonempty(a, b);
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*amin, *bmin);
  const double hi = std::max(*amax, *bmax);
  return kl_js_from_histograms(histogram(a, lo, hi, bins), histogram(b, lo, hi, bins));
}

DistanceQuad distance_quad(std::span<const double> a, std::span<const double> b, int bins) {
  DistanceQuad d;
  d.ks = ks_distance(a, b);
  d.wasserstein = wasserstein_1d(a, b);
  const auto div = kl_js(a, b, bins);
  d.kl = div.kl;
  d.js = div.js;
  return d;
}

std::vector<double> autocorrelation(std::span<const double> x, int max_lag) {
  const std::size_t n = x.size();
  if (n < 2) return {};
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double denom = 0.0;
  for (double v : x) denom += (v - mean) * (v - mean);
  if (!(denom > 0)) return {};
  std::vector<double> acf;
  for (int lag = 1; lag <= max_lag; ++lag) {
    double num = 0.0;
    for (std::size_t t = 0; t + static_cast<std::size_t>(lag) < n; ++t) {
      num += (x[t] - mean) * (x[t + static_cast<std::size_t>(lag)] - mean);
    }
    acf.push_back(num / denom);
  }
  return acf;
}

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& samples) {
  const Eigen::Index d = samples.cols();
  Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(d, d);
  if (samples.rows() < 2) return corr;
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  const Eigen::MatrixXd centered = samples.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered;
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = i + 1; j < d; ++j) {
      const double denom = std::sqrt(cov(i, i) * cov(j, j));
      const double r = denom > 0 ? std::clamp(cov(i, j) / denom, -1.0, 1.0) : 0.0;
      corr(i, j) = corr(j, i) = r;
    }
  }
  return corr;
}

TTestResult welch_t_test_greater(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("t-test needs at least two observations per sample");
  auto moments = [](std::span<const double> v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  TTestResult r;
  if (!(se2 > 0)) {
    r.statistic = ma > mb ? std::numeric_limits<double>::infinity() : 0.0;
    r.dof = na + nb - 2.0;
    r.p_value = ma > mb ? 0.0 : 1.0;
    return r;
  }
  r.statistic = (ma - mb) / std::sqrt(se2);
  r.dof = se2 * se2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  const boost::math::students_t dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

}  // namespace difflob
