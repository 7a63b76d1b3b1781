#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difflob/generator.hpp"
#include "difflob/io.hpp"
#include "difflob/preprocess.hpp"

namespace difflob {

/// Column standardization; zero-variance columns are only centered.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

/// Minimizes mean squared error + lambda * |w|^2 with an unpenalized bias.
struct RidgeRegression {
  Eigen::VectorXd w;
  double bias = 0.0;

  void fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda);
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

/// Minimizes mean log-loss + lambda * |w|^2 by Newton (IRLS) iterations.
struct LogisticRegression {
  Eigen::VectorXd w;
  double bias = 0.0;
  int iterations = 0;

  void fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, int max_iter = 50, double tol = 1e-10);
  Eigen::VectorXd probability(const Eigen::MatrixXd& x) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;  // 0/1 labels
};

/// Always predicts the most frequent training label (ties go to 1).
struct MajorityClassifier {
  double label = 0.0;

  void fit(const Eigen::VectorXd& y);
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

double accuracy(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth);
/// Coefficient of determination; 0 when the truth has no variance.
double r_squared(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth);

/// Flattened history block, one row per window.
Eigen::MatrixXd history_features(const std::vector<const WindowPair*>& windows);

struct UsefulnessCell {
  std::string task;     // trend | liquidity
  std::string setting;  // Real | Real*2 | Real+CF
  std::string tail;     // high | low
  std::string metric;   // accuracy | r2
  double value = 0.0;
  std::size_t n = 0;
};

struct UsefulnessOptions {
  double q = 0.2;
  std::size_t cf_histories = 100;  // per side and task
  double ridge_lambda = 1e-2;
  double logistic_lambda = 1e-2;
  std::uint64_t seed = 0;
  std::size_t max_train = 0;  // evenly spaced subset of training windows, 0 for all
};

struct UsefulnessTable {
  std::vector<UsefulnessCell> cells;
  std::size_t cf_samples = 0;
  double cf_realized_high_trend = 0.0;
  double cf_realized_low_trend = 0.0;
  double cf_realized_high_liq = 0.0;
  double cf_realized_low_liq = 0.0;

  const UsefulnessCell* find(const std::string& task, const std::string& setting, const std::string& tail) const;
};

/// Trend direction classification and mean-liquidity regression from
/// history features under the Real, Real*2 and Real+CF settings, scored on
/// the top-q and bottom-q heldout windows of the task's regime component.
/// Counterfactual samples pair a training history with the intervention
/// value of the task component as the label.
UsefulnessTable usefulness_eval(TrajectoryGenerator& generator, const std::vector<WindowPair>& train,
                                const std::vector<WindowPair>& heldout, const UsefulnessOptions& options);

io::json to_json(const UsefulnessTable& table);
void write_usefulness_report(const UsefulnessTable& table, const std::filesystem::path& dir);

}  // namespace difflob
