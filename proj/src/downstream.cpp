#include "difflob/downstream.hpp"

#include <cmath>
#include <sstream>

#include "difflob/error.hpp"
#include "difflob/evaluation.hpp"

namespace difflob {

Standardizer Standardizer::fit(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) throw DataError("cannot standardize an empty design matrix");
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - s.mean(j)).square().mean();
    s.scale(j) = var > 1e-18 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& x) const {
  return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

namespace {

Eigen::MatrixXd with_bias(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd a(x.rows(), x.cols() + 1);
  a.leftCols(x.cols()) = x;
  a.col(x.cols()).setOnes();
  return a;
}

}  // namespace

void RidgeRegression::fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  if (x.rows() != y.size() || x.rows() == 0) throw DataError("ridge design and targets disagree");
  const double n = static_cast<double>(x.rows());
  const Eigen::MatrixXd a = with_bias(x);
  Eigen::MatrixXd h = a.transpose() * a / n;
  h.diagonal().head(x.cols()).array() += lambda;
  const Eigen::VectorXd g = a.transpose() * y / n;
  const Eigen::VectorXd sol = h.ldlt().solve(g);
  w = sol.head(x.cols());
  bias = sol(x.cols());
}

Eigen::VectorXd RidgeRegression::predict(const Eigen::MatrixXd& x) const {
  return (x * w).array() + bias;
}

void LogisticRegression::fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, int max_iter,
                             double tol) {
  if (x.rows() != y.size() || x.rows() == 0) throw DataError("logistic design and labels disagree");
  const double n = static_cast<double>(x.rows());
  const Eigen::MatrixXd a = with_bias(x);
  const Eigen::Index d = a.cols();
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d);
  iterations = 0;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd z = a * theta;
    const Eigen::ArrayXd p = 1.0 / (1.0 + (-z.array()).exp());
    Eigen::VectorXd grad = a.transpose() * (p - y.array()).matrix() / n;
    grad.head(d - 1) += 2.0 * lambda * theta.head(d - 1);
    const Eigen::ArrayXd wts = (p * (1.0 - p)).max(1e-12);
    Eigen::MatrixXd h = a.transpose() * (a.array().colwise() * wts).matrix() / n;
    h.diagonal().head(d - 1).array() += 2.0 * lambda;
    const Eigen::VectorXd step = h.ldlt().solve(grad);
    theta -= step;
    ++iterations;
    if (!theta.allFinite()) throw NumericalError("logistic regression diverged");
    if (step.norm() < tol * (1.0 + theta.norm())) break;
  }
  w = theta.head(d - 1);
  bias = theta(d - 1);
}

Eigen::VectorXd LogisticRegression::probability(const Eigen::MatrixXd& x) const {
  return (1.0 / (1.0 + (-((x * w).array() + bias)).exp())).matrix();
}

Eigen::VectorXd LogisticRegression::predict(const Eigen::MatrixXd& x) const {
  return (probability(x).array() >= 0.5).cast<double>().matrix();
}

void MajorityClassifier::fit(const Eigen::VectorXd& y) {
  if (y.size() == 0) throw DataError("cannot fit a classifier without labels");
  label = y.sum() * 2.0 >= static_cast<double>(y.size()) ? 1.0 : 0.0;
}

Eigen::VectorXd MajorityClassifier::predict(const Eigen::MatrixXd& x) const {
  return Eigen::VectorXd::Constant(x.rows(), label);
}

double accuracy(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth) {
  if (predicted.size() != truth.size()) throw ConfigError("accuracy inputs differ in length");
  if (truth.size() == 0) return 0.0;
  return (predicted.array() == truth.array()).cast<double>().mean();
}

double r_squared(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth) {
  if (predicted.size() != truth.size()) throw ConfigError("r_squared inputs differ in length");
  if (truth.size() == 0) return 0.0;
  const double ss_tot = (truth.array() - truth.mean()).square().sum();
  if (!(ss_tot > 0)) return 0.0;
  return 1.0 - (truth - predicted).squaredNorm() / ss_tot;
}

Eigen::MatrixXd history_features(const std::vector<const WindowPair*>& windows) {
  if (windows.empty()) return {};
  const auto width = static_cast<Eigen::Index>(windows.front()->history.data().size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(windows.size()), width);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto d = windows[i]->history.data();
    if (static_cast<Eigen::Index>(d.size()) != width) throw DataError("history blocks differ in shape");
    for (Eigen::Index j = 0; j < width; ++j) x(static_cast<Eigen::Index>(i), j) = d[static_cast<std::size_t>(j)];
  }
  return x;
}

const UsefulnessCell* UsefulnessTable::find(const std::string& task, const std::string& setting,
                                            const std::string& tail) const {
  for (const auto& c : cells) {
    if (c.task == task && c.setting == setting && c.tail == tail) return &c;
  }
  return nullptr;
}

namespace {

struct Task {
  std::string name;
  RegimeComponent component;
  bool classification;
};

double label_of(const Task& task, const RegimeVector& r) {
  const double v = component_summary(r, task.component);
  return task.classification ? (v > 0 ? 1.0 : 0.0) : v;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

UsefulnessTable usefulness_eval(TrajectoryGenerator& generator, const std::vector<WindowPair>& train,
                                const std::vector<WindowPair>& heldout, const UsefulnessOptions& opt) {
  if (train.empty() || heldout.empty()) throw DataError("usefulness evaluation needs train and heldout windows");
  const auto train_set = spaced_subset(train, opt.max_train);
  std::vector<const WindowPair*> held;
  for (const auto& w : heldout) held.push_back(&w);
  const Eigen::MatrixXd x_train = history_features(train_set);
  const Eigen::MatrixXd x_held = history_features(held);
  std::vector<RegimeVector> train_regimes, held_regimes;
  for (const auto& w : train) train_regimes.push_back(w.regime);
  for (const auto* w : held) held_regimes.push_back(w->regime);

  const std::vector<Task> tasks{{"trend", RegimeComponent::trend, true},
                                {"liquidity", RegimeComponent::liq, false}};
  UsefulnessTable table;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    const Task& task = tasks[ti];
    Eigen::VectorXd y_train(x_train.rows()), y_held(x_held.rows());
    for (std::size_t i = 0; i < train_set.size(); ++i) y_train(static_cast<Eigen::Index>(i)) = label_of(task, train_set[i]->regime);
    for (std::size_t i = 0; i < held.size(); ++i) y_held(static_cast<Eigen::Index>(i)) = label_of(task, held[i]->regime);

    // Counterfactual samples: training histories under both tail interventions.
    const auto cf_hist = spaced_subset(train, opt.cf_histories);
    Eigen::MatrixXd x_cf(0, x_train.cols());
    Eigen::VectorXd y_cf(0);
    for (TailSide side : {TailSide::high, TailSide::low}) {
      const RegimeTarget target = regime_quantile_targets(train_regimes, task.component, side, opt.q);
      std::vector<ConditionBundle> bundles;
      for (const auto* w : cf_hist) {
        auto b = observed_bundle(*w);
        b.regime = apply_target(w->regime, target);
        bundles.push_back(std::move(b));
      }
      const auto futures = generator.generate(bundles, opt.seed + 7919 * (ti + 1) + (side == TailSide::high ? 0 : 1));
      std::vector<double> anchors;
      for (const auto* w : cf_hist) anchors.push_back(w->anchor_mid);
      const DecodedSet gen = decode_set(futures, anchors, generator.stats());
      std::vector<double> realized;
      for (const auto& r : gen.regimes) realized.push_back(component_summary(r, task.component));
      const double m = mean_of(realized);
      if (task.component == RegimeComponent::trend) {
        (side == TailSide::high ? table.cf_realized_high_trend : table.cf_realized_low_trend) = m;
      } else {
        (side == TailSide::high ? table.cf_realized_high_liq : table.cf_realized_low_liq) = m;
      }
      const double label = task.classification ? (target.scalar > 0 ? 1.0 : 0.0) : target.scalar;
      const Eigen::MatrixXd xs = history_features(cf_hist);
      const Eigen::Index old = x_cf.rows();
      x_cf.conservativeResize(old + xs.rows(), Eigen::NoChange);
      x_cf.bottomRows(xs.rows()) = xs;
      y_cf.conservativeResize(old + xs.rows());
      y_cf.tail(xs.rows()).setConstant(label);
      table.cf_samples += static_cast<std::size_t>(xs.rows());
    }

    const TailThresholds th = tail_thresholds(held_regimes, task.component, opt.q);
    std::vector<Eigen::Index> high_idx, low_idx;
    for (std::size_t i = 0; i < held.size(); ++i) {
      const double v = component_summary(held[i]->regime, task.component);
      if (v >= th.high) high_idx.push_back(static_cast<Eigen::Index>(i));
      if (v <= th.low) low_idx.push_back(static_cast<Eigen::Index>(i));
    }

    for (const std::string setting : {"Real", "Real*2", "Real+CF"}) {
      Eigen::MatrixXd x;
      Eigen::VectorXd y;
      if (setting == "Real") {
        x = x_train;
        y = y_train;
      } else if (setting == "Real*2") {
        x.resize(2 * x_train.rows(), x_train.cols());
        x << x_train, x_train;
        y.resize(2 * y_train.size());
        y << y_train, y_train;
      } else {
        x.resize(x_train.rows() + x_cf.rows(), x_train.cols());
        x << x_train, x_cf;
        y.resize(y_train.size() + y_cf.size());
        y << y_train, y_cf;
      }
      const Standardizer st = Standardizer::fit(x);
      const Eigen::MatrixXd xs = st.apply(x);
      const Eigen::MatrixXd xh = st.apply(x_held);
      Eigen::VectorXd pred;
      if (task.classification) {
        LogisticRegression lr;
        lr.fit(xs, y, opt.logistic_lambda);
        pred = lr.predict(xh);
      } else {
        RidgeRegression rr;
        rr.fit(xs, y, opt.ridge_lambda);
        pred = rr.predict(xh);
      }
      for (const auto& [tail, idx] : {std::pair{"high", &high_idx}, std::pair{"low", &low_idx}}) {
        Eigen::VectorXd p(static_cast<Eigen::Index>(idx->size())), t(static_cast<Eigen::Index>(idx->size()));
        for (std::size_t i = 0; i < idx->size(); ++i) {
          p(static_cast<Eigen::Index>(i)) = pred((*idx)[i]);
          t(static_cast<Eigen::Index>(i)) = y_held((*idx)[i]);
        }
        UsefulnessCell cell;
        cell.task = task.name;
        cell.setting = setting;
        cell.tail = tail;
        cell.metric = task.classification ? "accuracy" : "r2";
        cell.value = task.classification ? accuracy(p, t) : r_squared(p, t);
        cell.n = idx->size();
        table.cells.push_back(cell);
      }
    }
  }
  return table;
}

io::json to_json(const UsefulnessTable& t) {
  io::json cells = io::json::array();
  for (const auto& c : t.cells) {
    cells.push_back({{"task", c.task},
                     {"setting", c.setting},
                     {"tail", c.tail},
                     {"metric", c.metric},
                     {"value", c.value},
                     {"n", c.n}});
  }
  return {{"cells", cells},
          {"cf_samples", t.cf_samples},
          {"cf_realized",
           {{"trend_high", t.cf_realized_high_trend},
            {"trend_low", t.cf_realized_low_trend},
            {"liq_high", t.cf_realized_high_liq},
            {"liq_low", t.cf_realized_low_liq}}}};
}

void write_usefulness_report(const UsefulnessTable& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_json(dir / "report.json", to_json(t));
  std::ostringstream os;
  os << "task,setting,tail,metric,value,n\n";
  for (const auto& c : t.cells) {
    os << c.task << ',' << c.setting << ',' << c.tail << ',' << c.metric << ',' << io::format_double(c.value) << ','
       << c.n << '\n';
  }
  io::write_text(dir / "usefulness_table.csv", os.str());
}

}  // namespace difflob
