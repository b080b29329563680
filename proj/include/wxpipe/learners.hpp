#pragma once

// Candidate regression learners for sensor calibration. Every learner consumes the
// n x 6 matrix of low-cost hourly values and predicts the reference value of one sensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "wxpipe/error.hpp"
#include "wxpipe/random.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe::calibration {

enum class LearnerKind { Raw, Mean, LM, MLR, Ridge, KNN, Tree, Forest, Ensemble };

constexpr std::string_view to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::Raw: return "RAW";
    case LearnerKind::Mean: return "Mean";
    case LearnerKind::LM: return "LM";
    case LearnerKind::MLR: return "MLR";
    case LearnerKind::Ridge: return "Ridge";
    case LearnerKind::KNN: return "KNN";
    case LearnerKind::Tree: return "Tree";
    case LearnerKind::Forest: return "Forest";
    case LearnerKind::Ensemble: return "Ensemble";
  }
  return "?";
}

inline LearnerKind parse_learner_kind(std::string_view s) {
  for (auto k : {LearnerKind::Raw, LearnerKind::Mean, LearnerKind::LM, LearnerKind::MLR, LearnerKind::Ridge,
                 LearnerKind::KNN, LearnerKind::Tree, LearnerKind::Forest, LearnerKind::Ensemble}) {
    if (to_string(k) == s) return k;
  }
  if (s == "RF") return LearnerKind::Forest;
  if (s == "EL") return LearnerKind::Ensemble;
  throw Error(ErrorCode::InvalidArgument, "unknown learner '" + std::string(s) + "'");
}

/// Which columns of the 6-wide feature matrix a learner reads.
enum class FeatureSet { None, SameSensor, AllSensors };

constexpr std::string_view to_string(FeatureSet f) {
  switch (f) {
    case FeatureSet::None: return "none";
    case FeatureSet::SameSensor: return "same-sensor";
    case FeatureSet::AllSensors: return "all-sensors";
  }
  return "?";
}

constexpr FeatureSet feature_set_for(LearnerKind k) {
  switch (k) {
    case LearnerKind::Mean:
    case LearnerKind::Ensemble: return FeatureSet::None;
    case LearnerKind::Raw:
    case LearnerKind::LM: return FeatureSet::SameSensor;
    default: return FeatureSet::AllSensors;
  }
}

struct LearnerSpec {
  LearnerKind kind = LearnerKind::LM;
  double ridge_lambda = 1.0;
  int knn_k = 5;
  int tree_min_leaf = 5;
  int tree_max_depth = 30;
  int forest_trees = 100;
  int forest_mtry = 0;                  // 0: ceil(p / 3)
  std::vector<LearnerSpec> candidates;  // Ensemble only

  static LearnerSpec of(LearnerKind k) {
    LearnerSpec s;
    s.kind = k;
    return s;
  }
};

/// Mean, LM, MLR, Ridge, KNN, Tree and Forest with their default hyperparameters.
inline std::vector<LearnerSpec> default_candidates(int forest_trees = 100) {
  std::vector<LearnerSpec> out;
  for (auto k : {LearnerKind::Mean, LearnerKind::LM, LearnerKind::MLR, LearnerKind::Ridge, LearnerKind::KNN,
                 LearnerKind::Tree, LearnerKind::Forest}) {
    out.push_back(LearnerSpec::of(k));
  }
  out.back().forest_trees = forest_trees;
  return out;
}

inline LearnerSpec ensemble_of(std::vector<LearnerSpec> candidates) {
  LearnerSpec s = LearnerSpec::of(LearnerKind::Ensemble);
  s.candidates = std::move(candidates);
  return s;
}

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;

  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

using RegressionTree = std::vector<TreeNode>;

struct TrainingMeta {
  std::uint64_t seed = 0;
  int folds = 0;
  double cv_mse = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> candidate_cv_mse;
  bool singular = false;  // least squares fell back to the minimum-norm solution
  std::size_t n_train = 0;
};

struct FittedModel {
  LearnerSpec spec;
  Sensor sensor = Sensor::AP;
  FeatureSet features = FeatureSet::AllSensors;
  std::vector<int> columns;  // feature matrix columns consumed, in order

  double constant = 0.0;          // Mean
  std::vector<double> coef;       // linear: intercept then one per column, original units
  std::vector<double> center;     // KNN standardization
  std::vector<double> scale;
  std::vector<std::vector<double>> train_x;  // KNN, standardized rows
  std::vector<double> train_y;
  std::vector<RegressionTree> trees;  // Tree (one) or Forest
  std::vector<FittedModel> members;   // Ensemble
  std::vector<double> weights;
  TrainingMeta meta;
};

inline std::vector<int> columns_for(FeatureSet f, Sensor s) {
  switch (f) {
    case FeatureSet::None: return {};
    case FeatureSet::SameSensor: return {static_cast<int>(index_of(s))};
    case FeatureSet::AllSensors: {
      std::vector<int> all(kSensorCount);
      std::iota(all.begin(), all.end(), 0);
      return all;
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// CART regression tree

namespace detail {

/// Row-major copy of the selected columns.
struct DenseRows {
  std::size_t n = 0;
  std::size_t p = 0;
  std::vector<double> v;

  double at(std::size_t r, std::size_t c) const { return v[r * p + c]; }
};

inline DenseRows select_rows(const Eigen::MatrixXd& x, const std::vector<int>& cols) {
  DenseRows d;
  d.n = static_cast<std::size_t>(x.rows());
  d.p = cols.size();
  d.v.resize(d.n * d.p);
  for (std::size_t r = 0; r < d.n; ++r) {
    for (std::size_t c = 0; c < d.p; ++c) d.v[r * d.p + c] = x(static_cast<Eigen::Index>(r), cols[c]);
  }
  return d;
}

class TreeBuilder {
 public:
  TreeBuilder(const DenseRows& x, const std::vector<double>& y, int min_leaf, int max_depth, std::size_t mtry,
              SplitMix64* rng)
      : x_(x), y_(y), min_leaf_(static_cast<std::size_t>(std::max(1, min_leaf))), max_depth_(max_depth),
        mtry_(std::min(mtry, x.p)), rng_(rng) {}

  RegressionTree build(std::vector<std::size_t> idx) {
    nodes_.clear();
    grow(idx, 0);
    return std::move(nodes_);
  }

 private:
  int grow(std::vector<std::size_t>& idx, int depth) {
    const int id = static_cast<int>(nodes_.size());
    const std::size_t n = idx.size();
    double mean = 0.0;
    for (auto i : idx) mean += y_[i];
    mean /= static_cast<double>(n);
    nodes_.push_back(TreeNode{-1, 0.0, -1, -1, mean});
    if (depth >= max_depth_ || n < 2 * min_leaf_) return id;

    double parent_sse = 0.0;
    for (auto i : idx) parent_sse += (y_[i] - mean) * (y_[i] - mean);
    if (parent_sse <= 0.0) return id;

    std::vector<std::size_t> feats(x_.p);
    std::iota(feats.begin(), feats.end(), std::size_t{0});
    if (mtry_ < x_.p && rng_ != nullptr) {
      for (std::size_t i = 0; i < mtry_; ++i) {
        const auto j = i + static_cast<std::size_t>(rng_->below(x_.p - i));
        std::swap(feats[i], feats[j]);
      }
      feats.resize(mtry_);
    }

    // Maximize sum_L^2/n_L + sum_R^2/n_R over centered targets (= SSE reduction).
    double best_score = 0.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::size_t> order(idx);
    for (auto f : feats) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double xa = x_.at(a, f), xb = x_.at(b, f);
        return xa < xb || (xa == xb && a < b);
      });
      double left_sum = 0.0;
      double total = 0.0;
      for (auto i : order) total += y_[i] - mean;
      for (std::size_t k = 1; k < n; ++k) {
        left_sum += y_[order[k - 1]] - mean;
        if (k < min_leaf_ || n - k < min_leaf_) continue;
        const double lo = x_.at(order[k - 1], f);
        const double hi = x_.at(order[k], f);
        if (!(lo < hi)) continue;
        const double right_sum = total - left_sum;
        const double score = left_sum * left_sum / static_cast<double>(k) +
                             right_sum * right_sum / static_cast<double>(n - k);
        if (score > best_score) {
          best_score = score;
          best_feature = static_cast<int>(f);
          double mid = lo + (hi - lo) / 2.0;
          if (!(mid < hi)) mid = lo;
          best_threshold = mid;
        }
      }
    }
    if (best_feature < 0 || best_score <= 1e-12 * parent_sse) return id;

    std::vector<std::size_t> left, right;
    for (auto i : idx) {
      (x_.at(i, static_cast<std::size_t>(best_feature)) <= best_threshold ? left : right).push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    nodes_[static_cast<std::size_t>(id)].feature = best_feature;
    nodes_[static_cast<std::size_t>(id)].threshold = best_threshold;
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  const DenseRows& x_;
  const std::vector<double>& y_;
  std::size_t min_leaf_;
  int max_depth_;
  std::size_t mtry_;
  SplitMix64* rng_;
  RegressionTree nodes_;
};

inline double predict_tree(const RegressionTree& t, const DenseRows& x, std::size_t row) {
  std::size_t node = 0;
  while (t[node].feature >= 0) {
    node = static_cast<std::size_t>(x.at(row, static_cast<std::size_t>(t[node].feature)) <= t[node].threshold
                                        ? t[node].left
                                        : t[node].right);
  }
  return t[node].value;
}

}  // namespace detail

/// Random stream behind forest tree `t`: first n draws are its bootstrap sample,
/// the rest pick split features.
inline SplitMix64 forest_tree_rng(std::uint64_t seed, std::size_t t) { return SplitMix64(mix_seed(seed, t + 1, 0xF0F0)); }

inline std::vector<std::size_t> draw_bootstrap(std::size_t n, SplitMix64& rng) {
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
  return idx;
}

inline std::vector<std::size_t> forest_bootstrap(std::size_t n, std::uint64_t seed, std::size_t t) {
  auto rng = forest_tree_rng(seed, t);
  return draw_bootstrap(n, rng);
}

// ---------------------------------------------------------------------------

std::vector<double> predict(const FittedModel& model, const Eigen::MatrixXd& x6);

namespace detail {

inline void require_features(const Eigen::MatrixXd& x6) {
  if (x6.cols() != static_cast<Eigen::Index>(kSensorCount)) {
    throw Error(ErrorCode::FeatureMismatch, fmt::format("expected {} feature columns, got {}", kSensorCount, x6.cols()));
  }
}

/// Least squares on centered columns; the intercept is recovered from the means.
inline void fit_linear(FittedModel& m, const Eigen::MatrixXd& x6, const std::vector<double>& y, double ridge_lambda) {
  const auto n = x6.rows();
  const auto p = static_cast<Eigen::Index>(m.columns.size());
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index c = 0; c < p; ++c) x.col(c) = x6.col(m.columns[static_cast<std::size_t>(c)]);
  const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const double ybar = yv.mean();
  Eigen::MatrixXd xc = x.rowwise() - mu;
  const Eigen::VectorXd yc = yv.array() - ybar;

  Eigen::VectorXd beta(p);
  if (ridge_lambda > 0.0) {
    // Penalize standardized coefficients; map back to original units afterwards.
    Eigen::VectorXd s(p);
    for (Eigen::Index c = 0; c < p; ++c) {
      const double sd = std::sqrt(xc.col(c).squaredNorm() / static_cast<double>(n));
      s(c) = sd > 0.0 ? sd : 1.0;
      xc.col(c) /= s(c);
    }
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += ridge_lambda;
    beta = gram.ldlt().solve(xc.transpose() * yc);
    beta.array() /= s.array();
  } else {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(xc);
    beta = cod.solve(yc);
    m.meta.singular = cod.rank() < p;
  }
  m.coef.assign(static_cast<std::size_t>(p) + 1, 0.0);
  m.coef[0] = ybar - mu.dot(beta);
  for (Eigen::Index c = 0; c < p; ++c) m.coef[static_cast<std::size_t>(c) + 1] = beta(c);
}

}  // namespace detail

/// Fits one base learner. Ensembles are built by super_learner, not here.
inline FittedModel fit_learner(const LearnerSpec& spec, const Eigen::MatrixXd& x6, const std::vector<double>& y,
                               Sensor sensor, std::uint64_t seed = 0) {
  detail::require_features(x6);
  if (static_cast<std::size_t>(x6.rows()) != y.size()) throw Error(ErrorCode::LengthMismatch, "feature/target rows differ");
  if (y.size() < 2) throw Error(ErrorCode::TooFewRows, "need at least two training rows");
  if (!x6.allFinite()) throw Error(ErrorCode::InvalidArgument, "non-finite features");
  if (spec.kind == LearnerKind::Ensemble) throw Error(ErrorCode::InvalidArgument, "fit ensembles with super_learner");

  FittedModel m;
  m.spec = spec;
  m.spec.candidates.clear();
  m.sensor = sensor;
  m.features = feature_set_for(spec.kind);
  m.columns = columns_for(m.features, sensor);
  m.meta.seed = seed;
  m.meta.n_train = y.size();

  switch (spec.kind) {
    case LearnerKind::Raw:
      break;
    case LearnerKind::Mean:
      m.constant = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
      break;
    case LearnerKind::LM:
    case LearnerKind::MLR:
      detail::fit_linear(m, x6, y, 0.0);
      break;
    case LearnerKind::Ridge:
      if (!(spec.ridge_lambda > 0.0)) throw Error(ErrorCode::InvalidArgument, "ridge lambda must be positive");
      detail::fit_linear(m, x6, y, spec.ridge_lambda);
      break;
    case LearnerKind::KNN: {
      if (spec.knn_k < 1) throw Error(ErrorCode::InvalidArgument, "k must be positive");
      const auto rows = detail::select_rows(x6, m.columns);
      m.center.assign(rows.p, 0.0);
      m.scale.assign(rows.p, 1.0);
      for (std::size_t c = 0; c < rows.p; ++c) {
        double s = 0.0, ss = 0.0;
        for (std::size_t r = 0; r < rows.n; ++r) s += rows.at(r, c);
        const double mu = s / static_cast<double>(rows.n);
        for (std::size_t r = 0; r < rows.n; ++r) ss += (rows.at(r, c) - mu) * (rows.at(r, c) - mu);
        const double sd = std::sqrt(ss / static_cast<double>(rows.n));
        m.center[c] = mu;
        m.scale[c] = sd > 0.0 ? sd : 1.0;
      }
      m.train_x.assign(rows.n, std::vector<double>(rows.p));
      for (std::size_t r = 0; r < rows.n; ++r) {
        for (std::size_t c = 0; c < rows.p; ++c) m.train_x[r][c] = (rows.at(r, c) - m.center[c]) / m.scale[c];
      }
      m.train_y = y;
      break;
    }
    case LearnerKind::Tree: {
      const auto rows = detail::select_rows(x6, m.columns);
      std::vector<std::size_t> idx(rows.n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      detail::TreeBuilder b(rows, y, spec.tree_min_leaf, spec.tree_max_depth, rows.p, nullptr);
      m.trees.push_back(b.build(std::move(idx)));
      break;
    }
    case LearnerKind::Forest: {
      if (spec.forest_trees < 1) throw Error(ErrorCode::InvalidArgument, "forest needs at least one tree");
      const auto rows = detail::select_rows(x6, m.columns);
      const std::size_t mtry = spec.forest_mtry > 0 ? static_cast<std::size_t>(spec.forest_mtry)
                                                    : (rows.p + 2) / 3;
      m.trees.reserve(static_cast<std::size_t>(spec.forest_trees));
      for (int t = 0; t < spec.forest_trees; ++t) {
        auto rng = forest_tree_rng(seed, static_cast<std::size_t>(t));
        auto boot = draw_bootstrap(rows.n, rng);
        detail::TreeBuilder b(rows, y, spec.tree_min_leaf, spec.tree_max_depth, mtry, &rng);
        m.trees.push_back(b.build(std::move(boot)));
      }
      break;
    }
    case LearnerKind::Ensemble:
      break;
  }
  return m;
}

inline std::vector<double> predict(const FittedModel& model, const Eigen::MatrixXd& x6) {
  detail::require_features(x6);
  const auto n = static_cast<std::size_t>(x6.rows());
  std::vector<double> out(n, 0.0);
  switch (model.spec.kind) {
    case LearnerKind::Raw:
      for (std::size_t i = 0; i < n; ++i) out[i] = x6(static_cast<Eigen::Index>(i), model.columns.at(0));
      break;
    case LearnerKind::Mean:
      std::fill(out.begin(), out.end(), model.constant);
      break;
    case LearnerKind::LM:
    case LearnerKind::MLR:
    case LearnerKind::Ridge:
      if (model.coef.size() != model.columns.size() + 1) throw Error(ErrorCode::FeatureMismatch, "coefficient count");
      for (std::size_t i = 0; i < n; ++i) {
        double v = model.coef[0];
        for (std::size_t c = 0; c < model.columns.size(); ++c) {
          v += model.coef[c + 1] * x6(static_cast<Eigen::Index>(i), model.columns[c]);
        }
        out[i] = v;
      }
      break;
    case LearnerKind::KNN: {
      const auto rows = detail::select_rows(x6, model.columns);
      const std::size_t k = std::min(static_cast<std::size_t>(model.spec.knn_k), model.train_x.size());
      std::vector<std::pair<double, std::size_t>> dist(model.train_x.size());
      std::vector<double> q(rows.p);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < rows.p; ++c) q[c] = (rows.at(i, c) - model.center[c]) / model.scale[c];
        for (std::size_t r = 0; r < model.train_x.size(); ++r) {
          double d = 0.0;
          for (std::size_t c = 0; c < rows.p; ++c) d += (q[c] - model.train_x[r][c]) * (q[c] - model.train_x[r][c]);
          dist[r] = {d, r};
        }
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += model.train_y[dist[j].second];
        out[i] = s / static_cast<double>(k);
      }
      break;
    }
    case LearnerKind::Tree:
    case LearnerKind::Forest: {
      const auto rows = detail::select_rows(x6, model.columns);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (const auto& t : model.trees) s += detail::predict_tree(t, rows, i);
        out[i] = s / static_cast<double>(model.trees.size());
      }
      break;
    }
    case LearnerKind::Ensemble:
      for (std::size_t j = 0; j < model.members.size(); ++j) {
        const auto p = predict(model.members[j], x6);
        for (std::size_t i = 0; i < n; ++i) out[i] += model.weights[j] * p[i];
      }
      break;
  }
  return out;
}

}  // namespace wxpipe::calibration
