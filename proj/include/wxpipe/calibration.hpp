#pragma once

// Calibration pipeline: split, cross-validate candidates, stack them with NNLS weights,
// evaluate on held-out rows, repeat over seeds and rank.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "wxpipe/dataset.hpp"
#include "wxpipe/error.hpp"
#include "wxpipe/learners.hpp"
#include "wxpipe/metrics.hpp"
#include "wxpipe/nnls.hpp"
#include "wxpipe/random.hpp"
#include "wxpipe/text.hpp"

namespace wxpipe::calibration {

enum class SplitMode { Random, Chronological };

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  friend bool operator==(const Split&, const Split&) = default;
};

inline constexpr std::size_t kMinSplitRows = 5;

inline Split split_dataset(const PairedDataset& data, double train_fraction, SplitMode mode, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "train fraction must lie in (0, 1)");
  }
  const std::size_t n = data.size();
  if (n < kMinSplitRows) throw Error(ErrorCode::TooFewRows, fmt::format("{} rows, need {}", n, kMinSplitRows));
  auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_fraction));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (mode == SplitMode::Random) {
    SplitMix64 rng(mix_seed(seed, 0x5EED5));
    shuffle(order, rng);
  } else {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return data.rows[a].hour_start < data.rows[b].hour_start; });
  }
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

/// Rows whose UTC day lies within the first `train_days` calendar days form the training set.
inline Split split_by_days(const PairedDataset& data, int train_days) {
  if (train_days < 1) throw Error(ErrorCode::InvalidArgument, "train days must be positive");
  if (data.size() < kMinSplitRows) {
    throw Error(ErrorCode::TooFewRows, fmt::format("{} rows, need {}", data.size(), kMinSplitRows));
  }
  auto first = data.rows.front().hour_start;
  for (const auto& r : data.rows) first = std::min(first, r.hour_start);
  const auto cutoff = std::chrono::floor<std::chrono::days>(first) + std::chrono::days(train_days);
  Split s;
  for (std::size_t i = 0; i < data.size(); ++i) (data.rows[i].hour_start < cutoff ? s.train : s.test).push_back(i);
  if (s.train.empty() || s.test.empty()) {
    throw Error(ErrorCode::TooFewRows, fmt::format("a {}-day cut leaves an empty partition", train_days));
  }
  return s;
}

inline std::vector<std::vector<std::size_t>> kfold_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "need at least one fold");
  if (k > n) throw Error(ErrorCode::KExceedsN, fmt::format("{} folds over {} rows", k, n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(mix_seed(seed, 0xF01D5));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

namespace detail {

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline std::vector<double> take(const std::vector<double>& y, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

inline double mse_of(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  return (y - yhat).squaredNorm() / static_cast<double>(y.size());
}

}  // namespace detail

/// Out-of-fold predictions of every candidate (rows x candidates).
inline Eigen::MatrixXd out_of_fold(const std::vector<LearnerSpec>& candidates, const Eigen::MatrixXd& x6,
                                   const std::vector<double>& y, Sensor sensor,
                                   const std::vector<std::vector<std::size_t>>& folds, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(x6.rows());
  Eigen::MatrixXd z(x6.rows(), static_cast<Eigen::Index>(candidates.size()));
  std::vector<char> in_fold(n);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::fill(in_fold.begin(), in_fold.end(), 0);
    for (auto i : folds[f]) in_fold[i] = 1;
    std::vector<std::size_t> train;
    train.reserve(n - folds[f].size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_fold[i]) train.push_back(i);
    }
    const auto xt = detail::take_rows(x6, train);
    const auto yt = detail::take(y, train);
    const auto xv = detail::take_rows(x6, folds[f]);
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      const auto m = fit_learner(candidates[j], xt, yt, sensor, mix_seed(seed, f + 1, j + 1));
      const auto p = predict(m, xv);
      for (std::size_t r = 0; r < folds[f].size(); ++r) {
        z(static_cast<Eigen::Index>(folds[f][r]), static_cast<Eigen::Index>(j)) = p[r];
      }
    }
  }
  return z;
}

/// Stacked ensemble. A single candidate is fitted directly with weight 1.
inline FittedModel super_learner(const Eigen::MatrixXd& x6, const std::vector<double>& y, Sensor sensor,
                                 const std::vector<LearnerSpec>& candidates, std::size_t k, std::uint64_t seed) {
  if (candidates.empty()) throw Error(ErrorCode::InvalidArgument, "no candidate learners");
  if (static_cast<std::size_t>(x6.rows()) != y.size()) throw Error(ErrorCode::LengthMismatch, "feature/target rows differ");

  FittedModel ens;
  ens.spec = ensemble_of(candidates);
  ens.sensor = sensor;
  ens.features = FeatureSet::AllSensors;
  ens.columns = columns_for(ens.features, sensor);
  ens.meta.seed = seed;
  ens.meta.n_train = y.size();

  if (candidates.size() == 1) {
    ens.members.push_back(fit_learner(candidates[0], x6, y, sensor, mix_seed(seed, 0, 1)));
    ens.weights = {1.0};
    return ens;
  }

  const auto folds = kfold_indices(y.size(), k, seed);
  const Eigen::MatrixXd z = out_of_fold(candidates, x6, y, sensor, folds, seed);
  const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));

  std::vector<double> cv(candidates.size());
  std::size_t best = 0;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    cv[j] = detail::mse_of(yv, z.col(static_cast<Eigen::Index>(j)));
    if (cv[j] < cv[best]) best = j;
  }

  Eigen::VectorXd w = nnls(z, yv).x;
  const double total = w.sum();
  double ens_cv = 0.0;
  bool vertex = !(total > 0.0);
  if (!vertex) {
    w /= total;
    ens_cv = detail::mse_of(yv, z * w);
    // Normalizing can cost accuracy; never do worse than the best single candidate.
    vertex = !(ens_cv <= cv[best]);
  }
  if (vertex) {
    w.setZero();
    w(static_cast<Eigen::Index>(best)) = 1.0;
    ens_cv = cv[best];
  }

  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const double wj = w(static_cast<Eigen::Index>(j));
    if (wj <= 0.0) continue;
    ens.members.push_back(fit_learner(candidates[j], x6, y, sensor, mix_seed(seed, 0, j + 1)));
    ens.weights.push_back(wj);
  }
  ens.meta.folds = static_cast<int>(k);
  ens.meta.cv_mse = ens_cv;
  ens.meta.candidate_cv_mse = std::move(cv);
  return ens;
}

inline FittedModel super_learner(const PairedDataset& train, const std::vector<LearnerSpec>& candidates, std::size_t k,
                                 std::uint64_t seed) {
  return super_learner(train.features(), train.targets(), train.sensor, candidates, k, seed);
}

// ---------------------------------------------------------------------------

struct PipelineOptions {
  double train_fraction = 0.6;
  std::size_t folds = 10;
  bool keep_model = true;
};

struct ExperimentOutput {
  std::string label;
  std::uint64_t seed = 0;
  FittedModel model;
  Split split;
  std::vector<double> yhat;
  metrics::MetricsReport metrics;
  metrics::MetricsReport raw_metrics;  // uncorrected low-cost values on the same test rows
};

inline ExperimentOutput evaluate_split(const PairedDataset& data, const std::vector<LearnerSpec>& candidates,
                                       Split split, std::uint64_t seed, const PipelineOptions& opt) {
  const auto train = data.subset(split.train);
  const auto test = data.subset(split.test);
  ExperimentOutput out;
  out.seed = seed;
  out.model = super_learner(train, candidates, std::min(opt.folds, train.size()), seed);
  out.yhat = predict(out.model, test.features());
  const auto y = test.targets();
  out.metrics = metrics::compute_metrics(y, out.yhat);
  out.raw_metrics = metrics::compute_metrics(y, test.raw_values());
  out.split = std::move(split);
  if (!opt.keep_model) out.model = FittedModel{};
  return out;
}

/// One seeded experiment: random split, super learner on train, metrics on test.
inline ExperimentOutput learning_pipeline(const PairedDataset& data, const std::vector<LearnerSpec>& candidates,
                                          std::uint64_t seed, const PipelineOptions& opt = {}) {
  data.validate();
  return evaluate_split(data, candidates, split_dataset(data, opt.train_fraction, SplitMode::Random, seed), seed, opt);
}

/// Chronological experiment: first `train_days` days train, the rest test.
inline ExperimentOutput final_experiment(const PairedDataset& data, const std::vector<LearnerSpec>& candidates,
                                         int train_days, std::uint64_t seed, const PipelineOptions& opt = {}) {
  data.validate();
  return evaluate_split(data, candidates, split_by_days(data, train_days), seed, opt);
}

struct KindCandidates {
  std::string label;
  std::vector<LearnerSpec> candidates;
};

/// The per-kind candidate sets used for ranking: each base learner alone plus the ensemble of all.
inline std::vector<KindCandidates> default_kinds(int forest_trees = 100) {
  std::vector<KindCandidates> out;
  auto base = default_candidates(forest_trees);
  for (const auto& c : base) out.push_back({std::string(to_string(c.kind)), {c}});
  out.push_back({std::string(to_string(LearnerKind::Ensemble)), base});
  return out;
}

struct RunFailure {
  std::string label;
  std::uint64_t seed = 0;
  ErrorCode code = ErrorCode::InvalidArgument;
  std::string message;
};

struct ExperimentSet {
  std::vector<ExperimentOutput> outputs;  // kind-major, seeds in the given order
  std::vector<RunFailure> failures;
};

inline ExperimentSet run_experiments(const PairedDataset& data, const std::vector<KindCandidates>& kinds,
                                     std::span<const std::uint64_t> seeds, PipelineOptions opt = {}) {
  if (seeds.empty()) throw Error(ErrorCode::InvalidArgument, "no seeds");
  data.validate();
  ExperimentSet set;
  for (const auto& kind : kinds) {
    for (auto seed : seeds) {
      try {
        auto o = learning_pipeline(data, kind.candidates, seed, opt);
        o.label = kind.label;
        set.outputs.push_back(std::move(o));
      } catch (const Error& e) {
        set.failures.push_back({kind.label, seed, e.code(), e.what()});
      }
    }
  }
  return set;
}

struct RankRow {
  std::string label;
  int rank = 0;
  std::size_t n = 0;
  double mean_r2 = 0.0;
  double sd_r2 = 0.0;
  double t_value = std::numeric_limits<double>::quiet_NaN();  // top-1 minus this kind, paired on seed
  double p_value = std::numeric_limits<double>::quiet_NaN();
  bool tie = false;
};

inline std::vector<RankRow> rank_models(std::span<const ExperimentOutput> outputs) {
  std::map<std::string, std::map<std::uint64_t, double>> by_kind;
  for (const auto& o : outputs) by_kind[o.label][o.seed] = o.metrics.r2;
  if (by_kind.size() < 2) throw Error(ErrorCode::TooFewRows, "ranking needs at least two kinds");

  std::vector<RankRow> rows;
  for (const auto& [label, runs] : by_kind) {
    if (runs.size() < 2) throw Error(ErrorCode::TooFewRows, fmt::format("kind {} has fewer than two seeds", label));
    RankRow r;
    r.label = label;
    r.n = runs.size();
    for (const auto& [s, v] : runs) r.mean_r2 += v;
    r.mean_r2 /= static_cast<double>(r.n);
    double ss = 0.0;
    for (const auto& [s, v] : runs) ss += (v - r.mean_r2) * (v - r.mean_r2);
    r.sd_r2 = std::sqrt(ss / static_cast<double>(r.n - 1));
    rows.push_back(r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const RankRow& a, const RankRow& b) { return a.mean_r2 > b.mean_r2; });

  const auto& top = by_kind.at(rows.front().label);
  rows.front().rank = 1;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    rows[i].rank = static_cast<int>(i) + 1;
    std::vector<double> a, b;
    for (const auto& [s, v] : by_kind.at(rows[i].label)) {
      const auto it = top.find(s);
      if (it == top.end()) continue;
      a.push_back(it->second);
      b.push_back(v);
    }
    try {
      const auto t = metrics::paired_t_test(a, b);
      rows[i].t_value = t.t_value;
      rows[i].p_value = t.p_value;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ZeroVariance) throw;
      rows[i].t_value = 0.0;
      rows[i].p_value = 1.0;
      rows[i].tie = true;
      rows[i].rank = rows[i - 1].rank;
    }
  }
  return rows;
}

inline constexpr std::string_view kRankingHeader = "model,rank,avg_r2,sd_r2,t_value,p_value,signif";

inline std::string format_ranking_csv(std::span<const RankRow> rows) {
  std::string out = std::string(kRankingHeader) + "\n";
  for (const auto& r : rows) {
    const auto num = [](double v, int d) { return std::isnan(v) ? std::string() : text::fixed(v, d); };
    out += fmt::format("{},{},{},{},{},{},{}\n", r.label, r.rank, num(r.mean_r2, 4), num(r.sd_r2, 4),
                       num(r.t_value, 4), num(r.p_value, 6), r.tie ? "tie" : metrics::significance_code(r.p_value));
  }
  return out;
}

/// Replaces the model's sensor column with predictions, honoring physical bounds.
inline std::vector<HourlyRecord> correct_dataset(const FittedModel& model, std::span<const HourlyRecord> hourly,
                                                 Sensor sensor) {
  if (model.sensor != sensor) {
    throw Error(ErrorCode::FeatureMismatch,
                fmt::format("model is for {}, asked to correct {}", to_string(model.sensor), to_string(sensor)));
  }
  std::vector<HourlyRecord> out(hourly.begin(), hourly.end());
  if (out.empty()) return out;
  const auto yhat = predict(model, features_of(hourly));
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = yhat[i];
    if (sensor == Sensor::WD) {
      v = std::fmod(v, 360.0);
      if (v < 0.0) v += 360.0;
      if (v >= 360.0) v = 0.0;
    } else if (sensor == Sensor::RG || sensor == Sensor::WS) {
      v = std::max(0.0, v);
    }
    out[i].set_value(sensor, v);
  }
  return out;
}

}  // namespace wxpipe::calibration
