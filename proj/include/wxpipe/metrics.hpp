#pragma once

// Agreement metrics between a low-cost series and its reference, and the paired t-test.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>

#include <fmt/format.h>

#include "wxpipe/error.hpp"

namespace wxpipe::metrics {

namespace detail {

inline void require_same_length(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::LengthMismatch, fmt::format("series lengths differ ({} vs {})", a.size(), b.size()));
  }
}

inline double mean(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

}  // namespace detail

/// Pearson correlation coefficient.
inline double pcc(std::span<const double> x, std::span<const double> y) {
  detail::require_same_length(x, y);
  if (x.size() < 2) throw Error(ErrorCode::LengthMismatch, "need at least two pairs");
  const double mx = detail::mean(x);
  const double my = detail::mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::ConstantSeries, "correlation of a constant series");
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

/// Coefficient of determination of yhat against the truth y. May be negative.
inline double r2(std::span<const double> y, std::span<const double> yhat) {
  detail::require_same_length(y, yhat);
  if (y.size() < 2) throw Error(ErrorCode::LengthMismatch, "need at least two pairs");
  const double my = detail::mean(y);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (my - y[i]) * (my - y[i]);
  }
  if (ss_tot == 0.0) throw Error(ErrorCode::ConstantTruth, "truth series is constant");
  return 1.0 - ss_res / ss_tot;
}

struct ErrorMetrics {
  double mse = 0.0;
  double rmse = 0.0;
};

inline ErrorMetrics mse_rmse(std::span<const double> y, std::span<const double> yhat) {
  detail::require_same_length(y, yhat);
  if (y.empty()) throw Error(ErrorCode::LengthMismatch, "need at least one pair");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  const double mse = s / static_cast<double>(y.size());
  return {mse, std::sqrt(mse)};
}

// ---------------------------------------------------------------------------
// Student's t via the regularized incomplete beta function.

namespace detail {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw Error(ErrorCode::InvalidArgument, fmt::format("incomplete beta did not converge (a={}, b={}, x={})", a, b, x));
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta parameters must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw Error(ErrorCode::InvalidArgument, "x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw Error(ErrorCode::InvalidArgument, "degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  const double x = df / (df + t * t);
  double p = incomplete_beta(df / 2.0, 0.5, x);
  if (p < 1e-300) p = 0.0;
  return std::clamp(p, 0.0, 1.0);
}

/// Student's t CDF.
inline double t_cdf(double t, double df) {
  const double tail = 0.5 * t_two_sided_p(t, df);
  return t >= 0.0 ? 1.0 - tail : tail;
}

struct TTestResult {
  double t_value = 0.0;
  double p_value = 1.0;
  double df = 0.0;
};

/// Two-sided paired t-test on d = a - b with the Bessel-corrected standard deviation.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  detail::require_same_length(a, b);
  const std::size_t n = a.size();
  if (n < 2) throw Error(ErrorCode::LengthMismatch, "paired t-test needs at least two pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double md = detail::mean(d);
  double ss = 0.0;
  for (double v : d) ss += (v - md) * (v - md);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  // Differences that agree to within rounding are treated as constant.
  const double scale = std::max(std::abs(md), std::abs(*std::max_element(d.begin(), d.end(),
                                                     [](double x, double y) { return std::abs(x) < std::abs(y); })));
  if (sd == 0.0 || sd <= 1e-14 * scale) {
    throw Error(ErrorCode::ZeroVariance, "all paired differences are equal");
  }
  TTestResult r;
  r.df = static_cast<double>(n - 1);
  r.t_value = md / (sd / std::sqrt(static_cast<double>(n)));
  r.p_value = t_two_sided_p(r.t_value, r.df);
  return r;
}

/// "**" (p <= 0.001), "*" (<= 0.01), "." (<= 0.05), otherwise empty.
inline std::string_view significance_code(double p) {
  if (std::isnan(p)) return "";
  if (p <= 0.001) return "**";
  if (p <= 0.01) return "*";
  if (p <= 0.05) return ".";
  return "";
}

/// Metrics of a prediction against the truth; undefined entries are NaN.
struct MetricsReport {
  double r2 = std::numeric_limits<double>::quiet_NaN();
  double mse = 0.0;
  double rmse = 0.0;
  double pcc = std::numeric_limits<double>::quiet_NaN();
  double t_value = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
};

/// Report for predictions yhat against truth y. The t-test is on yhat - y.
inline MetricsReport compute_metrics(std::span<const double> y, std::span<const double> yhat) {
  detail::require_same_length(y, yhat);
  MetricsReport m;
  m.n = y.size();
  const auto e = mse_rmse(y, yhat);
  m.mse = e.mse;
  m.rmse = e.rmse;
  try {
    m.r2 = r2(y, yhat);
  } catch (const Error& err) {
    if (err.code() != ErrorCode::ConstantTruth && err.code() != ErrorCode::LengthMismatch) throw;
  }
  try {
    m.pcc = pcc(yhat, y);
  } catch (const Error& err) {
    if (err.code() != ErrorCode::ConstantSeries && err.code() != ErrorCode::LengthMismatch) throw;
  }
  try {
    const auto t = paired_t_test(yhat, y);
    m.t_value = t.t_value;
    m.p_value = t.p_value;
  } catch (const Error& err) {
    if (err.code() != ErrorCode::ZeroVariance && err.code() != ErrorCode::LengthMismatch) throw;
  }
  return m;
}

}  // namespace wxpipe::metrics
