#pragma once

// Raw minute samples -> hourly weather parameters.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "wxpipe/error.hpp"
#include "wxpipe/time.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe::processing {

struct ProcessingConfig {
  int filter_k = 0;
  double mm_per_tip = 0.25;
  double circumference_m = 0.924;
  double ms_per_second = 1000.0;
  double r_ref_ohm = 4700.0;
  int v_max = 255;
  double theta0_deg = 225.0;
  double theta_res_deg = 45.0;
  std::array<double, 8> ladder_ohm{10000, 20000, 30000, 40000, 50000, 60000, 70000, 80000};
  seconds window = hours{1};
  std::uint32_t counter_max = 65535;

  void validate() const {
    if (filter_k < 0 || filter_k > 4) throw Error(ErrorCode::InvalidArgument, "filter_k must be in [0,4]");
    if (!(mm_per_tip > 0.0) || !(circumference_m > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "tip volume and circumference must be positive");
    }
    if (!std::is_sorted(ladder_ohm.begin(), ladder_ohm.end()) ||
        std::adjacent_find(ladder_ohm.begin(), ladder_ohm.end()) != ladder_ohm.end()) {
      throw Error(ErrorCode::InvalidArgument, "ladder must be strictly increasing");
    }
    if (window.count() <= 0) throw Error(ErrorCode::InvalidArgument, "window must be positive");
  }
};

/// Low-pass IIR of the BME280: (prev * (2^k - 1) + x) / 2^k. k = 0 passes x through.
inline double iir_filter(double prev_filtered, double x, int k) {
  if (k < 0 || k > 4) throw Error(ErrorCode::InvalidArgument, "filter_k must be in [0,4]");
  const double coeff = static_cast<double>(1 << k);
  return (prev_filtered * (coeff - 1.0) + x) / coeff;
}

inline double digital_mean(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::EmptyWindow, "no values to average");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

/// Lagged differences of a cumulative counter. A negative step is read as a wrap and
/// x_max (not x_max + 1) is added on wrap, so one count is lost per wrap.
inline std::vector<std::uint32_t> lagged_diff(std::span<const std::uint16_t> series,
                                              std::uint32_t x_max = 65535) {
  if (series.size() < 2) throw Error(ErrorCode::InsufficientCounterSamples, "need at least two counter values");
  std::vector<std::uint32_t> out;
  out.reserve(series.size() - 1);
  for (std::size_t i = 0; i + 1 < series.size(); ++i) {
    const std::int64_t d = static_cast<std::int64_t>(series[i + 1]) - series[i];
    out.push_back(static_cast<std::uint32_t>(d < 0 ? d + x_max : d));
  }
  return out;
}

inline double rain_sum(std::span<const std::uint16_t> counters, double mm_per_tip, std::uint32_t x_max = 65535) {
  const auto d = lagged_diff(counters, x_max);
  const std::uint64_t tips = std::accumulate(d.begin(), d.end(), std::uint64_t{0});
  return static_cast<double>(tips) * mm_per_tip;
}

/// Per-pair wind speed w = C * (d_rev / d_uptime) * s.
inline std::vector<double> wind_speed_series(std::span<const std::uint16_t> rev_counters,
                                             std::span<const std::uint64_t> uptimes_ms, double circumference_m,
                                             double ms_per_second = 1000.0, std::uint32_t x_max = 65535) {
  if (rev_counters.size() != uptimes_ms.size()) throw Error(ErrorCode::LengthMismatch, "counter/uptime length mismatch");
  const auto drev = lagged_diff(rev_counters, x_max);
  std::vector<double> out;
  out.reserve(drev.size());
  for (std::size_t i = 0; i < drev.size(); ++i) {
    if (uptimes_ms[i + 1] <= uptimes_ms[i]) {
      throw Error(ErrorCode::ZeroTimeDelta, fmt::format("uptime did not advance between pair {}", i));
    }
    const double dt = static_cast<double>(uptimes_ms[i + 1] - uptimes_ms[i]);
    out.push_back(circumference_m * (static_cast<double>(drev[i]) / dt) * ms_per_second);
  }
  return out;
}

/// Ladder resistance seen by the divider; nullopt is the spliced position (code 0).
inline std::optional<std::int64_t> vane_resistance(int v, const ProcessingConfig& cfg = {}) {
  if (v < 0 || v > cfg.v_max) throw Error(ErrorCode::InvalidArgument, fmt::format("ADC code {} out of range", v));
  if (v == 0) return std::nullopt;
  return std::llround(cfg.r_ref_ohm * (static_cast<double>(cfg.v_max) / v - 1.0));
}

/// Vane position 1..8 (nearest ladder resistor, ties to the lower one), or 0 when spliced.
inline int vane_position(int v, const ProcessingConfig& cfg = {}) {
  const auto r = vane_resistance(v, cfg);
  if (!r) return 0;
  const double ohm = static_cast<double>(*r);
  if (ohm > 2.0 * cfg.ladder_ohm.back()) {
    throw Error(ErrorCode::ResistanceOutOfRange, fmt::format("code {} reads {} ohm, beyond the ladder", v, *r));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < cfg.ladder_ohm.size(); ++i) {
    if (std::abs(ohm - cfg.ladder_ohm[i]) < std::abs(ohm - cfg.ladder_ohm[best])) best = i;
  }
  return static_cast<int>(best) + 1;
}

inline double vane_angle(int v, const ProcessingConfig& cfg = {}) {
  const int p = vane_position(v, cfg);
  return p == 0 ? cfg.theta0_deg : cfg.theta_res_deg * (p - 1);
}

/// sin/cos of an angle in degrees, exact on multiples of 90.
inline std::pair<double, double> sin_cos_deg(double deg) {
  double d = std::fmod(deg, 360.0);
  if (d < 0) d += 360.0;
  if (d == 0.0) return {0.0, 1.0};
  if (d == 90.0) return {1.0, 0.0};
  if (d == 180.0) return {0.0, -1.0};
  if (d == 270.0) return {-1.0, 0.0};
  const double rad = 2.0 * std::numbers::pi * d / 360.0;
  return {std::sin(rad), std::cos(rad)};
}

struct WindVector {
  double x = 0.0;
  double y = 0.0;
};

/// Mean vector components x = -mean(w sin th), y = -mean(w cos th).
inline WindVector wind_vector_means(std::span<const double> speeds, std::span<const double> dirs_deg) {
  if (speeds.size() != dirs_deg.size()) throw Error(ErrorCode::LengthMismatch, "speed/direction length mismatch");
  if (speeds.empty()) throw Error(ErrorCode::EmptyWindow, "no wind samples");
  double sx = 0.0;
  double sy = 0.0;
  for (std::size_t i = 0; i < speeds.size(); ++i) {
    const auto [s, c] = sin_cos_deg(dirs_deg[i]);
    sx += -speeds[i] * s;
    sy += -speeds[i] * c;
  }
  const double n = static_cast<double>(speeds.size());
  return {sx / n, sy / n};
}

inline double ws_mean(double x, double y) { return std::sqrt(x * x + y * y); }

struct MeanDirection {
  double degrees = 0.0;
  bool calm = false;
};

/// Two-argument arctangent form of the mean direction, normalized to [0, 360).
inline MeanDirection wd_mean(double x, double y) {
  if (x == 0.0 && y == 0.0) return {0.0, true};
  double deg = std::atan2(x, y) * (180.0 / std::numbers::pi) + 180.0;
  deg = std::round(deg * 1e9) / 1e9;  // drop conversion noise so grid directions come back exact
  if (deg >= 360.0) deg -= 360.0;
  if (deg < 0.0) deg += 360.0;
  if (deg >= 360.0) deg = 0.0;  // -tiny + 360 can round up
  return {deg, false};
}

/// Start of the aggregation window containing t.
inline Timestamp window_floor(Timestamp t, seconds window) {
  const auto s = t.time_since_epoch().count();
  const auto w = window.count();
  const auto q = (s >= 0 ? s / w : (s - w + 1) / w);
  return Timestamp{seconds{q * w}};
}

/// Aggregates one window. `predecessor` is the sample just before the window; when given,
/// the counter pair that straddles the boundary is attributed to this window.
inline HourlyRecord summarize_hour(std::span<const RawSample> samples, const ProcessingConfig& cfg = {},
                                   std::optional<RawSample> predecessor = std::nullopt,
                                   std::optional<Timestamp> window_start = std::nullopt) {
  if (samples.empty()) throw Error(ErrorCode::EmptyWindow, "no samples in window");
  HourlyRecord rec;
  rec.hour_start = window_start ? *window_start : window_floor(samples.front().t_ts, cfg.window);
  rec.n_samples = static_cast<int>(samples.size());

  std::vector<double> buf(samples.size());
  auto mean_of = [&](auto field) {
    std::transform(samples.begin(), samples.end(), buf.begin(), field);
    return digital_mean(buf);
  };
  rec.ap_mean = mean_of([](const RawSample& s) { return s.ap_raw; });
  rec.at_mean = mean_of([](const RawSample& s) { return s.at_raw; });
  rec.rh_mean = mean_of([](const RawSample& s) { return s.rh_raw; });

  std::vector<const RawSample*> series;
  series.reserve(samples.size() + 1);
  if (predecessor) series.push_back(&*predecessor);
  for (const auto& s : samples) series.push_back(&s);
  if (series.size() < 2) {
    throw Error(ErrorCode::InsufficientCounterSamples, "counter sensors need at least two samples");
  }

  std::vector<std::uint16_t> rg(series.size()), ws(series.size());
  std::vector<std::uint64_t> up(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    rg[i] = series[i]->rg_pulses;
    ws[i] = series[i]->ws_pulses;
    up[i] = series[i]->uptime_ms;
  }
  rec.rg_sum = rain_sum(rg, cfg.mm_per_tip, cfg.counter_max);

  const auto speeds = wind_speed_series(ws, up, cfg.circumference_m, cfg.ms_per_second, cfg.counter_max);
  std::vector<double> kept_speeds;
  std::vector<double> dirs;
  kept_speeds.reserve(speeds.size());
  dirs.reserve(speeds.size());
  std::optional<Error> vane_fault;
  for (std::size_t i = 0; i < speeds.size(); ++i) {
    // Each speed pairs with the direction read at the pair's later sample.
    try {
      dirs.push_back(vane_angle(series[i + 1]->wd_adc, cfg));
      kept_speeds.push_back(speeds[i]);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ResistanceOutOfRange) throw;
      vane_fault = e;
    }
  }
  if (kept_speeds.empty()) throw *vane_fault;
  const auto v = wind_vector_means(kept_speeds, dirs);
  rec.ws_mean = ws_mean(v.x, v.y);
  const auto dir = wd_mean(v.x, v.y);
  rec.wd_mean = dir.degrees;
  rec.calm = dir.calm;
  return rec;
}

struct ProcessResult {
  std::vector<HourlyRecord> records;
  std::vector<std::string> diagnostics;  // skipped windows and per-window errors
};

/// Walks [from, to) window by window over one station's time-ordered samples.
inline ProcessResult process_samples(std::span<const RawSample> samples, Timestamp from, Timestamp to,
                                     const ProcessingConfig& cfg = {}) {
  cfg.validate();
  if (window_floor(from, cfg.window) != from) {
    throw Error(ErrorCode::InvalidArgument, "range start must be window aligned");
  }
  if (!(from < to)) throw Error(ErrorCode::InvalidArgument, "empty range");
  ProcessResult out;
  const auto by_time = [](const RawSample& s, Timestamp t) { return s.t_ts < t; };
  for (Timestamp t = from; t < to; t += cfg.window) {
    const Timestamp end = std::min(t + cfg.window, to);
    const auto lo = std::lower_bound(samples.begin(), samples.end(), t, by_time);
    const auto hi = std::lower_bound(lo, samples.end(), end, by_time);
    if (lo == hi) {
      out.diagnostics.push_back(fmt::format("{}: no samples, window skipped", format_iso8601(t)));
      continue;
    }
    std::optional<RawSample> pred;
    if (lo != samples.begin() && std::prev(lo)->t_ts >= t - cfg.window) pred = *std::prev(lo);
    try {
      out.records.push_back(summarize_hour(std::span(lo, hi), cfg, pred, t));
    } catch (const Error& e) {
      out.diagnostics.push_back(fmt::format("{}: {}", format_iso8601(t), e.what()));
    }
  }
  return out;
}

/// Store-backed variant; `Store` provides query_range(station, from, to).
template <typename Store>
ProcessResult process_range(const Store& store, const std::string& station, Timestamp from, Timestamp to,
                            const ProcessingConfig& cfg = {}) {
  const auto samples = store.query_range(station, from - cfg.window, to);
  return process_samples(samples, from, to, cfg);
}

}  // namespace wxpipe::processing
