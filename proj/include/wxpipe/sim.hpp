#pragma once

// Synthetic minute weather and the inverse sensor models that turn it into the
// counters and ADC codes a low-cost station would log.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wxpipe/error.hpp"
#include "wxpipe/processing.hpp"
#include "wxpipe/random.hpp"
#include "wxpipe/time.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe::sim {

struct WeatherMinute {
  Timestamp t_ts{};
  double ap = 1013.25;     // hPa
  double at = 20.0;        // degC
  double rh = 60.0;        // %
  double rain_rate = 0.0;  // mm/min
  double wind_speed = 0.0; // m/s
  double wind_dir = 0.0;   // degrees in [0, 360)
};

/// Parameters behind a named scenario preset.
struct Scenario {
  std::string_view name;
  double ap_base;          // hPa
  double ap_synoptic_amp;  // hPa
  double at_base;          // degC
  double at_diurnal_amp;   // degC
  double at_synoptic_amp;  // degC
  double rh_base;          // %
  double rh_per_degree;    // RH drop per degree above at_base
  double rain_start_prob;  // per dry minute
  double rain_mean_minutes;
  double rain_mean_rate;   // mm/min during an episode
  double wind_base;        // m/s
  double wind_diurnal_amp; // m/s
  double wind_noise;       // m/s, stationary std of the AR(1) component
  double dir_step_deg;     // random-walk std per minute
};

inline constexpr std::array<Scenario, 4> kScenarios{{
    {"calm", 1015.0, 3.0, 18.0, 4.0, 2.0, 70.0, 3.0, 0.0, 1.0, 0.0, 0.6, 0.3, 0.3, 2.0},
    {"storm", 1002.0, 8.0, 16.0, 3.0, 3.0, 85.0, 2.5, 0.004, 60.0, 0.30, 5.0, 1.5, 2.5, 6.0},
    {"rainy-season", 1012.0, 5.0, 24.0, 6.0, 2.5, 72.0, 3.5, 0.0015, 35.0, 0.06, 2.0, 1.2, 0.8, 3.0},
    {"windy", 1010.0, 6.0, 20.0, 5.0, 2.0, 60.0, 3.0, 0.0003, 20.0, 0.05, 6.0, 2.0, 1.8, 4.0},
}};

inline const Scenario& find_scenario(std::string_view name) {
  for (const auto& s : kScenarios) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::UnknownScenario, "no scenario named '" + std::string(name) + "'");
}

inline std::vector<WeatherMinute> gen_weather(std::uint64_t seed, Timestamp start, std::size_t minutes,
                                              std::string_view scenario) {
  const Scenario& sc = find_scenario(scenario);
  if (minutes < 1) throw Error(ErrorCode::InvalidArgument, "need at least one minute");
  SplitMix64 rng(mix_seed(seed, 0x5EED));

  // Slow "synoptic" variation: a few sinusoids with periods of 2 to 7 days.
  struct Wave {
    double period_min, phase, weight;
  };
  auto make_waves = [&] {
    std::array<Wave, 3> w{};
    for (auto& x : w) {
      x.period_min = (2.0 + 5.0 * rng.uniform()) * 1440.0;
      x.phase = 2.0 * std::numbers::pi * rng.uniform();
      x.weight = 0.5 + 0.5 * rng.uniform();
    }
    return w;
  };
  const auto ap_waves = make_waves();
  const auto at_waves = make_waves();
  const auto rh_waves = make_waves();
  auto synoptic = [](const std::array<Wave, 3>& w, double m) {
    double s = 0.0, norm = 0.0;
    for (const auto& x : w) {
      s += x.weight * std::sin(2.0 * std::numbers::pi * m / x.period_min + x.phase);
      norm += x.weight;
    }
    return s / norm * 1.6;
  };

  const double wind_rho = std::exp(-1.0 / 90.0);  // ~1.5 h decorrelation
  const double wind_innov = sc.wind_noise * std::sqrt(1.0 - wind_rho * wind_rho);
  const double at_rho = std::exp(-1.0 / 240.0);
  double wind_ar = sc.wind_noise * rng.gaussian();
  double at_ar = 0.0;
  double dir = 360.0 * rng.uniform();
  bool raining = false;
  double episode_rate = 0.0;
  double rain_memory = 0.0;  // decays after rain, keeps humidity up

  std::vector<WeatherMinute> out;
  out.reserve(minutes);
  for (std::size_t m = 0; m < minutes; ++m) {
    WeatherMinute w;
    w.t_ts = start + std::chrono::minutes{static_cast<long>(m)};
    const auto tod = std::chrono::duration_cast<std::chrono::minutes>(w.t_ts - floor<std::chrono::days>(w.t_ts)).count();
    const double hour = static_cast<double>(tod) / 60.0;
    const double md = static_cast<double>(m);

    // Rain episodes: a two-state chain, geometric durations.
    if (raining) {
      if (rng.uniform() < 1.0 / sc.rain_mean_minutes) raining = false;
    } else if (sc.rain_start_prob > 0.0 && rng.uniform() < sc.rain_start_prob) {
      raining = true;
      episode_rate = rng.exponential(sc.rain_mean_rate);
    }
    w.rain_rate = raining ? episode_rate * std::exp(0.5 * rng.gaussian() - 0.125) : 0.0;
    rain_memory = rain_memory * std::exp(-1.0 / 120.0) + (raining ? 1.0 / 120.0 * 60.0 : 0.0);

    at_ar = at_rho * at_ar + 0.15 * rng.gaussian();
    const double diurnal = std::sin(2.0 * std::numbers::pi * (hour - 9.0) / 24.0);
    w.at = sc.at_base + sc.at_diurnal_amp * diurnal + sc.at_synoptic_amp * synoptic(at_waves, md) + at_ar -
           std::min(rain_memory, 1.0) * 2.0;
    w.ap = sc.ap_base + sc.ap_synoptic_amp * synoptic(ap_waves, md) +
           0.8 * std::sin(4.0 * std::numbers::pi * (hour - 10.0) / 24.0) + 0.05 * rng.gaussian();
    w.rh = std::clamp(sc.rh_base - sc.rh_per_degree * (w.at - sc.at_base) + 4.0 * synoptic(rh_waves, md) +
                          std::min(rain_memory, 1.0) * 20.0 + 0.5 * rng.gaussian(),
                      5.0, 100.0);

    wind_ar = wind_rho * wind_ar + wind_innov * rng.gaussian();
    const double wind_diurnal = std::sin(2.0 * std::numbers::pi * (hour - 10.0) / 24.0);
    w.wind_speed = std::max(0.0, sc.wind_base + sc.wind_diurnal_amp * wind_diurnal + wind_ar +
                                     (raining ? 0.5 * sc.wind_noise : 0.0));

    dir += sc.dir_step_deg * rng.gaussian();
    if (rng.uniform() < 1.0 / 720.0) dir += 180.0 * rng.gaussian();
    dir = std::fmod(dir, 360.0);
    if (dir < 0.0) dir += 360.0;
    if (dir >= 360.0) dir = 0.0;
    w.wind_dir = dir;
    out.push_back(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transducers

/// Tipping bucket with residual water carried between minutes.
class RainGauge {
 public:
  RainGauge(double mm_per_tip, std::uint16_t counter0) : mm_per_tip_(mm_per_tip), counter_(counter0) {
    if (!(mm_per_tip > 0.0)) throw Error(ErrorCode::InvalidArgument, "tip volume must be positive");
  }

  std::uint16_t step(double rain_mm) {
    residual_ += std::max(0.0, rain_mm);
    // Small slack so accumulated binary fractions (0.1 + 0.2 ...) still tip on time.
    const auto tips = static_cast<std::uint64_t>(std::floor(residual_ / mm_per_tip_ + 1e-9));
    residual_ = std::max(0.0, residual_ - static_cast<double>(tips) * mm_per_tip_);
    counter_ = static_cast<std::uint16_t>((counter_ + tips) & 0xFFFF);
    return counter_;
  }

  double residual() const { return residual_; }

 private:
  double mm_per_tip_;
  double residual_ = 0.0;
  std::uint16_t counter_;
};

inline std::vector<std::uint16_t> transduce_rain(std::span<const WeatherMinute> truth, double mm_per_tip,
                                                 std::uint16_t counter0) {
  RainGauge gauge(mm_per_tip, counter0);
  std::vector<std::uint16_t> out;
  out.reserve(truth.size());
  for (const auto& w : truth) out.push_back(gauge.step(w.rain_rate));
  return out;
}

struct AnemometerReading {
  std::uint16_t counter = 0;
  std::uint64_t uptime_ms = 0;
};

/// One minute of cup rotation: counter += round(60 * w / C), uptime += 60 s.
inline AnemometerReading transduce_wind(const WeatherMinute& truth, double circumference_m, std::uint16_t counter0,
                                        std::uint64_t uptime0) {
  if (!(circumference_m > 0.0)) throw Error(ErrorCode::InvalidArgument, "circumference must be positive");
  const auto revs = static_cast<std::uint64_t>(std::llround(60.0 * std::max(0.0, truth.wind_speed) / circumference_m));
  return {static_cast<std::uint16_t>((counter0 + revs) & 0xFFFF), uptime0 + 60000};
}

/// Nearest cardinal index 0..7 (ties go to the higher angle).
inline int cardinal_index(double wind_dir_deg) {
  double d = std::fmod(wind_dir_deg, 360.0);
  if (d < 0) d += 360.0;
  return static_cast<int>(std::floor((d + 22.5) / 45.0)) % 8;
}

/// Ideal 8-bit divider code for the vane, truncated the way the ADC truncates.
inline std::uint8_t transduce_vane(double wind_dir_deg, const processing::ProcessingConfig& cfg = {}) {
  const double r_p = cfg.ladder_ohm[static_cast<std::size_t>(cardinal_index(wind_dir_deg))];
  return static_cast<std::uint8_t>(std::floor(cfg.v_max * cfg.r_ref_ohm / (cfg.r_ref_ohm + r_p)));
}

struct SensorDistortion {
  double gain = 1.0;
  double offset = 0.0;
  double noise_sigma = 0.0;
};

/// Per-sensor affine distortion plus Gaussian noise. For RG only the gain is used
/// (catch efficiency); WD gets offset and noise as a vane misalignment.
struct DistortionProfile {
  std::array<SensorDistortion, kSensorCount> sensors{};
  std::uint64_t seed = 0;

  SensorDistortion& operator[](Sensor s) { return sensors[index_of(s)]; }
  const SensorDistortion& operator[](Sensor s) const { return sensors[index_of(s)]; }

  void validate() const {
    for (const auto& d : sensors) {
      if (!(d.noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise sigma must be non-negative");
    }
  }

  static DistortionProfile identity() { return {}; }

  /// Rough low-cost-station behaviour, sized so raw errors resemble a field comparison.
  static DistortionProfile lcaws_default(std::uint64_t seed = 1) {
    DistortionProfile p;
    p.seed = seed;
    p[Sensor::AP] = {1.0, 0.45, 0.3};
    p[Sensor::AT] = {1.07, -1.0, 0.6};
    p[Sensor::RH] = {0.93, 1.5, 3.0};
    p[Sensor::RG] = {0.85, 0.0, 0.0};
    p[Sensor::WS] = {0.55, 0.0, 0.3};
    p[Sensor::WD] = {1.0, 0.0, 0.0};
    return p;
  }
};

struct DigitalReading {
  double ap = 0.0;
  double at = 0.0;
  double rh = 0.0;
};

inline std::int64_t minute_index(Timestamp t) {
  return std::chrono::duration_cast<std::chrono::minutes>(t.time_since_epoch()).count();
}

/// Noise for (profile seed, minute, sensor): a pure function of its inputs.
inline double distortion_noise(const DistortionProfile& p, Sensor s, Timestamp t) {
  const auto& d = p[s];
  if (d.noise_sigma == 0.0) return 0.0;
  SplitMix64 rng(mix_seed(p.seed, static_cast<std::uint64_t>(minute_index(t)), index_of(s) + 1));
  return d.noise_sigma * rng.gaussian();
}

inline double distort(const DistortionProfile& p, Sensor s, double x, Timestamp t) {
  const auto& d = p[s];
  if (d.gain == 1.0 && d.offset == 0.0 && d.noise_sigma == 0.0) return x;
  return d.gain * x + d.offset + distortion_noise(p, s, t);
}

inline DigitalReading transduce_digital(const WeatherMinute& truth, const DistortionProfile& profile) {
  profile.validate();
  return {std::max(0.0, distort(profile, Sensor::AP, truth.ap, truth.t_ts)),
          distort(profile, Sensor::AT, truth.at, truth.t_ts),
          std::clamp(distort(profile, Sensor::RH, truth.rh, truth.t_ts), 0.0, 100.0)};
}

struct StationModel {
  double mm_per_tip = 0.25;
  double circumference_m = 0.924;
  std::uint16_t rain_counter0 = 0;
  std::uint16_t wind_counter0 = 0;
  std::uint64_t uptime0_ms = 0;
  int filter_k = 0;
};

/// Raw samples a station would log for `truth`, one per minute.
inline std::vector<RawSample> simulate_station(std::span<const WeatherMinute> truth, const DistortionProfile& profile,
                                               const StationModel& model = {}) {
  profile.validate();
  const processing::ProcessingConfig vane_cfg{};
  RainGauge gauge(model.mm_per_tip, model.rain_counter0);
  AnemometerReading wind{model.wind_counter0, model.uptime0_ms};
  std::vector<RawSample> out;
  out.reserve(truth.size());
  double ap_f = 0.0, at_f = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& w = truth[i];
    const auto d = transduce_digital(w, profile);
    // BME280 IIR on pressure and temperature only; humidity is unfiltered.
    ap_f = i == 0 ? d.ap : processing::iir_filter(ap_f, d.ap, model.filter_k);
    at_f = i == 0 ? d.at : processing::iir_filter(at_f, d.at, model.filter_k);

    WeatherMinute seen = w;
    seen.wind_speed = std::max(0.0, distort(profile, Sensor::WS, w.wind_speed, w.t_ts));
    wind = transduce_wind(seen, model.circumference_m, wind.counter, wind.uptime_ms);
    double dir = w.wind_dir + profile[Sensor::WD].offset + distortion_noise(profile, Sensor::WD, w.t_ts);

    RawSample s;
    s.t_ts = w.t_ts;
    s.ap_raw = ap_f;
    s.at_raw = at_f;
    s.rh_raw = d.rh;
    s.rg_pulses = gauge.step(std::max(0.0, profile[Sensor::RG].gain * w.rain_rate));
    s.ws_pulses = wind.counter;
    s.wd_adc = transduce_vane(dir, vane_cfg);
    s.uptime_ms = wind.uptime_ms;
    out.push_back(s);
  }
  return out;
}

/// Undistorted hourly truth, aggregated with the same semantics as processing.
inline std::vector<HourlyRecord> emit_reference_hourly(std::span<const WeatherMinute> truth) {
  if (truth.empty() || !is_hour_aligned(truth.front().t_ts) || truth.size() % 60 != 0) {
    throw Error(ErrorCode::PartialHour, "reference input must cover whole hours");
  }
  std::vector<HourlyRecord> out;
  out.reserve(truth.size() / 60);
  std::vector<double> ap(60), at(60), rh(60), ws(60), wd(60);
  for (std::size_t h = 0; h < truth.size() / 60; ++h) {
    const auto hour = truth.subspan(h * 60, 60);
    const Timestamp start = truth.front().t_ts + hours{static_cast<long>(h)};
    double rain = 0.0;
    for (std::size_t i = 0; i < 60; ++i) {
      if (hour[i].t_ts != start + minutes{static_cast<long>(i)}) {
        throw Error(ErrorCode::PartialHour, "reference minutes are not contiguous at " + format_iso8601(hour[i].t_ts));
      }
      ap[i] = hour[i].ap;
      at[i] = hour[i].at;
      rh[i] = hour[i].rh;
      ws[i] = hour[i].wind_speed;
      wd[i] = hour[i].wind_dir;
      rain += hour[i].rain_rate;
    }
    HourlyRecord r;
    r.hour_start = start;
    r.ap_mean = processing::digital_mean(ap);
    r.at_mean = processing::digital_mean(at);
    r.rh_mean = processing::digital_mean(rh);
    r.rg_sum = rain;
    const auto v = processing::wind_vector_means(ws, wd);
    r.ws_mean = processing::ws_mean(v.x, v.y);
    const auto dir = processing::wd_mean(v.x, v.y);
    r.wd_mean = dir.degrees;
    r.calm = dir.calm;
    r.n_samples = 60;
    out.push_back(r);
  }
  return out;
}

}  // namespace wxpipe::sim
