#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "wxpipe/error.hpp"
#include "wxpipe/time.hpp"

namespace wxpipe {

/// The six weather parameters, in the order they appear in a sample tuple.
enum class Sensor : std::uint8_t { AP = 0, AT, RH, RG, WS, WD };

inline constexpr std::size_t kSensorCount = 6;
inline constexpr std::array<Sensor, kSensorCount> kAllSensors{Sensor::AP, Sensor::AT, Sensor::RH,
                                                              Sensor::RG, Sensor::WS, Sensor::WD};

constexpr std::string_view to_string(Sensor s) {
  constexpr std::array<std::string_view, kSensorCount> names{"AP", "AT", "RH", "RG", "WS", "WD"};
  return names[static_cast<std::size_t>(s)];
}

inline std::optional<Sensor> sensor_from_string(std::string_view name) {
  for (Sensor s : kAllSensors) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

inline Sensor parse_sensor(std::string_view name) {
  if (auto s = sensor_from_string(name)) return *s;
  throw Error(ErrorCode::InvalidArgument, "unknown sensor '" + std::string(name) + "'");
}

constexpr std::size_t index_of(Sensor s) { return static_cast<std::size_t>(s); }

/// One minute of raw datalogger output.
struct RawSample {
  Timestamp t_ts{};
  double ap_raw = 0.0;  // hPa, already filtered
  double at_raw = 0.0;  // degC
  double rh_raw = 0.0;  // %
  std::uint16_t rg_pulses = 0;
  std::uint16_t ws_pulses = 0;
  std::uint8_t wd_adc = 0;
  std::uint64_t uptime_ms = 0;

  friend bool operator==(const RawSample&, const RawSample&) = default;
};

/// Processed weather parameters for one aggregation window.
struct HourlyRecord {
  Timestamp hour_start{};
  double ap_mean = 0.0;
  double at_mean = 0.0;
  double rh_mean = 0.0;
  double rg_sum = 0.0;
  double ws_mean = 0.0;
  double wd_mean = 0.0;
  int n_samples = 0;
  bool calm = false;  // mean wind vector is zero, direction undefined

  double value(Sensor s) const {
    switch (s) {
      case Sensor::AP: return ap_mean;
      case Sensor::AT: return at_mean;
      case Sensor::RH: return rh_mean;
      case Sensor::RG: return rg_sum;
      case Sensor::WS: return ws_mean;
      case Sensor::WD: return wd_mean;
    }
    return 0.0;
  }

  void set_value(Sensor s, double v) {
    switch (s) {
      case Sensor::AP: ap_mean = v; break;
      case Sensor::AT: at_mean = v; break;
      case Sensor::RH: rh_mean = v; break;
      case Sensor::RG: rg_sum = v; break;
      case Sensor::WS: ws_mean = v; break;
      case Sensor::WD: wd_mean = v; break;
    }
  }

  std::array<double, kSensorCount> values() const {
    return {ap_mean, at_mean, rh_mean, rg_sum, ws_mean, wd_mean};
  }

  friend bool operator==(const HourlyRecord&, const HourlyRecord&) = default;
};

}  // namespace wxpipe
