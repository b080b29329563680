#pragma once

// Paired (low-cost, reference) hourly data: the unit of calibration.
//
// CSV: hour_start,lcaws_value,pws_value,cov_ap,cov_at,cov_rh,cov_rg,cov_ws,cov_wd

#include <algorithm>
#include <array>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "wxpipe/error.hpp"
#include "wxpipe/text.hpp"
#include "wxpipe/time.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe {

struct PairedRow {
  Timestamp hour_start{};
  double lcaws = 0.0;
  double pws = 0.0;
  std::array<double, kSensorCount> covariates{};  // all six low-cost parameters of the hour

  friend bool operator==(const PairedRow&, const PairedRow&) = default;
};

struct PairedDataset {
  Sensor sensor = Sensor::AP;
  std::vector<PairedRow> rows;

  std::size_t size() const { return rows.size(); }

  void validate() const {
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].hour_start <= rows[i - 1].hour_start) {
        throw Error(ErrorCode::MalformedRecord, "paired rows must be strictly time ordered (duplicate hour?)");
      }
    }
  }

  PairedDataset subset(std::span<const std::size_t> idx) const {
    PairedDataset out{sensor, {}};
    out.rows.reserve(idx.size());
    for (auto i : idx) out.rows.push_back(rows.at(i));
    return out;
  }

  /// n x 6 matrix of low-cost hourly values, columns in sensor order.
  Eigen::MatrixXd features() const {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(kSensorCount));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < kSensorCount; ++j) {
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i].covariates[j];
      }
    }
    return x;
  }

  std::vector<double> targets() const {
    std::vector<double> y;
    y.reserve(rows.size());
    for (const auto& r : rows) y.push_back(r.pws);
    return y;
  }

  std::vector<double> raw_values() const {
    std::vector<double> x;
    x.reserve(rows.size());
    for (const auto& r : rows) x.push_back(r.lcaws);
    return x;
  }
};

/// Feature matrix of hourly records, same column order as PairedDataset::features.
inline Eigen::MatrixXd features_of(std::span<const HourlyRecord> records) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(kSensorCount));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto v = records[i].values();
    for (std::size_t j = 0; j < kSensorCount; ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
    }
  }
  return x;
}

/// Inner join on hour_start.
inline PairedDataset pair_hourly(Sensor sensor, std::span<const HourlyRecord> lcaws,
                                 std::span<const HourlyRecord> pws) {
  std::map<Timestamp, const HourlyRecord*> ref;
  for (const auto& r : pws) ref[r.hour_start] = &r;
  std::map<Timestamp, PairedRow> joined;
  for (const auto& l : lcaws) {
    const auto it = ref.find(l.hour_start);
    if (it == ref.end()) continue;
    joined[l.hour_start] = PairedRow{l.hour_start, l.value(sensor), it->second->value(sensor), l.values()};
  }
  PairedDataset out{sensor, {}};
  out.rows.reserve(joined.size());
  for (auto& [t, row] : joined) out.rows.push_back(row);
  return out;
}

inline constexpr std::string_view kPairedHeader = "hour_start,lcaws_value,pws_value,cov_ap,cov_at,cov_rh,cov_rg,cov_ws,cov_wd";

inline std::string write_paired_csv(const PairedDataset& d) {
  std::string out(kPairedHeader);
  out += '\n';
  for (const auto& r : d.rows) {
    out += fmt::format("{},{},{}", format_iso8601(r.hour_start), text::fixed(r.lcaws, 4), text::fixed(r.pws, 4));
    for (double c : r.covariates) out += "," + text::fixed(c, 4);
    out += '\n';
  }
  return out;
}

inline PairedDataset read_paired_csv(std::string_view content, Sensor sensor) {
  const auto ls = text::lines(content);
  if (ls.empty() || ls.front() != kPairedHeader) throw Error(ErrorCode::MalformedRecord, "missing paired-dataset header");
  PairedDataset d{sensor, {}};
  for (std::size_t i = 1; i < ls.size(); ++i) {
    if (ls[i].empty()) continue;
    const auto f = text::split(ls[i], ',');
    if (f.size() != 9) throw Error(ErrorCode::MalformedRecord, fmt::format("line {}: expected 9 fields", i + 1));
    PairedRow r;
    r.hour_start = parse_iso8601(f[0]);
    r.lcaws = text::require_double(f[1], "lcaws_value");
    r.pws = text::require_double(f[2], "pws_value");
    for (std::size_t j = 0; j < kSensorCount; ++j) r.covariates[j] = text::require_double(f[3 + j], "covariate");
    d.rows.push_back(r);
  }
  d.validate();
  return d;
}

// Hourly CSV: hour_start,ap_mean,at_mean,rh_mean,rg_sum,ws_mean,wd_mean,n_samples
inline constexpr std::string_view kHourlyHeader = "hour_start,ap_mean,at_mean,rh_mean,rg_sum,ws_mean,wd_mean,n_samples";

inline std::string write_hourly_csv(std::span<const HourlyRecord> records) {
  std::string out(kHourlyHeader);
  out += '\n';
  for (const auto& r : records) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", format_iso8601(r.hour_start), text::fixed(r.ap_mean, 4),
                       text::fixed(r.at_mean, 4), text::fixed(r.rh_mean, 4), text::fixed(r.rg_sum, 4),
                       text::fixed(r.ws_mean, 4), text::fixed(r.wd_mean, 4), r.n_samples);
  }
  return out;
}

inline std::vector<HourlyRecord> read_hourly_csv(std::string_view content) {
  const auto ls = text::lines(content);
  if (ls.empty() || ls.front() != kHourlyHeader) throw Error(ErrorCode::MalformedRecord, "missing hourly header");
  std::vector<HourlyRecord> out;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    if (ls[i].empty()) continue;
    const auto f = text::split(ls[i], ',');
    if (f.size() != 8) throw Error(ErrorCode::MalformedRecord, fmt::format("line {}: expected 8 fields", i + 1));
    HourlyRecord r;
    r.hour_start = parse_iso8601(f[0]);
    r.ap_mean = text::require_double(f[1], "ap_mean");
    r.at_mean = text::require_double(f[2], "at_mean");
    r.rh_mean = text::require_double(f[3], "rh_mean");
    r.rg_sum = text::require_double(f[4], "rg_sum");
    r.ws_mean = text::require_double(f[5], "ws_mean");
    r.wd_mean = text::require_double(f[6], "wd_mean");
    r.n_samples = static_cast<int>(text::require_u64(f[7], "n_samples"));
    out.push_back(r);
  }
  return out;
}

}  // namespace wxpipe
