#pragma once

// Glue shared by the CLI and the tests: raw sample files, loopback delivery,
// metric tables and plot data.

#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "wxpipe/batch.hpp"
#include "wxpipe/client.hpp"
#include "wxpipe/dataset.hpp"
#include "wxpipe/metrics.hpp"
#include "wxpipe/server.hpp"
#include "wxpipe/store.hpp"
#include "wxpipe/text.hpp"

namespace wxpipe::pipeline {

inline constexpr std::string_view kRawHeader = "t_ts,ap_raw,at_raw,rh_raw,rg_pulses,ws_pulses,wd_adc,uptime_ms";

inline std::string write_raw_csv(std::span<const RawSample> samples) {
  std::string out = std::string(kRawHeader) + "\n";
  for (const auto& s : samples) {
    out += format_record(s);
    out += '\n';
  }
  return out;
}

inline std::vector<RawSample> read_raw_csv(std::string_view content) {
  const auto ls = text::lines(content);
  if (ls.empty() || ls.front() != kRawHeader) throw Error(ErrorCode::MalformedRecord, "raw sample header missing");
  std::vector<RawSample> out;
  out.reserve(ls.size() - 1);
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto f = text::split(ls[i], ',');
    try {
      out.push_back(parse_record(f));
    } catch (const Error& e) {
      throw Error(e.code(), fmt::format("line {}: {}", i + 1, e.message()));
    }
  }
  return out;
}

struct LoopbackResult {
  client::ClientStats client;
  std::uint64_t stored = 0;
  std::uint64_t duplicates = 0;
  std::size_t left_in_spool = 0;
};

/// Replays `samples` through a datalogger client on a virtual clock into an
/// in-process ingestion server listening on 127.0.0.1.
inline LoopbackResult deliver_over_loopback(std::span<const RawSample> samples, RawStore& store,
                                            const std::filesystem::path& spool_dir, const std::string& station_id,
                                            std::size_t batch_size = 10) {
  if (samples.empty()) throw Error(ErrorCode::EmptyBatch, "no samples to deliver");
  IngestionServer server(store, net::Endpoint{"127.0.0.1", 0});
  server.start();

  client::ClientConfig cfg;
  cfg.batch_size = batch_size;
  cfg.server = net::Endpoint{"127.0.0.1", server.port()};
  cfg.spool_dir = spool_dir;
  cfg.station_id = station_id;
  client::ReplaySensorSource sensors({samples.begin(), samples.end()});
  client::VirtualClock clock(samples.front().t_ts);
  client::TcpTransport transport(cfg.server, cfg.send_timeout);
  client::DataloggerClient dl(cfg, sensors, clock, transport);
  dl.run(samples.size());
  dl.shutdown();
  for (int i = 0; i < 20 && !dl.spool().pending().empty(); ++i) {
    clock.advance(cfg.backoff_max);
    dl.drain();
  }
  LoopbackResult r;
  r.left_in_spool = dl.spool().pending().size();
  server.stop();
  r.client = dl.stats();
  r.stored = server.stats().stored.load();
  r.duplicates = server.stats().duplicates.load();
  return r;
}

// ---------------------------------------------------------------------------
// Tables

inline constexpr std::string_view kMetricsHeader = "sensor,stage,window,n,r2,mse,rmse,pcc,t_value,p_value,signif";

struct MetricsRow {
  Sensor sensor = Sensor::AP;
  std::string stage;   // raw, corrected
  std::string window;  // all, test
  metrics::MetricsReport m;
};

inline std::string num(double v, int digits) { return std::isfinite(v) ? text::fixed(v, digits) : std::string(); }

inline std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", to_string(r.sensor), r.stage, r.window, r.m.n,
                       num(r.m.r2, 4), num(r.m.mse, 4), num(r.m.rmse, 4), num(r.m.pcc, 4), num(r.m.t_value, 4),
                       num(r.m.p_value, 6), metrics::significance_code(r.m.p_value));
  }
  return out;
}

inline nlohmann::json metrics_json(const metrics::MetricsReport& m) {
  const auto j = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"n", m.n},          {"r2", j(m.r2)},           {"mse", j(m.mse)},
          {"rmse", j(m.rmse)}, {"pcc", j(m.pcc)},         {"t_value", j(m.t_value)},
          {"p_value", j(m.p_value)}, {"signif", std::string(metrics::significance_code(m.p_value))}};
}

/// Raw metrics of every requested sensor over the hours both sources share.
inline std::vector<MetricsRow> evaluate_pairs(std::span<const HourlyRecord> lcaws, std::span<const HourlyRecord> pws,
                                              std::span<const Sensor> sensors, std::string stage = "raw",
                                              std::string window = "all") {
  std::vector<MetricsRow> rows;
  for (auto s : sensors) {
    const auto d = pair_hourly(s, lcaws, pws);
    if (d.rows.empty()) throw Error(ErrorCode::MissingInput, "no overlapping hours between the two hourly series");
    rows.push_back({s, stage, window, metrics::compute_metrics(d.targets(), d.raw_values())});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Plot data

struct Source {
  std::string name;
  std::span<const HourlyRecord> records;
};

/// Long format `sensor,hour,source,value`.
inline std::string timeseries_csv(std::span<const Source> sources, std::span<const Sensor> sensors) {
  std::string out = "sensor,hour,source,value\n";
  for (auto s : sensors) {
    for (const auto& src : sources) {
      for (const auto& r : src.records) {
        out += fmt::format("{},{},{},{}\n", to_string(s), format_iso8601(r.hour_start), src.name,
                           text::fixed(r.value(s), 4));
      }
    }
  }
  return out;
}

/// `sensor,lcaws,pws` over paired hours.
inline std::string scatter_csv(std::span<const HourlyRecord> lcaws, std::span<const HourlyRecord> pws,
                               std::span<const Sensor> sensors, std::size_t* rows_written = nullptr) {
  std::string out = "sensor,lcaws,pws\n";
  std::size_t n = 0;
  for (auto s : sensors) {
    const auto d = pair_hourly(s, lcaws, pws);
    for (const auto& r : d.rows) {
      out += fmt::format("{},{},{}\n", to_string(s), text::fixed(r.lcaws, 4), text::fixed(r.pws, 4));
      ++n;
    }
  }
  if (rows_written) *rows_written = n;
  return out;
}

}  // namespace wxpipe::pipeline
