// wxpipe: simulate, acquire, ingest, process, evaluate and calibrate weather station data.

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "wxpipe/calibration.hpp"
#include "wxpipe/client.hpp"
#include "wxpipe/dataset.hpp"
#include "wxpipe/metrics.hpp"
#include "wxpipe/model_io.hpp"
#include "wxpipe/pipeline.hpp"
#include "wxpipe/processing.hpp"
#include "wxpipe/server.hpp"
#include "wxpipe/sim.hpp"
#include "wxpipe/store.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wxpipe;

namespace {

constexpr std::string_view kVersion = "0.1.0";

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitInternal = 4;

volatile std::sig_atomic_t g_stop = 0;
extern "C" void on_signal(int) { g_stop = 1; }

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

void write_output(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  text::write_file(path.string(), content);
}

std::vector<Sensor> parse_sensor_list(const std::string& s) {
  std::vector<Sensor> out;
  for (auto part : text::split(s, ',')) {
    if (!part.empty()) out.push_back(parse_sensor(part));
  }
  if (out.empty()) throw Error(ErrorCode::InvalidArgument, "empty sensor list");
  return out;
}

/// Manifest with enough information to rerun the command that wrote `outputs`.
struct Manifest {
  std::string subcommand;
  std::vector<std::string> argv;
  json flags = json::object();
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  void capture(const CLI::App& sub) {
    subcommand = sub.get_name();
    for (const auto* opt : sub.get_options()) {
      if (opt->get_name() == "--help" || opt->count() == 0) continue;
      flags[opt->get_name()] = opt->results();
    }
  }

  void write(const fs::path& path) const {
    const json j{{"tool", "wxpipe"},
                 {"version", kVersion},
                 {"subcommand", subcommand},
                 {"argv", argv},
                 {"flags", flags},
                 {"seeds", seeds},
                 {"inputs", inputs},
                 {"outputs", outputs},
                 {"started_at", format_iso8601(std::chrono::floor<seconds>(std::chrono::system_clock::now()))}};
    write_output(path, j.dump(2) + "\n");
  }
};

fs::path manifest_beside(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

std::vector<HourlyRecord> load_hourly(const std::string& path) { return read_hourly_csv(text::read_file(path)); }

template <typename F>
auto stage(std::string_view name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("stage {}: {}", name, e.message()));
  }
}

sim::DistortionProfile distortion_by_name(const std::string& name, std::uint64_t seed) {
  if (name == "default") return sim::DistortionProfile::lcaws_default(seed);
  if (name == "identity") return sim::DistortionProfile::identity();
  throw Error(ErrorCode::InvalidArgument, "distortion profile must be 'default' or 'identity'");
}

sim::StationModel station_model_for(std::uint64_t seed) {
  // Counters start somewhere arbitrary so wraparound shows up early.
  SplitMix64 rng(mix_seed(seed, 0xC0DE));
  sim::StationModel m;
  m.rain_counter0 = static_cast<std::uint16_t>(rng.below(65536));
  m.wind_counter0 = static_cast<std::uint16_t>(rng.below(65536));
  m.uptime0_ms = 1000 + rng.below(1000000);
  return m;
}

/// Raw samples from one minute before `start` (so the first hour has a counter predecessor)
/// through `days` days, plus the matching reference hours.
struct Simulated {
  std::vector<RawSample> raw;
  std::vector<HourlyRecord> reference;
};

Simulated simulate(const std::string& scenario, std::uint64_t seed, int days, Timestamp start,
                   const std::string& distortion) {
  if (days < 1) throw Error(ErrorCode::InvalidArgument, "days must be positive");
  if (!is_hour_aligned(start)) throw Error(ErrorCode::InvalidArgument, "start must be hour aligned");
  const auto minutes_total = static_cast<std::size_t>(days) * 1440;
  const auto truth = sim::gen_weather(seed, start - minutes{1}, minutes_total + 1, scenario);
  Simulated out;
  out.raw = sim::simulate_station(truth, distortion_by_name(distortion, seed), station_model_for(seed));
  out.reference = sim::emit_reference_hourly(std::span(truth).subspan(1));
  return out;
}

std::vector<std::uint64_t> seed_range(std::uint64_t first, std::size_t count) {
  std::vector<std::uint64_t> s(count);
  std::iota(s.begin(), s.end(), first);
  return s;
}

calibration::LearnerSpec model_by_name(const std::string& name, int forest_trees) {
  auto cands = calibration::default_candidates(forest_trees);
  if (name == "best" || name == "Ensemble" || name == "EL") return calibration::ensemble_of(cands);
  auto spec = calibration::LearnerSpec::of(calibration::parse_learner_kind(name));
  spec.forest_trees = forest_trees;
  return spec;
}

std::vector<calibration::KindCandidates> kinds_by_names(const std::string& names, int forest_trees) {
  auto all = calibration::default_kinds(forest_trees);
  if (names.empty() || names == "all") return all;
  std::vector<calibration::KindCandidates> out;
  for (auto part : text::split(names, ',')) {
    const auto kind = calibration::parse_learner_kind(part);
    const auto it = std::find_if(all.begin(), all.end(),
                                 [&](const auto& k) { return k.label == calibration::to_string(kind); });
    if (it == all.end()) throw Error(ErrorCode::InvalidArgument, fmt::format("kind {} cannot be ranked", part));
    out.push_back(*it);
  }
  return out;
}

std::string ranking_runs_csv(const calibration::ExperimentSet& set) {
  std::string out = "model,seed,n_train,n_test,r2,mse,rmse,raw_r2\n";
  for (const auto& o : set.outputs) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", o.label, o.seed, o.split.train.size(), o.split.test.size(),
                       pipeline::num(o.metrics.r2, 6), pipeline::num(o.metrics.mse, 6),
                       pipeline::num(o.metrics.rmse, 6), pipeline::num(o.raw_metrics.r2, 6));
  }
  for (const auto& f : set.failures) {
    out += fmt::format("{},{},,,,,,# {}: {}\n", f.label, f.seed, to_string(f.code), f.message);
  }
  return out;
}

/// `hour_start,split,lcaws_value,corrected_value,pws_value` for a chronological experiment.
std::string final_rows_csv(const PairedDataset& data, const calibration::ExperimentOutput& o,
                           const calibration::FittedModel& model) {
  const auto yhat = calibration::predict(model, data.features());
  std::vector<char> is_test(data.size(), 0);
  for (auto i : o.split.test) is_test[i] = 1;
  std::string out = "hour_start,split,lcaws_value,corrected_value,pws_value\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data.rows[i];
    out += fmt::format("{},{},{},{},{}\n", format_iso8601(r.hour_start), is_test[i] ? "test" : "train",
                       text::fixed(r.lcaws, 4), text::fixed(yhat[i], 4), text::fixed(r.pws, 4));
  }
  return out;
}

// ---------------------------------------------------------------------------

int run(std::vector<std::string> args);

int cmd_simulate(const CLI::App& sub, const std::string& scenario, std::uint64_t seed, int days,
                 const std::string& start, const std::string& distortion, const std::string& raw_out,
                 const std::string& ref_out, const std::vector<std::string>& argv) {
  const auto sim_out = simulate(scenario, seed, days, parse_iso8601(start), distortion);
  write_output(raw_out, pipeline::write_raw_csv(sim_out.raw));
  Manifest m;
  m.capture(sub);
  m.argv = argv;
  m.seeds = {seed};
  m.outputs = {raw_out};
  if (!ref_out.empty()) {
    write_output(ref_out, write_hourly_csv(sim_out.reference));
    m.outputs.push_back(ref_out);
  }
  m.write(manifest_beside(raw_out));
  std::cerr << fmt::format("simulate: {} raw samples, {} reference hours\n", sim_out.raw.size(),
                           sim_out.reference.size());
  return kExitOk;
}

/// System clock shifted so a recorded trace plays back in real time.
class OffsetClock final : public client::Clock {
 public:
  explicit OffsetClock(Timestamp trace_start)
      : trace_start_(trace_start), wall_start_(std::chrono::floor<seconds>(std::chrono::system_clock::now())) {}
  Timestamp now() override {
    return trace_start_ + (std::chrono::floor<seconds>(std::chrono::system_clock::now()) - wall_start_);
  }
  void standby_until(Timestamp t) override {
    while (!g_stop && now() < t) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  }

 private:
  Timestamp trace_start_;
  Timestamp wall_start_;
};

seconds parse_period(const std::string& s) {
  std::string_view v(s);
  std::int64_t unit = 1;
  if (v.ends_with("ms")) throw Error(ErrorCode::InvalidArgument, "period must be whole seconds");
  if (v.ends_with("s")) {
    v.remove_suffix(1);
  } else if (v.ends_with("m")) {
    v.remove_suffix(1);
    unit = 60;
  }
  const auto n = text::to_u64(v);
  if (!n || *n == 0) throw Error(ErrorCode::InvalidArgument, "bad period '" + s + "'");
  return seconds{static_cast<std::int64_t>(*n) * unit};
}

struct StationArgs {
  std::string raw;
  std::string scenario;
  std::uint64_t seed = 1;
  std::size_t minutes = 1440;
  std::string start = "2024-03-01T00:00:00Z";
  std::string server = "127.0.0.1:7700";
  std::string station_id = "LCAWS01";
  std::string spool;
  std::size_t batch_size = 10;
  std::string period = "60s";
  bool accel = false;
};

int cmd_station(const StationArgs& a) {
  std::vector<RawSample> samples;
  if (!a.raw.empty()) {
    samples = pipeline::read_raw_csv(text::read_file(a.raw));
  } else if (!a.scenario.empty()) {
    const auto truth = sim::gen_weather(a.seed, parse_iso8601(a.start), a.minutes, a.scenario);
    samples = sim::simulate_station(truth, sim::DistortionProfile::lcaws_default(a.seed), station_model_for(a.seed));
  } else {
    throw Error(ErrorCode::InvalidArgument, "pass --raw FILE or --sim-scenario NAME");
  }
  if (samples.empty()) throw Error(ErrorCode::MissingInput, "no samples to send");
  client::ClientConfig cfg;
  cfg.server = net::parse_endpoint(a.server);
  cfg.station_id = a.station_id;
  cfg.spool_dir = a.spool;
  cfg.batch_size = a.batch_size;
  cfg.period = parse_period(a.period);
  if (cfg.period != minutes{1}) throw Error(ErrorCode::InvalidArgument, "sample playback runs at one sample per minute");
  const bool realtime = !a.accel;
  const auto n = samples.size();
  const auto start = samples.front().t_ts;
  client::ReplaySensorSource sensors(std::move(samples));
  client::TcpTransport transport(cfg.server, cfg.send_timeout);
  std::unique_ptr<client::Clock> clock;
  client::VirtualClock* virtual_clock = nullptr;
  if (realtime) {
    clock = std::make_unique<OffsetClock>(start);
  } else {
    auto vc = std::make_unique<client::VirtualClock>(start);
    virtual_clock = vc.get();
    clock = std::move(vc);
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  client::DataloggerClient dl(cfg, sensors, *clock, transport);
  dl.run(n, [] { return g_stop != 0; });
  dl.shutdown();
  for (int i = 0; i < 20 && virtual_clock && !dl.spool().pending().empty(); ++i) {
    virtual_clock->advance(cfg.backoff_max);
    dl.drain();
  }
  const auto& st = dl.stats();
  std::cerr << fmt::format("station: {} samples, {} batches written, {} delivered, {} failed attempts, {} pending\n",
                           st.samples, st.batches_written, st.delivered, st.attempts_failed,
                           dl.spool().pending().size());
  return kExitOk;
}

int cmd_server(const std::string& listen, const std::string& store_dir) {
  RawStore store(store_dir);
  if (store.truncated_bytes() > 0) {
    std::cerr << fmt::format("server: dropped {} bytes of torn tail from {}\n", store.truncated_bytes(),
                             store.log_path().string());
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  serve(net::parse_endpoint(listen), store, [] { return g_stop != 0; }, [&](std::uint16_t port) {
    std::cout << fmt::format("listening on port {}\n", port) << std::flush;
  });
  std::cerr << fmt::format("server: {} batches, {} rows stored\n", store.batch_count(), store.row_count());
  return kExitOk;
}

struct ProcessArgs {
  std::string store;
  std::string raw;
  std::string station;
  std::string from;
  std::string to;
  std::string out;
};

std::vector<HourlyRecord> process_input(const ProcessArgs& a, std::vector<std::string>& diagnostics) {
  std::vector<RawSample> samples;
  if (!a.raw.empty()) {
    samples = pipeline::read_raw_csv(text::read_file(a.raw));
    std::sort(samples.begin(), samples.end(), [](const auto& x, const auto& y) { return x.t_ts < y.t_ts; });
  } else {
    if (!fs::exists(fs::path(a.store) / "raw.log")) throw Error(ErrorCode::MissingInput, "no raw.log in " + a.store);
    RawStore store(a.store);
    auto station = a.station;
    if (station.empty()) {
      const auto all = store.stations();
      if (all.size() != 1) throw Error(ErrorCode::InvalidArgument, "store holds several stations; pass --station");
      station = all.front();
    }
    samples = store.all_samples(station);
  }
  if (samples.empty()) throw Error(ErrorCode::MissingInput, "no samples");
  // The first sample only primes the counters when it sits just before an hour boundary.
  Timestamp from = a.from.empty() ? floor_hour(samples.front().t_ts) : parse_iso8601(a.from);
  if (a.from.empty() && samples.size() > 1 && floor_hour(samples[1].t_ts) != from) from = floor_hour(samples[1].t_ts);
  const Timestamp to = a.to.empty() ? floor_hour(samples.back().t_ts) + hours{1} : parse_iso8601(a.to);
  auto r = processing::process_samples(samples, from, to);
  diagnostics = std::move(r.diagnostics);
  return std::move(r.records);
}

int cmd_process(const CLI::App& sub, const ProcessArgs& a, const std::vector<std::string>& argv) {
  std::vector<std::string> diagnostics;
  const auto records = process_input(a, diagnostics);
  for (const auto& d : diagnostics) std::cerr << "process: " << d << "\n";
  write_output(a.out, write_hourly_csv(records));
  Manifest m;
  m.capture(sub);
  m.argv = argv;
  m.inputs = {a.raw.empty() ? a.store : a.raw};
  m.outputs = {a.out};
  m.write(manifest_beside(a.out));
  std::cerr << fmt::format("process: {} hourly records\n", records.size());
  return kExitOk;
}

std::vector<HourlyRecord> in_range(std::vector<HourlyRecord> r, const std::string& from, const std::string& to) {
  if (!from.empty()) {
    const auto t = parse_iso8601(from);
    std::erase_if(r, [&](const auto& x) { return x.hour_start < t; });
  }
  if (!to.empty()) {
    const auto t = parse_iso8601(to);
    std::erase_if(r, [&](const auto& x) { return x.hour_start >= t; });
  }
  return r;
}

struct EvaluateArgs {
  std::string lcaws;
  std::string pws;
  std::string pairs;
  std::string sensor;
  std::string sensors = "AP,AT,RH,RG,WS,WD";
  std::string from;
  std::string to;
  std::string pairs_dir;
  std::string out;
};

/// Sensor named by a `paired_<SENSOR>.csv` file name.
std::optional<Sensor> sensor_from_filename(const std::string& path) {
  const auto stem = fs::path(path).stem().string();
  const auto us = stem.rfind('_');
  return us == std::string::npos ? std::nullopt : sensor_from_string(std::string_view(stem).substr(us + 1));
}

int cmd_evaluate(const CLI::App& sub, const EvaluateArgs& a, const std::vector<std::string>& argv) {
  Manifest m;
  m.capture(sub);
  m.argv = argv;
  std::vector<pipeline::MetricsRow> rows;
  const std::string window = a.from.empty() && a.to.empty() ? "all" : "range";
  std::vector<Sensor> sensors;
  std::vector<HourlyRecord> lcaws, pws;
  if (!a.pairs.empty()) {
    const auto s = !a.sensor.empty() ? std::optional(parse_sensor(a.sensor)) : sensor_from_filename(a.pairs);
    if (!s) throw Error(ErrorCode::InvalidArgument, "pass --sensor with --pairs");
    auto d = read_paired_csv(text::read_file(a.pairs), *s);
    const auto from = a.from.empty() ? Timestamp::min() : parse_iso8601(a.from);
    const auto to = a.to.empty() ? Timestamp::max() : parse_iso8601(a.to);
    std::erase_if(d.rows, [&](const PairedRow& r) { return r.hour_start < from || r.hour_start >= to; });
    if (d.rows.empty()) throw Error(ErrorCode::MissingInput, "no paired rows in range");
    rows.push_back({*s, "raw", window, metrics::compute_metrics(d.targets(), d.raw_values())});
    m.inputs = {a.pairs};
  } else {
    if (a.lcaws.empty() || a.pws.empty()) throw Error(ErrorCode::InvalidArgument, "pass --lcaws and --pws, or --pairs");
    lcaws = in_range(load_hourly(a.lcaws), a.from, a.to);
    pws = in_range(load_hourly(a.pws), a.from, a.to);
    sensors = parse_sensor_list(a.sensors);
    rows = pipeline::evaluate_pairs(lcaws, pws, sensors, "raw", window);
    m.inputs = {a.lcaws, a.pws};
  }
  const auto& pairs_dir = a.pairs_dir;
  const auto& out = a.out;
  if (!pairs_dir.empty() && !sensors.empty()) {
    for (auto s : sensors) {
      const auto p = fs::path(pairs_dir) / fmt::format("paired_{}.csv", to_string(s));
      write_output(p, write_paired_csv(pair_hourly(s, lcaws, pws)));
      m.outputs.push_back(p.string());
    }
  }
  std::string table;
  if (out.ends_with(".json")) {
    json j{{"sensors", json::array()}};
    for (const auto& r : rows) {
      auto e = pipeline::metrics_json(r.m);
      e["sensor"] = std::string(to_string(r.sensor));
      e["window"] = r.window;
      j["sensors"].push_back(e);
    }
    table = j.dump(2) + "\n";
  } else {
    table = pipeline::metrics_csv(rows);
  }
  if (out.empty() || out == "-") {
    std::cout << table;
  } else {
    write_output(out, table);
    m.outputs.push_back(out);
    m.write(manifest_beside(out));
  }
  return kExitOk;
}

struct CalibrateArgs {
  std::string pairs;
  std::string sensor;
  std::string mode = "experiments";
  std::size_t seeds = 100;
  std::uint64_t first_seed = 1;
  std::string kinds = "all";
  int forest_trees = 100;
  std::size_t folds = 10;
  double train_fraction = 0.6;
  int train_days = 18;
  std::string model = "best";
  std::uint64_t seed = 1;
  std::string lcaws;
  std::string out;
};

int cmd_calibrate(const CLI::App& sub, const CalibrateArgs& a, const std::vector<std::string>& argv) {
  const Sensor sensor = parse_sensor(a.sensor);
  if (a.mode != "experiments" && a.mode != "final") {
    throw Error(ErrorCode::InvalidArgument, "mode must be 'experiments' or 'final'");
  }
  const auto data = read_paired_csv(text::read_file(a.pairs), sensor);
  Manifest m;
  m.capture(sub);
  m.argv = argv;
  m.inputs = {a.pairs};
  calibration::PipelineOptions opt;
  opt.folds = a.folds;
  opt.train_fraction = a.train_fraction;

  if (a.mode == "experiments") {
    const auto seeds = seed_range(a.first_seed, a.seeds);
    opt.keep_model = false;
    const auto set = calibration::run_experiments(data, kinds_by_names(a.kinds, a.forest_trees), seeds, opt);
    const auto ranking = calibration::rank_models(set.outputs);
    write_output(a.out, calibration::format_ranking_csv(ranking));
    const auto runs = a.out + ".runs.csv";
    write_output(runs, ranking_runs_csv(set));
    for (const auto& f : set.failures) {
      std::cerr << fmt::format("calibrate: {} seed {} failed: {}\n", f.label, f.seed, f.message);
    }
    m.seeds = seeds;
    m.outputs = {a.out, runs};
    m.write(manifest_beside(a.out));
    return kExitOk;
  }
  if (a.mode != "final") throw Error(ErrorCode::InvalidArgument, "mode must be 'experiments' or 'final'");

  const auto spec = model_by_name(a.model, a.forest_trees);
  const std::vector<calibration::LearnerSpec> cands =
      spec.kind == calibration::LearnerKind::Ensemble ? spec.candidates : std::vector{spec};
  const auto o = calibration::final_experiment(data, cands, a.train_days, a.seed, opt);
  const auto model_path = a.out + ".model.json";
  write_output(model_path, calibration::serialize_model(o.model));
  m.seeds = {a.seed};
  m.outputs = {a.out, model_path};
  if (!a.lcaws.empty()) {
    m.inputs.push_back(a.lcaws);
    const auto corrected = calibration::correct_dataset(o.model, load_hourly(a.lcaws), sensor);
    write_output(a.out, write_hourly_csv(corrected));
  } else {
    write_output(a.out, final_rows_csv(data, o, o.model));
  }
  std::vector<pipeline::MetricsRow> rows{{sensor, "raw", "test", o.raw_metrics},
                                         {sensor, "corrected", "test", o.metrics}};
  const auto metrics_path = a.out + ".metrics.csv";
  write_output(metrics_path, pipeline::metrics_csv(rows));
  m.outputs.push_back(metrics_path);
  m.write(manifest_beside(a.out));
  return kExitOk;
}

struct ReportArgs {
  std::string lcaws;
  std::string pws;
  std::string corrected;
  std::string sensors = "AP,AT,RH,RG,WS,WD";
  std::string out_dir;
};

json write_report(const ReportArgs& a, Manifest& m) {
  const auto lcaws = load_hourly(a.lcaws);
  const auto pws = load_hourly(a.pws);
  std::vector<HourlyRecord> corrected;
  if (!a.corrected.empty()) corrected = load_hourly(a.corrected);
  const auto sensors = parse_sensor_list(a.sensors);

  std::vector<pipeline::Source> sources{{"lcaws", lcaws}, {"pws", pws}};
  if (!corrected.empty()) sources.push_back({"corrected", corrected});
  const fs::path dir(a.out_dir);
  std::size_t scatter_rows = 0;
  const auto scatter = pipeline::scatter_csv(lcaws, pws, sensors, &scatter_rows);
  if (scatter_rows == 0) throw Error(ErrorCode::MissingInput, "no overlapping hours between lcaws and pws");
  write_output(dir / "timeseries.csv", pipeline::timeseries_csv(sources, sensors));
  write_output(dir / "scatter.csv", scatter);

  json report{{"sensors", json::array()}};
  for (auto s : sensors) {
    json entry{{"sensor", std::string(to_string(s))}};
    const auto raw = pipeline::evaluate_pairs(lcaws, pws, std::span(&s, 1));
    entry["raw"] = pipeline::metrics_json(raw.front().m);
    if (!corrected.empty()) {
      const auto cor = pipeline::evaluate_pairs(corrected, pws, std::span(&s, 1), "corrected");
      entry["corrected"] = pipeline::metrics_json(cor.front().m);
    }
    report["sensors"].push_back(entry);
  }
  report["significance_codes"] = {{"**", "p <= 0.001"}, {"*", "p <= 0.01"}, {".", "p <= 0.05"}};
  write_output(dir / "report.json", report.dump(2) + "\n");
  for (const auto* f : {"timeseries.csv", "scatter.csv", "report.json"}) m.outputs.push_back((dir / f).string());
  return report;
}

int cmd_report(const CLI::App& sub, const ReportArgs& a, const std::vector<std::string>& argv) {
  Manifest m;
  m.capture(sub);
  m.argv = argv;
  m.inputs = {a.lcaws, a.pws};
  if (!a.corrected.empty()) m.inputs.push_back(a.corrected);
  write_report(a, m);
  m.write(fs::path(a.out_dir) / "report.manifest.json");
  return kExitOk;
}

struct E2eArgs {
  std::string scenario = "rainy-season";
  std::uint64_t seed = 3;
  int days = 30;
  std::string start = "2024-03-01T00:00:00Z";
  std::string distortion = "default";
  std::string workdir;
  std::size_t seeds = 100;
  std::string rank_sensors = "WS";
  std::string rank_kinds = "all";
  std::string calibrate_sensors = "AP,AT,RH,WS";
  int rank_forest_trees = 25;
  int forest_trees = 100;
  int train_days = 18;
  std::size_t folds = 10;
  std::string replay;
};

int cmd_e2e(const CLI::App& sub, const E2eArgs& a, const std::vector<std::string>& argv) {
  const fs::path dir(a.workdir);
  const std::string station = "LCAWS01";
  fs::create_directories(dir);
  // Stale state from an earlier run would change the store contents.
  for (const auto* d : {"store", "spool"}) fs::remove_all(dir / d);

  Manifest m;
  m.capture(sub);
  m.argv = argv;
  m.seeds = {a.seed};

  const auto sim_out = stage("simulate", [&] {
    return simulate(a.scenario, a.seed, a.days, parse_iso8601(a.start), a.distortion);
  });
  write_output(dir / "raw_samples.csv", pipeline::write_raw_csv(sim_out.raw));
  write_output(dir / "pws_hourly.csv", write_hourly_csv(sim_out.reference));

  stage("transport", [&] {
    RawStore store(dir / "store");
    const auto r = pipeline::deliver_over_loopback(sim_out.raw, store, dir / "spool", station);
    if (r.left_in_spool != 0) {
      throw Error(ErrorCode::Io, fmt::format("{} batches still spooled after delivery", r.left_in_spool));
    }
    std::cerr << fmt::format("e2e: delivered {} batches ({} samples) over loopback\n", r.client.delivered,
                             store.row_count());
  });

  const auto lcaws = stage("process", [&] {
    ProcessArgs pa;
    pa.store = (dir / "store").string();
    pa.station = station;
    pa.from = a.start;
    pa.to = format_iso8601(parse_iso8601(a.start) + std::chrono::days(a.days));
    std::vector<std::string> diagnostics;
    auto r = process_input(pa, diagnostics);
    for (const auto& d : diagnostics) std::cerr << "e2e: process: " << d << "\n";
    return r;
  });
  write_output(dir / "lcaws_hourly.csv", write_hourly_csv(lcaws));

  std::map<Sensor, PairedDataset> paired;
  stage("pair", [&] {
    for (auto s : kAllSensors) {
      paired[s] = pair_hourly(s, lcaws, sim_out.reference);
      if (paired[s].rows.empty()) throw Error(ErrorCode::MissingInput, "no overlapping hours");
      write_output(dir / fmt::format("paired_{}.csv", to_string(s)), write_paired_csv(paired[s]));
    }
  });

  calibration::PipelineOptions opt;
  opt.folds = a.folds;
  if (a.seeds > 0) {
    stage("rank", [&] {
      const auto seeds = seed_range(1, a.seeds);
      opt.keep_model = false;
      for (auto s : parse_sensor_list(a.rank_sensors)) {
        const auto set = calibration::run_experiments(paired.at(s), kinds_by_names(a.rank_kinds, a.rank_forest_trees),
                                                      seeds, opt);
        write_output(dir / fmt::format("ranking_{}.csv", to_string(s)),
                     calibration::format_ranking_csv(calibration::rank_models(set.outputs)));
        write_output(dir / fmt::format("ranking_{}.runs.csv", to_string(s)), ranking_runs_csv(set));
      }
      opt.keep_model = true;
    });
  }

  std::vector<pipeline::MetricsRow> summary = pipeline::evaluate_pairs(lcaws, sim_out.reference, kAllSensors);
  auto corrected = lcaws;
  stage("calibrate", [&] {
    const auto cands = calibration::default_candidates(a.forest_trees);
    for (auto s : parse_sensor_list(a.calibrate_sensors)) {
      const auto o = calibration::final_experiment(paired.at(s), cands, a.train_days, a.seed, opt);
      write_output(dir / fmt::format("model_{}.json", to_string(s)), calibration::serialize_model(o.model));
      write_output(dir / fmt::format("final_{}.csv", to_string(s)), final_rows_csv(paired.at(s), o, o.model));
      summary.push_back({s, "raw", "test", o.raw_metrics});
      summary.push_back({s, "corrected", "test", o.metrics});
      // Correction consumes the original low-cost covariates, not earlier corrections.
      const auto fixed = calibration::correct_dataset(o.model, lcaws, s);
      for (std::size_t i = 0; i < corrected.size(); ++i) corrected[i].set_value(s, fixed[i].value(s));
    }
  });
  write_output(dir / "corrected_hourly.csv", write_hourly_csv(corrected));
  write_output(dir / "summary.csv", pipeline::metrics_csv(summary));

  stage("report", [&] {
    ReportArgs ra;
    ra.lcaws = (dir / "lcaws_hourly.csv").string();
    ra.pws = (dir / "pws_hourly.csv").string();
    ra.corrected = (dir / "corrected_hourly.csv").string();
    ra.out_dir = (dir / "report").string();
    Manifest rm;
    write_report(ra, rm);
  });

  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() != ".json") m.outputs.push_back(fs::relative(e.path(), dir).string());
  }
  std::sort(m.outputs.begin(), m.outputs.end());
  m.write(dir / "manifest.json");
  std::cerr << "e2e: done, outputs in " << dir.string() << "\n";
  return kExitOk;
}

int replay_manifest(const std::string& path, const std::string& workdir_override) {
  const auto j = json::parse(text::read_file(path));
  auto argv = j.at("argv").get<std::vector<std::string>>();
  if (!workdir_override.empty()) {
    for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
      if (argv[i] == "--workdir") argv[i + 1] = workdir_override;
    }
  }
  return run(argv);
}

int run(std::vector<std::string> args) {
  CLI::App app{"wxpipe: low-cost weather station pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::vector<std::string> argv = args;
  const std::string default_store = env_or("WXPIPE_STORE", "store");
  const std::string default_spool = env_or("WXPIPE_SPOOL", "spool");

  auto* sim = app.add_subcommand("simulate", "simulate raw station samples and reference hourly data");
  std::string scenario = "rainy-season", start = "2024-03-01T00:00:00Z", distortion = "default", raw_out, ref_out;
  std::uint64_t seed = 1;
  int days = 30;
  sim->add_option("--scenario", scenario, "calm, storm, rainy-season or windy")->capture_default_str();
  sim->add_option("--seed", seed)->capture_default_str();
  sim->add_option("--days", days)->capture_default_str();
  sim->add_option("--start", start, "first hour, UTC")->capture_default_str();
  sim->add_option("--distortion", distortion, "default or identity")->capture_default_str();
  sim->add_option("--out", raw_out, "raw sample CSV")->required();
  sim->add_option("--reference-out", ref_out, "reference hourly CSV");

  auto* station = app.add_subcommand("station", "run the datalogger client on a raw trace or simulated sensors");
  StationArgs sa;
  sa.spool = default_spool;
  station->add_option("--raw", sa.raw, "raw sample CSV to play back");
  station->add_option("--sim-scenario", sa.scenario, "simulate sensors with this scenario");
  station->add_option("--seed", sa.seed)->capture_default_str();
  station->add_option("--minutes", sa.minutes, "simulated minutes")->capture_default_str();
  station->add_option("--start", sa.start, "simulated start, UTC")->capture_default_str();
  station->add_option("--server", sa.server)->capture_default_str();
  station->add_option("--station-id", sa.station_id)->capture_default_str();
  station->add_option("--spool", sa.spool, "spool directory (WXPIPE_SPOOL)")->capture_default_str();
  station->add_option("--batch-size", sa.batch_size)->capture_default_str();
  station->add_option("--period", sa.period, "sampling standby")->capture_default_str();
  station->add_flag("--accel", sa.accel, "virtual clock: no real waiting between samples");

  auto* server = app.add_subcommand("server", "run the ingestion server until SIGINT/SIGTERM");
  std::string sv_listen = "0.0.0.0:7700", sv_store = default_store;
  server->add_option("--bind,--listen", sv_listen)->capture_default_str();
  server->add_option("--store", sv_store, "store directory (WXPIPE_STORE)")->capture_default_str();

  auto* process = app.add_subcommand("process", "compute hourly records from raw samples");
  ProcessArgs pa;
  process->add_option("--store", pa.store, "store directory (WXPIPE_STORE)");
  process->add_option("--raw", pa.raw, "raw sample CSV instead of a store");
  process->add_option("--station", pa.station);
  process->add_option("--from", pa.from, "first hour, UTC");
  process->add_option("--to", pa.to, "end hour (exclusive), UTC");
  process->add_option("--out", pa.out, "hourly CSV")->required();

  auto* evaluate = app.add_subcommand("evaluate", "raw metrics of low-cost hourly data against the reference");
  EvaluateArgs eva;
  evaluate->add_option("--lcaws", eva.lcaws, "low-cost hourly CSV");
  evaluate->add_option("--pws", eva.pws, "reference hourly CSV");
  evaluate->add_option("--pairs", eva.pairs, "paired CSV instead of two hourly files");
  evaluate->add_option("--sensor", eva.sensor, "sensor of --pairs (else taken from the file name)");
  evaluate->add_option("--sensors", eva.sensors)->capture_default_str();
  evaluate->add_option("--from", eva.from);
  evaluate->add_option("--to", eva.to);
  evaluate->add_option("--pairs-dir", eva.pairs_dir, "also write paired_<SENSOR>.csv here");
  evaluate->add_option("--out", eva.out, "metrics CSV, or JSON when the name ends in .json (stdout if omitted)");

  auto* calibrate = app.add_subcommand("calibrate", "rank calibration models or run the final correction");
  CalibrateArgs ca;
  calibrate->add_option("--pairs", ca.pairs)->required();
  calibrate->add_option("--sensor", ca.sensor)->required();
  calibrate->add_option("--mode", ca.mode, "experiments or final")->capture_default_str();
  calibrate->add_option("--seeds", ca.seeds, "number of experiments")->capture_default_str();
  calibrate->add_option("--first-seed", ca.first_seed)->capture_default_str();
  calibrate->add_option("--kinds", ca.kinds, "comma list of kinds to rank")->capture_default_str();
  calibrate->add_option("--forest-trees", ca.forest_trees)->capture_default_str();
  calibrate->add_option("--folds", ca.folds)->capture_default_str();
  calibrate->add_option("--train-fraction", ca.train_fraction)->capture_default_str();
  calibrate->add_option("--train-days", ca.train_days)->capture_default_str();
  calibrate->add_option("--model", ca.model, "best (ensemble) or a learner kind")->capture_default_str();
  calibrate->add_option("--seed", ca.seed, "seed of the final experiment")->capture_default_str();
  calibrate->add_option("--lcaws", ca.lcaws, "hourly CSV to correct (final mode)");
  calibrate->add_option("--out", ca.out)->required();

  auto* e2e = app.add_subcommand("e2e", "simulate, transport, process, pair, calibrate and report in one run");
  E2eArgs ea;
  e2e->add_option("--scenario", ea.scenario)->capture_default_str();
  e2e->add_option("--seed", ea.seed)->capture_default_str();
  e2e->add_option("--days", ea.days)->capture_default_str();
  e2e->add_option("--start", ea.start)->capture_default_str();
  e2e->add_option("--distortion", ea.distortion)->capture_default_str();
  e2e->add_option("--workdir", ea.workdir);
  e2e->add_option("--seeds", ea.seeds, "ranking experiments per sensor (0 skips ranking)")->capture_default_str();
  e2e->add_option("--rank-sensors", ea.rank_sensors)->capture_default_str();
  e2e->add_option("--rank-kinds", ea.rank_kinds)->capture_default_str();
  e2e->add_option("--rank-forest-trees", ea.rank_forest_trees)->capture_default_str();
  e2e->add_option("--calibrate-sensors", ea.calibrate_sensors)->capture_default_str();
  e2e->add_option("--forest-trees", ea.forest_trees)->capture_default_str();
  e2e->add_option("--train-days", ea.train_days)->capture_default_str();
  e2e->add_option("--folds", ea.folds)->capture_default_str();
  e2e->add_option("--replay", ea.replay, "rerun the command recorded in a manifest");
  e2e->add_flag("--accel", "virtual clock (always on)");

  auto* report = app.add_subcommand("report", "metrics report and plot data from hourly CSVs");
  ReportArgs ra;
  report->add_option("--lcaws", ra.lcaws)->required();
  report->add_option("--pws", ra.pws)->required();
  report->add_option("--corrected", ra.corrected);
  report->add_option("--sensors", ra.sensors)->capture_default_str();
  report->add_option("--out-dir", ra.out_dir)->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*sim) return cmd_simulate(*sim, scenario, seed, days, start, distortion, raw_out, ref_out, argv);
    if (*station) return cmd_station(sa);
    if (*server) return cmd_server(sv_listen, sv_store);
    if (*process) {
      if (pa.raw.empty() && pa.store.empty()) pa.store = default_store;
      return cmd_process(*process, pa, argv);
    }
    if (*evaluate) return cmd_evaluate(*evaluate, eva, argv);
    if (*calibrate) return cmd_calibrate(*calibrate, ca, argv);
    if (*e2e) {
      if (!ea.replay.empty()) return replay_manifest(ea.replay, ea.workdir);
      if (ea.workdir.empty()) throw Error(ErrorCode::InvalidArgument, "--workdir is required");
      return cmd_e2e(*e2e, ea, argv);
    }
    if (*report) return cmd_report(*report, ra, argv);
  } catch (const Error& e) {
    std::cerr << "wxpipe: " << e.what() << "\n";
    const bool usage = e.code() == ErrorCode::InvalidArgument || e.code() == ErrorCode::UnknownScenario;
    return usage ? kExitUsage : kExitData;
  } catch (const json::exception& e) {
    std::cerr << "wxpipe: malformed json: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "wxpipe: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run(std::move(args));
  } catch (const std::exception& e) {
    std::cerr << "wxpipe: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
