#pragma once

// Station-side loop: sample once per period, cut a batch every N samples, spool it,
// and forward the spool oldest-first whenever the link allows.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "wxpipe/batch.hpp"
#include "wxpipe/error.hpp"
#include "wxpipe/net.hpp"
#include "wxpipe/text.hpp"
#include "wxpipe/time.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe::client {

struct ClientConfig {
  std::size_t batch_size = 10;  // samples per batch file
  seconds period{60};           // sampling standby
  net::Endpoint server{"127.0.0.1", 7700};
  std::filesystem::path spool_dir = "spool";
  std::string station_id = "LCAWS01";
  std::size_t spool_capacity = 10000;  // undelivered batches kept
  net::Millis send_timeout{10000};
  seconds backoff_initial{1};
  seconds backoff_max{60};

  void validate() const {
    if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be at least 1");
    if (period.count() <= 0) throw Error(ErrorCode::InvalidArgument, "sampling period must be positive");
    if (spool_capacity < 1) throw Error(ErrorCode::InvalidArgument, "spool capacity must be at least 1");
    if (!valid_station_id(station_id)) throw Error(ErrorCode::InvalidArgument, "invalid station id");
  }
};

// ---------------------------------------------------------------------------
// Time and sensors

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() = 0;
  virtual void standby_until(Timestamp t) = 0;
};

/// Wall clock with real sleeps.
class SystemClock final : public Clock {
 public:
  Timestamp now() override { return std::chrono::floor<seconds>(std::chrono::system_clock::now()); }
  void standby_until(Timestamp t) override { std::this_thread::sleep_until(t); }
};

/// Jumps straight to the requested time; lets a month of sampling run in milliseconds.
class VirtualClock final : public Clock {
 public:
  explicit VirtualClock(Timestamp start) : now_(start) {}
  Timestamp now() override { return now_; }
  void standby_until(Timestamp t) override { now_ = std::max(now_, t); }
  void advance(seconds d) { now_ += d; }

 private:
  Timestamp now_;
};

class SensorSource {
 public:
  virtual ~SensorSource() = default;
  /// Current value of one sensor; counters and ADC codes are returned as whole numbers.
  virtual double read(Sensor s, Timestamp now) = 0;
  virtual std::uint64_t uptime_ms(Timestamp now) = 0;
};

/// Plays back precomputed raw samples, one per minute starting at the first timestamp.
class ReplaySensorSource final : public SensorSource {
 public:
  explicit ReplaySensorSource(std::vector<RawSample> samples) : samples_(std::move(samples)) {}

  double read(Sensor s, Timestamp now) override {
    const auto& r = at(now, s);
    switch (s) {
      case Sensor::AP: return r.ap_raw;
      case Sensor::AT: return r.at_raw;
      case Sensor::RH: return r.rh_raw;
      case Sensor::RG: return r.rg_pulses;
      case Sensor::WS: return r.ws_pulses;
      case Sensor::WD: return r.wd_adc;
    }
    return 0.0;
  }

  std::uint64_t uptime_ms(Timestamp now) override { return at(now, Sensor::AP).uptime_ms; }

  std::size_t size() const { return samples_.size(); }
  Timestamp start() const { return samples_.empty() ? Timestamp{} : samples_.front().t_ts; }

 private:
  const RawSample& at(Timestamp now, Sensor s) const {
    if (samples_.empty() || now < samples_.front().t_ts) {
      throw Error(ErrorCode::SensorReadFailure, fmt::format("{}: no signal before start", to_string(s)));
    }
    const auto idx = static_cast<std::size_t>((now - samples_.front().t_ts) / minutes{1});
    if (idx >= samples_.size()) {
      throw Error(ErrorCode::SensorReadFailure, fmt::format("{}: no signal after end of trace", to_string(s)));
    }
    return samples_[idx];
  }

  std::vector<RawSample> samples_;
};

/// Reads every sensor once and stamps the tuple with the acquisition time.
inline RawSample get_sensordata(SensorSource& sensors, Clock& clock) {
  const Timestamp now = clock.now();
  RawSample s;
  auto whole = [&](Sensor which, double max) {
    const double v = sensors.read(which, now);
    if (!(v >= 0.0 && v <= max) || v != std::floor(v)) {
      throw Error(ErrorCode::SensorReadFailure, fmt::format("{}: implausible reading {}", to_string(which), v));
    }
    return v;
  };
  auto real = [&](Sensor which, double lo, double hi) {
    const double v = sensors.read(which, now);
    if (!std::isfinite(v) || v < lo || v > hi) {
      throw Error(ErrorCode::SensorReadFailure, fmt::format("{}: implausible reading {}", to_string(which), v));
    }
    return v;
  };
  s.ap_raw = real(Sensor::AP, 0.0, 2000.0);
  s.at_raw = real(Sensor::AT, -100.0, 100.0);
  s.rh_raw = real(Sensor::RH, 0.0, 100.0);
  s.rg_pulses = static_cast<std::uint16_t>(whole(Sensor::RG, 65535.0));
  s.ws_pulses = static_cast<std::uint16_t>(whole(Sensor::WS, 65535.0));
  s.wd_adc = static_cast<std::uint8_t>(whole(Sensor::WD, 255.0));
  s.uptime_ms = sensors.uptime_ms(now);
  s.t_ts = now;
  return s;
}

// ---------------------------------------------------------------------------
// Transport

enum class DeliveryStatus { Ack, Nak, ConnectFailed, Timeout };

constexpr std::string_view to_string(DeliveryStatus s) {
  switch (s) {
    case DeliveryStatus::Ack: return "ACK";
    case DeliveryStatus::Nak: return "NAK";
    case DeliveryStatus::ConnectFailed: return "ConnectFailed";
    case DeliveryStatus::Timeout: return "Timeout";
  }
  return "?";
}

class Transport {
 public:
  virtual ~Transport() = default;
  virtual DeliveryStatus deliver(const SampleBatch& batch) = 0;
};

namespace detail {

inline DeliveryStatus exchange(const net::Socket& sock, const std::string& frame, net::Millis timeout) {
  const auto w = net::write_all(sock, frame.data(), frame.size(), timeout);
  if (w == net::IoStatus::Timeout) return DeliveryStatus::Timeout;
  if (w != net::IoStatus::Ok) return DeliveryStatus::ConnectFailed;
  std::uint8_t reply = 0;
  const auto r = net::read_exact(sock, &reply, 1, timeout);
  if (r == net::IoStatus::Timeout) return DeliveryStatus::Timeout;
  if (r != net::IoStatus::Ok) return DeliveryStatus::ConnectFailed;
  return reply == net::kAck ? DeliveryStatus::Ack : DeliveryStatus::Nak;
}

}  // namespace detail

/// One-shot send over a fresh connection.
inline DeliveryStatus send_batch(const net::Endpoint& addr, const SampleBatch& batch,
                                 net::Millis timeout = net::Millis{10000}) {
  const auto frame = net::encode_frame(serialize_batch(batch));
  const auto sock = net::connect_to(addr, timeout);
  if (!sock.valid()) return DeliveryStatus::ConnectFailed;
  return detail::exchange(sock, frame, timeout);
}

/// Keeps one connection open across frames and reconnects on failure.
class TcpTransport final : public Transport {
 public:
  TcpTransport(net::Endpoint addr, net::Millis timeout) : addr_(std::move(addr)), timeout_(timeout) {}

  DeliveryStatus deliver(const SampleBatch& batch) override {
    const auto frame = net::encode_frame(serialize_batch(batch));
    const bool reused = sock_.valid();
    if (!reused) {
      sock_ = net::connect_to(addr_, timeout_);
      if (!sock_.valid()) return DeliveryStatus::ConnectFailed;
    }
    auto st = detail::exchange(sock_, frame, timeout_);
    if (st == DeliveryStatus::ConnectFailed && reused) {
      // The server may have dropped an idle connection; one fresh attempt.
      sock_ = net::connect_to(addr_, timeout_);
      if (!sock_.valid()) return DeliveryStatus::ConnectFailed;
      st = detail::exchange(sock_, frame, timeout_);
    }
    if (st != DeliveryStatus::Ack && st != DeliveryStatus::Nak) sock_.reset();
    return st;
  }

 private:
  net::Endpoint addr_;
  net::Millis timeout_;
  net::Socket sock_;
};

// ---------------------------------------------------------------------------
// Spool

/// Directory of pending batch files, written atomically (temp file + rename).
class Spool {
 public:
  explicit Spool(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    if (std::filesystem::exists(state_path())) {
      next_seq_ = text::require_u64(trimmed(text::read_file(state_path().string())), "spool state");
    }
    for (auto seq : pending()) next_seq_ = std::max(next_seq_, seq + 1);
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::uint64_t next_seq() const { return next_seq_; }

  /// Writes the batch under the next sequence number and returns that number.
  std::uint64_t write(SampleBatch batch) {
    batch.seq = next_seq_;
    atomic_write(path_of(batch.seq), serialize_batch(batch));
    ++next_seq_;
    atomic_write(state_path(), fmt::format("{}\n", next_seq_));
    return batch.seq;
  }

  /// Pending sequence numbers, oldest first.
  std::vector<std::uint64_t> pending() const {
    std::vector<std::uint64_t> out;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      const auto name = e.path().filename().string();
      if (name.size() == 30 && name.starts_with("batch-") && name.ends_with(".csv")) {
        if (auto seq = text::to_u64(std::string_view(name).substr(6, 20))) out.push_back(*seq);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  SampleBatch load(std::uint64_t seq) const { return parse_batch(text::read_file(path_of(seq).string())); }

  void remove(std::uint64_t seq) { std::filesystem::remove(path_of(seq)); }

  /// Moves an unreadable spool file aside so it stops blocking the queue.
  void quarantine(std::uint64_t seq) {
    const auto qdir = dir_ / "quarantine";
    std::filesystem::create_directories(qdir);
    std::filesystem::rename(path_of(seq), qdir / path_of(seq).filename());
  }

  std::filesystem::path path_of(std::uint64_t seq) const { return dir_ / fmt::format("batch-{:020}.csv", seq); }

 private:
  std::filesystem::path state_path() const { return dir_ / "next_seq"; }

  static std::string_view trimmed(const std::string& s) {
    std::string_view v(s);
    while (!v.empty() && (v.back() == '\n' || v.back() == ' ')) v.remove_suffix(1);
    return v;
  }

  void atomic_write(const std::filesystem::path& target, std::string_view content) const {
    const auto tmp = dir_ / (".tmp-" + target.filename().string());
    text::write_file(tmp.string(), content);
    std::filesystem::rename(tmp, target);
  }

  std::filesystem::path dir_;
  std::uint64_t next_seq_ = 0;
};

// ---------------------------------------------------------------------------
// Loop

struct ClientStats {
  std::uint64_t samples = 0;
  std::uint64_t read_failures = 0;
  std::uint64_t batches_written = 0;
  std::uint64_t delivered = 0;
  std::uint64_t attempts_failed = 0;
  std::uint64_t naks = 0;
  std::uint64_t spool_dropped_batches = 0;  // SpoolFull events
  std::uint64_t spool_dropped_samples = 0;
  std::uint64_t quarantined = 0;
  std::vector<std::uint64_t> delivery_order;
  std::vector<std::string> log;
};

class DataloggerClient {
 public:
  DataloggerClient(ClientConfig cfg, SensorSource& sensors, Clock& clock, Transport& transport)
      : cfg_((cfg.validate(), std::move(cfg))),
        sensors_(sensors),
        clock_(clock),
        transport_(transport),
        spool_(cfg_.spool_dir),
        next_sample_(clock.now()),
        next_attempt_(clock.now()),
        backoff_(cfg_.backoff_initial) {}

  const ClientStats& stats() const { return stats_; }
  const Spool& spool() const { return spool_; }
  std::size_t buffered_samples() const { return pending_.size(); }

  /// One sampling cycle: wait for the slot, sample, cut a batch when full, forward.
  void tick() {
    clock_.standby_until(next_sample_);
    next_sample_ += cfg_.period;
    try {
      pending_.push_back(get_sensordata(sensors_, clock_));
      ++stats_.samples;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::SensorReadFailure) throw;
      ++stats_.read_failures;
      stats_.log.push_back(fmt::format("{} sample dropped: {}", format_iso8601(clock_.now()), e.what()));
    }
    if (pending_.size() >= cfg_.batch_size) cut_batch();
    drain();
  }

  /// Runs `n` cycles, or until `stop` returns true.
  void run(std::size_t n, const std::function<bool()>& stop = {}) {
    for (std::size_t i = 0; i < n && !(stop && stop()); ++i) tick();
  }

  /// Flushes a partial batch and makes one forwarding attempt.
  void shutdown() {
    if (!pending_.empty()) cut_batch();
    next_attempt_ = clock_.now();
    drain();
  }

  /// Tries to forward the spool oldest-first; stops at the first failure.
  void drain() {
    if (clock_.now() < next_attempt_) return;
    for (auto seq : spool_.pending()) {
      SampleBatch batch;
      try {
        batch = spool_.load(seq);
      } catch (const Error& e) {
        spool_.quarantine(seq);
        ++stats_.quarantined;
        stats_.log.push_back(fmt::format("batch {} quarantined: {}", seq, e.what()));
        continue;
      }
      const auto st = transport_.deliver(batch);
      if (st == DeliveryStatus::Ack) {
        spool_.remove(seq);
        ++stats_.delivered;
        stats_.delivery_order.push_back(seq);
        backoff_ = cfg_.backoff_initial;
        continue;
      }
      if (st == DeliveryStatus::Nak) ++stats_.naks;
      ++stats_.attempts_failed;
      next_attempt_ = clock_.now() + backoff_;
      backoff_ = std::min(backoff_ * 2, cfg_.backoff_max);
      return;
    }
  }

 private:
  void cut_batch() {
    auto queued = spool_.pending();
    while (queued.size() >= cfg_.spool_capacity) {
      // Spool full: the oldest undelivered batch gives way.
      try {
        stats_.spool_dropped_samples += spool_.load(queued.front()).samples.size();
      } catch (const Error&) {
      }
      spool_.remove(queued.front());
      ++stats_.spool_dropped_batches;
      stats_.log.push_back(fmt::format("spool full, dropped batch {}", queued.front()));
      queued.erase(queued.begin());
    }
    SampleBatch b{cfg_.station_id, 0, std::move(pending_)};
    pending_.clear();
    spool_.write(std::move(b));
    ++stats_.batches_written;
  }

  ClientConfig cfg_;
  SensorSource& sensors_;
  Clock& clock_;
  Transport& transport_;
  Spool spool_;
  std::vector<RawSample> pending_;
  Timestamp next_sample_;
  Timestamp next_attempt_;
  seconds backoff_;
  ClientStats stats_;
};

}  // namespace wxpipe::client
