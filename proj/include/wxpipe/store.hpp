#pragma once

// Append-only raw sample log with an in-memory index rebuilt on open.
//
// <dir>/raw.log holds, per stored batch:
//   <station>,<seq>,<ts>,<ap>,<at>,<rh>,<rg>,<ws>,<wd>,<uptime>     one line per sample
//   COMMIT,<station>,<seq>,<n>,<CRC32 of the sample lines>
// Lines after the last valid COMMIT are a torn append and are truncated away on open.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "wxpipe/batch.hpp"
#include "wxpipe/error.hpp"
#include "wxpipe/text.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe {

enum class AppendOutcome { Stored, Duplicate };

class RawStore {
 public:
  explicit RawStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    recover();
    fd_ = ::open(log_path().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(ErrorCode::Io, fmt::format("open {}: {}", log_path().string(), std::strerror(errno)));
  }

  RawStore(const RawStore&) = delete;
  RawStore& operator=(const RawStore&) = delete;
  ~RawStore() {
    if (fd_ >= 0) ::close(fd_);
  }

  std::filesystem::path log_path() const { return dir_ / "raw.log"; }

  /// Appends a validated batch once per (station_id, seq). Returns only after the bytes
  /// have been flushed to stable storage.
  AppendOutcome append(const SampleBatch& batch) {
    validate_batch(batch);
    std::unique_lock lock(mutex_);
    if (committed_.contains({batch.station_id, batch.seq})) return AppendOutcome::Duplicate;

    std::string rows;
    for (const auto& s : batch.samples) {
      rows += fmt::format("{},{},{}\n", batch.station_id, batch.seq, format_record(s));
    }
    const std::string block = rows + fmt::format("COMMIT,{},{},{},{:08X}\n", batch.station_id, batch.seq,
                                                 batch.samples.size(), crc32_of(rows));
    const off_t before = ::lseek(fd_, 0, SEEK_END);
    std::size_t written = 0;
    while (written < block.size()) {
      const ssize_t n = ::write(fd_, block.data() + written, block.size() - written);
      if (n < 0) {
        if (errno == EINTR) continue;
        const std::string why = std::strerror(errno);
        if (before >= 0 && ::ftruncate(fd_, before) != 0) {
          // the torn tail is dropped again by recovery on the next open
        }
        throw Error(ErrorCode::Io, "append failed: " + why);
      }
      written += static_cast<std::size_t>(n);
    }
    if (::fdatasync(fd_) != 0) throw Error(ErrorCode::Io, "fdatasync failed: " + std::string(std::strerror(errno)));

    // Stored samples are what a reader of the log would see (2-decimal digital values).
    apply(batch.station_id, batch.seq, reparse_rows(rows));
    return AppendOutcome::Stored;
  }

  /// Samples with from <= t_ts < to, time ordered.
  std::vector<RawSample> query_range(const std::string& station, Timestamp from, Timestamp to) const {
    if (!(from < to)) throw Error(ErrorCode::InvalidArgument, "query range is empty");
    std::shared_lock lock(mutex_);
    const auto it = stations_.find(station);
    if (it == stations_.end()) throw Error(ErrorCode::UnknownStation, "no data for station '" + station + "'");
    std::vector<RawSample> out;
    const auto& idx = it->second;
    for (auto s = idx.lower_bound(from); s != idx.end() && s->first < to; ++s) out.push_back(s->second);
    return out;
  }

  /// Whole history of one station.
  std::vector<RawSample> all_samples(const std::string& station) const {
    std::shared_lock lock(mutex_);
    const auto it = stations_.find(station);
    if (it == stations_.end()) throw Error(ErrorCode::UnknownStation, "no data for station '" + station + "'");
    std::vector<RawSample> out;
    out.reserve(it->second.size());
    for (const auto& [t, s] : it->second) out.push_back(s);
    return out;
  }

  std::vector<std::string> stations() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [k, v] : stations_) out.push_back(k);
    std::sort(out.begin(), out.end());
    return out;
  }

  bool contains(const std::string& station, std::uint64_t seq) const {
    std::shared_lock lock(mutex_);
    return committed_.contains({station, seq});
  }

  std::size_t batch_count() const {
    std::shared_lock lock(mutex_);
    return committed_.size();
  }

  std::size_t row_count() const {
    std::shared_lock lock(mutex_);
    return rows_;
  }

  /// Bytes dropped from the tail of the log during the last open.
  std::size_t truncated_bytes() const { return truncated_bytes_; }

 private:
  using Index = std::multimap<Timestamp, RawSample>;

  static std::vector<RawSample> reparse_rows(std::string_view rows) {
    std::vector<RawSample> out;
    for (auto line : text::lines(rows)) {
      const auto f = text::split(line, ',');
      out.push_back(parse_record(std::span(f).subspan(2)));
    }
    return out;
  }

  void apply(const std::string& station, std::uint64_t seq, const std::vector<RawSample>& samples) {
    if (!committed_.insert({station, seq}).second) return;
    auto& idx = stations_[station];
    for (const auto& s : samples) idx.emplace(s.t_ts, s);
    rows_ += samples.size();
  }

  void recover() {
    if (!std::filesystem::exists(log_path())) return;
    const std::string content = text::read_file(log_path().string());
    std::size_t pos = 0;
    std::size_t committed_end = 0;
    std::size_t pending_start = 0;
    while (pos < content.size()) {
      const auto nl = content.find('\n', pos);
      if (nl == std::string::npos) break;  // unterminated tail
      const std::string_view line(content.data() + pos, nl - pos);
      const auto f = text::split(line, ',');
      if (f.size() == 5 && f[0] == "COMMIT") {
        const std::string_view rows(content.data() + pending_start, pos - pending_start);
        if (commit_matches(f, rows)) {
          try {
            apply(std::string(f[1]), text::require_u64(f[2], "seq"), reparse_rows(rows));
          } catch (const Error&) {
            break;
          }
          committed_end = nl + 1;
        } else {
          break;
        }
        pending_start = nl + 1;
      } else if (f.size() != 10) {
        break;
      }
      pos = nl + 1;
    }
    if (committed_end < content.size()) {
      truncated_bytes_ = content.size() - committed_end;
      std::filesystem::resize_file(log_path(), committed_end);
    }
  }

  static bool commit_matches(const std::vector<std::string_view>& f, std::string_view rows) {
    const auto n = text::to_u64(f[3]);
    if (!n || *n != text::lines(rows).size() || *n == 0) return false;
    if (f[4] != fmt::format("{:08X}", crc32_of(rows))) return false;
    const std::string prefix = fmt::format("{},{},", f[1], f[2]);
    for (auto line : text::lines(rows)) {
      if (line.substr(0, prefix.size()) != prefix) return false;
    }
    return true;
  }

  std::filesystem::path dir_;
  int fd_ = -1;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, Index> stations_;
  std::set<std::pair<std::string, std::uint64_t>> committed_;
  std::size_t rows_ = 0;
  std::size_t truncated_bytes_ = 0;
};

}  // namespace wxpipe
