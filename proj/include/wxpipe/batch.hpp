#pragma once

// Batch file encoding exchanged between the datalogger and the ingestion server.
//
//   LCAWS,<station_id>,<seq>,<n_records>
//   <ts_iso8601>,<ap>,<at>,<rh>,<rg_pulses>,<ws_pulses>,<wd_adc>,<uptime_ms>   (n_records times)
//   CRC32,<8 hex digits over every preceding byte>
//
// All lines end in LF.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <zlib.h>

#include "wxpipe/error.hpp"
#include "wxpipe/text.hpp"
#include "wxpipe/time.hpp"
#include "wxpipe/types.hpp"

namespace wxpipe {

struct SampleBatch {
  std::string station_id;
  std::uint64_t seq = 0;
  std::vector<RawSample> samples;

  friend bool operator==(const SampleBatch&, const SampleBatch&) = default;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks so multi-GiB inputs stay correct.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const auto len = static_cast<uInt>(std::min(kChunk, bytes.size() - off));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), len);
  }
  return static_cast<std::uint32_t>(crc);
}

/// Station ids are printable ASCII without separators or whitespace.
inline bool valid_station_id(std::string_view id) {
  if (id.empty()) return false;
  for (char c : id) {
    if (c <= 0x20 || c >= 0x7f || c == ',') return false;
  }
  return true;
}

inline void validate_sample(const RawSample& s) {
  if (!(s.ap_raw >= 0.0)) throw Error(ErrorCode::MalformedRecord, "negative pressure");
  if (!(s.rh_raw >= 0.0 && s.rh_raw <= 100.0)) throw Error(ErrorCode::MalformedRecord, "humidity outside [0,100]");
  if (!std::isfinite(s.at_raw) || !std::isfinite(s.ap_raw)) throw Error(ErrorCode::MalformedRecord, "non-finite reading");
}

/// `<ts>,<ap>,<at>,<rh>,<rg>,<ws>,<wd>,<uptime>` without terminator.
inline std::string format_record(const RawSample& s) {
  return fmt::format("{},{},{},{},{},{},{},{}", format_iso8601(s.t_ts), text::fixed(s.ap_raw, 2),
                     text::fixed(s.at_raw, 2), text::fixed(s.rh_raw, 2), s.rg_pulses, s.ws_pulses,
                     static_cast<unsigned>(s.wd_adc), s.uptime_ms);
}

/// Parses the eight record fields; range violations raise MalformedRecord.
inline RawSample parse_record(std::span<const std::string_view> f) {
  if (f.size() != 8) {
    throw Error(ErrorCode::MalformedRecord, fmt::format("expected 8 fields, got {}", f.size()));
  }
  RawSample s;
  s.t_ts = parse_iso8601(f[0]);
  s.ap_raw = text::require_double(f[1], "ap");
  s.at_raw = text::require_double(f[2], "at");
  s.rh_raw = text::require_double(f[3], "rh");
  const auto rg = text::require_u64(f[4], "rg_pulses");
  const auto ws = text::require_u64(f[5], "ws_pulses");
  const auto wd = text::require_u64(f[6], "wd_adc");
  if (rg > 0xFFFF) throw Error(ErrorCode::MalformedRecord, "rg_pulses exceeds 16 bits");
  if (ws > 0xFFFF) throw Error(ErrorCode::MalformedRecord, "ws_pulses exceeds 16 bits");
  if (wd > 0xFF) throw Error(ErrorCode::MalformedRecord, fmt::format("wd_adc {} outside [0,255]", wd));
  s.rg_pulses = static_cast<std::uint16_t>(rg);
  s.ws_pulses = static_cast<std::uint16_t>(ws);
  s.wd_adc = static_cast<std::uint8_t>(wd);
  s.uptime_ms = text::require_u64(f[7], "uptime_ms");
  validate_sample(s);
  return s;
}

inline void validate_batch(const SampleBatch& b) {
  if (!valid_station_id(b.station_id)) throw Error(ErrorCode::MalformedRecord, "invalid station id");
  if (b.samples.empty()) throw Error(ErrorCode::EmptyBatch, "batch has no samples");
  for (std::size_t i = 0; i < b.samples.size(); ++i) {
    validate_sample(b.samples[i]);
    if (i > 0) {
      if (b.samples[i].t_ts <= b.samples[i - 1].t_ts) {
        throw Error(ErrorCode::MalformedRecord, "samples not in ascending time order");
      }
      if (b.samples[i].uptime_ms <= b.samples[i - 1].uptime_ms) {
        throw Error(ErrorCode::MalformedRecord, "uptime not strictly increasing");
      }
    }
  }
}

inline std::string serialize_batch(const SampleBatch& b) {
  validate_batch(b);
  std::string out = fmt::format("LCAWS,{},{},{}\n", b.station_id, b.seq, b.samples.size());
  for (const auto& s : b.samples) {
    out += format_record(s);
    out += '\n';
  }
  out += fmt::format("CRC32,{:08X}\n", crc32_of(out));
  return out;
}

inline SampleBatch parse_batch(std::string_view bytes) {
  if (bytes.empty()) throw Error(ErrorCode::EmptyBatch, "empty input");
  if (bytes.back() != '\n') throw Error(ErrorCode::MalformedRecord, "missing final line terminator");

  // The checksum line is the last line; everything before it is covered.
  const auto body_end = bytes.rfind('\n', bytes.size() - 2);
  if (body_end == std::string_view::npos) throw Error(ErrorCode::MalformedRecord, "missing checksum line");
  const auto body = bytes.substr(0, body_end + 1);
  const auto crc_line = bytes.substr(body_end + 1, bytes.size() - body_end - 2);
  if (crc_line.size() != 14 || crc_line.substr(0, 6) != "CRC32,") {
    throw Error(ErrorCode::MalformedRecord, "malformed checksum line");
  }
  std::uint32_t expected = 0;
  const auto hex = crc_line.substr(6);
  for (char c : hex) {
    if (!std::isxdigit(static_cast<unsigned char>(c))) throw Error(ErrorCode::MalformedRecord, "bad checksum digits");
  }
  std::from_chars(hex.data(), hex.data() + hex.size(), expected, 16);
  if (crc32_of(body) != expected) throw Error(ErrorCode::ChecksumMismatch, "payload does not match CRC32");

  const auto ls = text::lines(body);
  const auto header = text::split(ls.front(), ',');
  if (header.size() != 4 || header[0] != "LCAWS") throw Error(ErrorCode::MalformedRecord, "bad header line");
  SampleBatch b;
  b.station_id = std::string(header[1]);
  if (!valid_station_id(b.station_id)) throw Error(ErrorCode::MalformedRecord, "invalid station id");
  b.seq = text::require_u64(header[2], "seq");
  const auto n = text::require_u64(header[3], "n_records");
  if (n == 0) throw Error(ErrorCode::EmptyBatch, "header declares zero records");
  if (n != ls.size() - 1) {
    throw Error(ErrorCode::MalformedRecord, fmt::format("header declares {} records, found {}", n, ls.size() - 1));
  }
  b.samples.reserve(n);
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto fields = text::split(ls[i], ',');
    b.samples.push_back(parse_record(fields));
  }
  validate_batch(b);
  return b;
}

}  // namespace wxpipe
