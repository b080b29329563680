#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>

#include <fmt/format.h>

#include "wxpipe/error.hpp"

namespace wxpipe {

using Timestamp = std::chrono::sys_seconds;
using std::chrono::hours;
using std::chrono::minutes;
using std::chrono::seconds;

/// "2019-03-01T13:05:00Z"
inline std::string format_iso8601(Timestamp t) {
  using namespace std::chrono;
  const auto day = floor<days>(t);
  const year_month_day ymd{day};
  const hh_mm_ss hms{t - day};
  return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                     hms.hours().count(), hms.minutes().count(), hms.seconds().count());
}

namespace detail {

inline bool parse_fixed_int(std::string_view s, int& out) {
  if (s.empty()) return false;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
  }
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace detail

/// Strict inverse of format_iso8601. Throws MalformedRecord on anything else.
inline Timestamp parse_iso8601(std::string_view s) {
  using namespace std::chrono;
  auto fail = [&] { return Error(ErrorCode::MalformedRecord, "bad timestamp '" + std::string(s) + "'"); };
  if (s.size() != 20 || s[4] != '-' || s[7] != '-' || s[10] != 'T' || s[13] != ':' || s[16] != ':' ||
      s[19] != 'Z') {
    throw fail();
  }
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
  if (!detail::parse_fixed_int(s.substr(0, 4), y) || !detail::parse_fixed_int(s.substr(5, 2), mo) ||
      !detail::parse_fixed_int(s.substr(8, 2), d) || !detail::parse_fixed_int(s.substr(11, 2), h) ||
      !detail::parse_fixed_int(s.substr(14, 2), mi) || !detail::parse_fixed_int(s.substr(17, 2), se)) {
    throw fail();
  }
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || se > 59) throw fail();
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{se};
}

inline Timestamp floor_hour(Timestamp t) { return std::chrono::floor<hours>(t); }

inline bool is_hour_aligned(Timestamp t) { return floor_hour(t) == t; }

}  // namespace wxpipe
