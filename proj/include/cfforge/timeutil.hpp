#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cfforge {

// Civil-date conversions (Howard Hinnant's algorithms), UTC only.
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<int>(yoe) + static_cast<int>(era) * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp + (mp < 10 ? 3 : -9);
  y += m <= 2;
}

namespace detail {
inline int parse_fixed_uint(std::string_view s, std::size_t pos, std::size_t len) {
  int v = 0;
  for (std::size_t i = pos; i < pos + len; ++i) {
    if (i >= s.size() || s[i] < '0' || s[i] > '9') return -1;
    v = v * 10 + (s[i] - '0');
  }
  return v;
}
}  // namespace detail

// "YYYY-MM-DD" -> days since the Unix epoch.
inline std::int64_t parse_date(std::string_view s) {
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') {
    throw std::invalid_argument("bad date: " + std::string(s));
  }
  int y = detail::parse_fixed_uint(s, 0, 4);
  int mo = detail::parse_fixed_uint(s, 5, 2);
  int d = detail::parse_fixed_uint(s, 8, 2);
  if (y < 0 || mo < 1 || mo > 12 || d < 1 || d > 31) {
    throw std::invalid_argument("bad date: " + std::string(s));
  }
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
}

// ISO-8601 timestamp -> Unix seconds. Accepts "T" or " " separators, an
// optional trailing "Z" or "+HH:MM"/"-HH:MM" offset, and ignores fractional
// seconds. Everything is normalized to UTC.
inline std::int64_t parse_iso8601(std::string_view s) {
  if (s.size() < 16) throw std::invalid_argument("bad timestamp: " + std::string(s));
  std::int64_t day = parse_date(s.substr(0, 10));
  if (s[10] != 'T' && s[10] != ' ') {
    throw std::invalid_argument("bad timestamp: " + std::string(s));
  }
  int hh = detail::parse_fixed_uint(s, 11, 2);
  int mm = detail::parse_fixed_uint(s, 14, 2);
  if (hh < 0 || hh > 23 || s[13] != ':' || mm < 0 || mm > 59) {
    throw std::invalid_argument("bad timestamp: " + std::string(s));
  }
  int ss = 0;
  std::size_t pos = 16;
  if (s.size() >= 19 && s[16] == ':') {
    ss = detail::parse_fixed_uint(s, 17, 2);
    if (ss < 0 || ss > 60) throw std::invalid_argument("bad timestamp: " + std::string(s));
    pos = 19;
  }
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
  }
  std::int64_t offset = 0;
  if (pos < s.size()) {
    if (s[pos] == 'Z') {
      ++pos;
    } else if (s[pos] == '+' || s[pos] == '-') {
      int sign = s[pos] == '+' ? 1 : -1;
      int oh = detail::parse_fixed_uint(s, pos + 1, 2);
      int om = (pos + 5 < s.size() && s[pos + 3] == ':')
                   ? detail::parse_fixed_uint(s, pos + 4, 2)
                   : detail::parse_fixed_uint(s, pos + 3, 2);
      if (oh < 0 || om < 0) throw std::invalid_argument("bad timestamp: " + std::string(s));
      offset = sign * (oh * 3600 + om * 60);
      pos = s.size();
    }
  }
  if (pos != s.size()) throw std::invalid_argument("bad timestamp: " + std::string(s));
  return day * 86400 + hh * 3600 + mm * 60 + ss - offset;
}

inline std::int64_t utc_day_of(std::int64_t unix_seconds) {
  return unix_seconds >= 0 ? unix_seconds / 86400 : (unix_seconds - 86399) / 86400;
}

inline std::string format_date(std::int64_t day) {
  int y;
  unsigned m, d;
  civil_from_days(day, y, m, d);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", y, m, d);
  return buf;
}

inline std::string format_iso8601(std::int64_t unix_seconds) {
  std::int64_t day = utc_day_of(unix_seconds);
  std::int64_t rem = unix_seconds - day * 86400;
  char buf[24];
  std::snprintf(buf, sizeof(buf), "T%02d:%02d:%02dZ", static_cast<int>(rem / 3600),
                static_cast<int>((rem / 60) % 60), static_cast<int>(rem % 60));
  return format_date(day) + buf;
}

}  // namespace cfforge
