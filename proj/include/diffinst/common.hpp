#pragma once

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace diffinst {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2 };

// Verbosity comes from DIFFINST_LOG={debug,info,warn}; default info.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("DIFFINST_LOG");
    if (!env) return LogLevel::kInfo;
    std::string v(env);
    if (v == "debug") return LogLevel::kDebug;
    if (v == "warn") return LogLevel::kWarn;
    return LogLevel::kInfo;
  }();
  return level;
}

inline std::string strprintf(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  char buf[1024];
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

inline void log_at(LogLevel level, const std::string& msg) {
  if (level < log_level()) return;
  const char* tag = level == LogLevel::kDebug  ? "debug"
                    : level == LogLevel::kInfo ? "info"
                                               : "warn";
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_debug(const std::string& msg) { log_at(LogLevel::kDebug, msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::kInfo, msg); }
inline void log_warn(const std::string& msg) { log_at(LogLevel::kWarn, msg); }

// Contract violations (bad arguments, shape mismatches) throw
// std::invalid_argument; IO and runtime failures throw std::runtime_error.
inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace diffinst
