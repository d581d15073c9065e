#pragma once

#include <iostream>
#include <mutex>
#include <string>

namespace apo {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };

inline LogLevel& log_level() {
  static LogLevel level = LogLevel::warn;
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level < log_level()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  const char* tag = level == LogLevel::debug  ? "debug"
                    : level == LogLevel::info ? "info"
                    : level == LogLevel::warn ? "warn"
                                              : "error";
  std::cerr << "[" << tag << "] " << msg << "\n";
}

inline void log_info(const std::string& msg) { log(LogLevel::info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::warn, msg); }
inline void log_error(const std::string& msg) { log(LogLevel::error, msg); }

}  // namespace apo
