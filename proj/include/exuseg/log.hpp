#pragma once

// Minimal leveled logging to stderr. Verbosity comes from EXUSEG_LOG
// (error|warn|info|debug), default "info".

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>

namespace exuseg::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level parse_level(std::string_view s) {
  if (s == "error") return Level::error;
  if (s == "warn" || s == "warning") return Level::warn;
  if (s == "debug") return Level::debug;
  return Level::info;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("EXUSEG_LOG");
    return env ? parse_level(env) : Level::info;
  }();
  return level;
}

inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(threshold()); }

template <typename... Args>
void write(Level l, const Args&... args) {
  if (!enabled(l)) return;
  static constexpr const char* tags[] = {"error", "warn", "info", "debug"};
  std::ostringstream os;
  os << "[exuseg " << tags[static_cast<int>(l)] << "] ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

template <typename... Args> void error(const Args&... a) { write(Level::error, a...); }
template <typename... Args> void warn(const Args&... a) { write(Level::warn, a...); }
template <typename... Args> void info(const Args&... a) { write(Level::info, a...); }
template <typename... Args> void debug(const Args&... a) { write(Level::debug, a...); }

}  // namespace exuseg::log
