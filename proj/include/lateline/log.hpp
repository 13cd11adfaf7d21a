#pragma once

#include <string>

namespace lateline {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

// Level comes from LATELINE_LOG (debug|info|warn|error); default warn.
LogLevel log_level();

void log(LogLevel level, const std::string& msg);

inline void log_debug(const std::string& msg) { log(LogLevel::Debug, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::Warn, msg); }
inline void log_error(const std::string& msg) { log(LogLevel::Error, msg); }

}  // namespace lateline
