#pragma once

#include <functional>
#include <string>

#include "attune/config.hpp"

ATTUNE_NAMESPACE_BEGIN

enum class LogLevel { debug, info, warning, error };

/// Receives every message at or above the configured level.
using LogSink = std::function<void(LogLevel, const std::string&)>;

void set_log_level(LogLevel level);
LogLevel log_level();
/// Replaces the sink (stderr by default); returns the previous one.
LogSink set_log_sink(LogSink sink);

void log(LogLevel level, const std::string& message);
inline void log_info(const std::string& message) { log(LogLevel::info, message); }
inline void log_warning(const std::string& message) { log(LogLevel::warning, message); }

ATTUNE_NAMESPACE_END
