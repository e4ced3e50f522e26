#include "attune/log.hpp"

#include <iostream>
#include <mutex>

ATTUNE_NAMESPACE_BEGIN

namespace {

std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

LogLevel& level_ref() {
  static LogLevel level = LogLevel::info;
  return level;
}

const char* label(LogLevel level) {
  switch (level) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
  }
  return "?";
}

LogSink& sink_ref() {
  static LogSink sink = [](LogLevel level, const std::string& msg) {
    std::cerr << "[" << label(level) << "] " << msg << '\n';
  };
  return sink;
}

}  // namespace

void set_log_level(LogLevel level) {
  std::lock_guard lock(log_mutex());
  level_ref() = level;
}

LogLevel log_level() {
  std::lock_guard lock(log_mutex());
  return level_ref();
}

LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(log_mutex());
  LogSink old = std::move(sink_ref());
  sink_ref() = std::move(sink);
  return old;
}

void log(LogLevel level, const std::string& message) {
  std::lock_guard lock(log_mutex());
  if (level < level_ref() || !sink_ref()) return;
  sink_ref()(level, message);
}

ATTUNE_NAMESPACE_END
