#include "dcv/log.hpp"

#include <atomic>
#include <iostream>

namespace dcv {

namespace {
std::atomic<LogLevel> g_level{LogLevel::warning};
}

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warning(std::string_view message) {
    if (g_level >= LogLevel::warning) std::clog << "warning: " << message << '\n';
}

void log_info(std::string_view message) {
    if (g_level >= LogLevel::info) std::clog << message << '\n';
}

} // namespace dcv
