#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>

#include "msce/log.hpp"
#include "msce/parallel.hpp"

namespace msce {
namespace {

std::atomic<unsigned> g_thread_limit{0};
std::atomic<LogLevel> g_log_level{LogLevel::warning};
std::mutex g_log_mutex;

unsigned env_threads() {
  const char* v = std::getenv("MSCE_THREADS");
  if (!v || !*v) return 0;
  try {
    const long n = std::stol(v);
    return n > 0 ? static_cast<unsigned>(n) : 0;
  } catch (...) {
    return 0;
  }
}

const char* level_name(LogLevel l) {
  switch (l) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
    default: return "";
  }
}

}  // namespace

void set_thread_limit(unsigned n) { g_thread_limit = n; }

unsigned thread_limit() {
  unsigned n = g_thread_limit.load();
  if (n == 0) n = env_threads();
  if (n == 0) n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

void set_log_level(LogLevel level) { g_log_level = level; }
LogLevel log_level() { return g_log_level.load(); }

void log(LogLevel level, std::string_view message) {
  if (level < g_log_level.load() || level == LogLevel::quiet) return;
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << level_name(level) << ": " << message << '\n';
}

}  // namespace msce
