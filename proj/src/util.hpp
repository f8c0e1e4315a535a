#ifndef LW_UTIL_HPP
#define LW_UTIL_HPP

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

namespace lw {

// Error categories map 1:1 onto CLI exit codes / C API status values.
enum class ErrorKind : int {
    usage   = 2,  // bad arguments, malformed config
    data    = 3,  // missing/corrupt files, invariant violations in inputs
    numeric = 4,  // numerical abort (divergence, non-finite values)
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(ErrorKind::usage, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(ErrorKind::numeric, msg); }

enum class LogLevel : int { error = 0, warn = 1, info = 2, debug = 3 };

// Level comes from LATTICEWORLD_LOG (error|warn|info|debug), default info.
inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("LATTICEWORLD_LOG");
        if (env == nullptr) {
            return LogLevel::info;
        }
        if (std::strcmp(env, "error") == 0) return LogLevel::error;
        if (std::strcmp(env, "warn") == 0) return LogLevel::warn;
        if (std::strcmp(env, "info") == 0) return LogLevel::info;
        if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

inline void log_at(LogLevel level, const char* tag, const char* fmt, ...) {
    if (level > log_level()) {
        return;
    }
    std::fprintf(stderr, "[%s] ", tag);
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    va_end(args);
    std::fputc('\n', stderr);
}

#define LW_LOG_ERROR(...) ::lw::log_at(::lw::LogLevel::error, "error", __VA_ARGS__)
#define LW_LOG_WARN(...) ::lw::log_at(::lw::LogLevel::warn, "warn", __VA_ARGS__)
#define LW_LOG_INFO(...) ::lw::log_at(::lw::LogLevel::info, "info", __VA_ARGS__)
#define LW_LOG_DEBUG(...) ::lw::log_at(::lw::LogLevel::debug, "debug", __VA_ARGS__)

// FNV-1a, used for checkpoint section fingerprints.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string format(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    char buf[1024];
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    return std::string(buf);
}

}  // namespace lw

#endif
