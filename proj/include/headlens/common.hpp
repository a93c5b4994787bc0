#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace headlens {

// Contract violations: a caller broke a documented precondition.
class ContractError : public std::invalid_argument {
  public:
    explicit ContractError(const std::string &msg) : std::invalid_argument(msg) {}
};

// Numeric failures: NaN/Inf intermediates, divergence.
class NumericError : public std::runtime_error {
  public:
    explicit NumericError(const std::string &msg) : std::runtime_error(msg) {}
};

// Bad run configuration (sizes that do not fit, unknown ids, ...).
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string &msg) : std::runtime_error(msg) {}
};

// File format / filesystem problems.
class IoError : public std::runtime_error {
  public:
    explicit IoError(const std::string &msg) : std::runtime_error(msg) {}
};

inline void check_contract(bool ok, const std::string &msg) {
    if (!ok) throw ContractError(msg);
}

inline void check_config(bool ok, const std::string &msg) {
    if (!ok) throw ConfigError(msg);
}

// FNV-1a, used for artifact fingerprints.
inline uint64_t fnv1a(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ull) {
    uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string to_hex(uint64_t v);

// Evaluation parallelism cap. HEADLENS_THREADS, default 1 so that runs are
// bit-deterministic without any opt-in.
int eval_thread_cap();

// Runs fn(i) for i in [0, n). Results must be written to per-index slots by
// the caller and reduced in ascending order afterwards; this function only
// schedules. With cap 1 it is a plain loop.
void parallel_for_indexed(int64_t n, const std::function<void(int64_t)> &fn);

}  // namespace headlens
