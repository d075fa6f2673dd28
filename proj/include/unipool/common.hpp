#pragma once

// Shared plumbing: error taxonomy, tool version, checked-mode switch,
// config hashing, and the deterministic RNG used everywhere.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace unipool {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Error taxonomy. CLI maps these onto exit codes: ConfigError -> 2,
// NumericError -> 3, IoError -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// Checked mode: kernels and route() validate inputs for non-finite values.
// Off by default (it costs a pass over the data); tests and the trainer's
// abort path switch it on where the contract demands detection.
inline std::atomic<bool>& checked_mode_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}
inline void set_checked_mode(bool on) { checked_mode_flag().store(on); }
inline bool checked_mode() { return checked_mode_flag().load(); }

// FNV-1a over a canonical string; stable fingerprint for configs/artifacts.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    static const char* digits = "0123456789abcdef";
    for (int i = 15; i >= 0; --i) {
        buf[i] = digits[v & 0xf];
        v >>= 4;
    }
    buf[16] = '\0';
    return std::string(buf);
}

// Deterministic RNG. mt19937_64 engine with hand-rolled bounded/gaussian
// draws: std::normal_distribution keeps a cached spare sample that would
// have to be serialized for bit-exact checkpoint resume, so we avoid it.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, n) by rejection; no modulo bias, fully self-defined.
    std::uint64_t bounded(std::uint64_t n) {
        if (n == 0) throw ConfigError("Rng::bounded: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    // Uniform in (0, 1]: 53 mantissa bits, never returns 0 (log-safe).
    double uniform_open() {
        return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
    }

    // Box-Muller without the spare: two uniforms per gaussian. Slower but
    // stateless beyond the engine, which keeps serialization trivial.
    double gaussian() {
        const double u1 = uniform_open();
        const double u2 = uniform_open();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw IoError("Rng::restore: malformed engine state");
    }

private:
    std::mt19937_64 engine_;
};

// Thread cap, read from UNIPOOL_LAB_THREADS (default 1: everything is
// bit-deterministic serially; >1 only fans out read-only probe clones).
int thread_cap();

}  // namespace unipool
