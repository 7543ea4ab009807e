#pragma once

// Shared basics: scalar type, error types, hashing, env switches and a
// small deterministic parallel-for used by batch-level code.

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lpt {

#ifdef LPT_USE_FLOAT32
using real = float;
#else
using real = double;
#endif

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for an op; message names the op and shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Tape misuse: backward on a consumed tape, non-scalar loss, mixed tapes.
struct TapeError : Error {
    using Error::Error;
};

// Invalid configuration (cross-field constraint violations, bad values).
struct ConfigError : Error {
    using Error::Error;
};

// File format / filesystem failures; message carries path and offsets.
struct IoError : Error {
    using Error::Error;
};

// Numeric contract violations (non-finite gradient, log of non-positive).
struct NumericError : Error {
    using Error::Error;
};

enum class BatchKind { Balanced, Instance };

inline std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// FNV-1a 64-bit, used for config digests and byte-level state digests.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline bool reference_mode() {
    const char* v = std::getenv("LPT_REFERENCE_MODE");
    return v != nullptr && v[0] == '1';
}

inline int thread_count() {
    if (reference_mode()) return 1;
    if (const char* v = std::getenv("LPT_THREADS")) {
        int n = std::atoi(v);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return static_cast<int>(hw > 16 ? 16 : hw);
}

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks whose
// boundaries depend only on n, never on the thread count, so callers that
// reduce per-chunk results in chunk order get bit-identical sums at any
// parallelism level (including reference mode).
inline constexpr int kReduceChunks = 8;

inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    int threads = thread_count();
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    size_t per = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        size_t lo = t * per;
        size_t hi = lo + per < n ? lo + per : n;
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace lpt
