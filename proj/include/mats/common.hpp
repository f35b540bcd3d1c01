#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mats {

/// Base error for all engine failures.
struct MatsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad input data: dangling references, malformed records, invalid config.
struct ValidationError : MatsError {
    using MatsError::MatsError;
};

/// Environment problems that precede execution: missing files, unopenable
/// databases. Distinct from query-level failures, which are encoded in
/// ExecutionResponse.
struct SetupError : MatsError {
    using MatsError::MatsError;
};

/// Network-level backend failure (retryable).
struct TransportError : MatsError {
    using MatsError::MatsError;
};

/// Backend replied, but the reply is unusable or the request was rejected.
struct BackendError : MatsError {
    using MatsError::MatsError;
};

/// A scripted backend had no queued response for the requested key.
struct FixtureMissError : BackendError {
    using BackendError::BackendError;
};

// ---------------------------------------------------------------------------
// Warning sink. Non-fatal diagnostics (catalog column failures, unparseable
// verdicts, selection fallbacks) go here; tests can capture them.
// ---------------------------------------------------------------------------

using WarnSink = std::function<void(const std::string&)>;

inline WarnSink& warn_sink() {
    static WarnSink sink = [](const std::string& msg) { std::cerr << "[mats] warning: " << msg << "\n"; };
    return sink;
}

inline void warn(const std::string& msg) {
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    if (warn_sink()) warn_sink()(msg);
}

// ---------------------------------------------------------------------------
// Number formatting. Shortest round-trip text for reals, plain digits for
// integers; used for catalog values, prompt rendering and result files.
// ---------------------------------------------------------------------------

inline std::string format_double(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

inline std::string format_int(std::int64_t value) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// FNV-1a content digests: fixture keys and blob normalization.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string digest_hex(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return std::string(buf);
}

inline std::string lowercase(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return out;
}

}  // namespace mats
