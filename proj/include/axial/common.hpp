#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace axial {

// Error taxonomy used across the library. Every guard throws one of these so
// callers (and the CLI exit-code mapping) can tell usage problems from
// numerical failures.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
// Querying a gradient that was never produced (detached tensor, or backward
// not run).
struct GradientError : Error {
    using Error::Error;
};
// A user-supplied function produced a non-finite value.
struct EvalError : Error {
    using Error::Error;
};
// Oracle guard: shape too large for the O(h^2 w^2) reference path.
struct SizeError : Error {
    using Error::Error;
};
// Global-span layer asked to run on an axis longer than it was built for.
struct SpanOverflowError : Error {
    using Error::Error;
};
// Checkpoint container problems, split by cause.
struct FormatError : Error {
    using Error::Error;
};
struct CorruptionError : Error {
    using Error::Error;
};
struct VersionError : Error {
    using Error::Error;
};

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(s.data(), s.size());
}

}  // namespace axial
