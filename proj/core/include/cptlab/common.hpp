// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cptlab {

// Error taxonomy. Everything user-facing derives from Error so callers can
// catch one base; the concrete type tells what went wrong.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {       // dimension mismatch between tensors
    using Error::Error;
};
struct ContractError : Error {    // API misuse (wrong call order, bad argument)
    using Error::Error;
};
struct SpecError : Error {        // inconsistent model/stream/run configuration
    using Error::Error;
};
struct DataError : Error {        // empty or unusable dataset
    using Error::Error;
};
struct DegenerateBatchError : Error {  // a loss was asked for with nothing to predict
    using Error::Error;
};
struct HeadError : Error {        // missing head, or head kind does not match the objective
    using Error::Error;
};
struct CapacityError : Error {    // generator cannot produce the requested number of distinct samples
    using Error::Error;
};
struct IoError : Error {          // file read/write failure or malformed container
    using Error::Error;
};

// FNV-1a, 64-bit. Used for content hashes (sample identity, parameter body
// hashes, manifest hashes). Not cryptographic; collision odds are fine at
// the scales this project handles.
constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
    return fnv1a(&v, sizeof(v), h);
}

std::string to_hex(std::uint64_t v);

}  // namespace cptlab
