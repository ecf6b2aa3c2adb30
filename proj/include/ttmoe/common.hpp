// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ttmoe {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (and the CLI) can map failures to exit codes without string-matching.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct InvalidInputError : Error {
    using Error::Error;
};

// FNV-1a over raw bytes. Used for frozen-weight contracts and config hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t hash_mix(std::uint64_t h, std::uint64_t v) {
    return fnv1a64(&v, sizeof(v), h);
}

} // namespace ttmoe
