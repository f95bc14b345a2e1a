#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace aga {

using Rng = std::mt19937_64;

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Independent generator for a named purpose ("corpus", "init", "shuffle", ...).
inline Rng make_stream(std::uint64_t seed, std::string_view name) {
    const std::uint64_t tag = fnv1a64(name);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
    return Rng(seq);
}

}  // namespace aga
