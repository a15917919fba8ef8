#pragma once

#include <cstdint>
#include <string_view>

namespace bdcp {

// splitmix64 finaliser
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stable per-component seed derived from a run seed and a component name.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view component) {
    return mix64(seed ^ fnv1a(component));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return mix64(seed + mix64(index + 1));
}

} // namespace bdcp
