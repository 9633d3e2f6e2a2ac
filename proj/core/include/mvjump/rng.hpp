#pragma once

#include <cstdint>
#include <random>

namespace mvj {

// splitmix64 (Steele/Lea/Flood). Used only to derive substream seeds; the
// streams themselves are mt19937_64. One path = one substream, keyed by a
// global path index, so results never depend on how paths are sharded over
// worker threads.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Documented substream derivation: (root, stream_index) -> generator.
// root is xor-folded with the index through one splitmix step, then four
// warm-up outputs feed a seed_seq. Distinct indices give independent-enough
// streams for Monte Carlo purposes and the derivation is stable across
// platforms (all integer arithmetic).
inline std::mt19937_64 substream(std::uint64_t root, std::uint64_t stream_index) {
    std::uint64_t s = root ^ (0xD1B54A32D192ED03ULL * (stream_index + 1));
    std::uint64_t a = splitmix64(s);
    std::uint64_t b = splitmix64(s);
    std::uint64_t c = splitmix64(s);
    std::uint64_t d = splitmix64(s);
    std::seed_seq seq{
        static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
        static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
        static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
        static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d >> 32)};
    return std::mt19937_64(seq);
}

// Derive a child root seed for a named sub-population (e.g. the primed bank,
// or Picard stage k) so sub-populations never collide with main-path streams.
inline std::uint64_t child_root(std::uint64_t root, std::uint64_t tag) {
    std::uint64_t s = root + 0x9E3779B97F4A7C15ULL * (tag + 0x632BE59BD9B4E019ULL);
    return splitmix64(s);
}

} // namespace mvj
