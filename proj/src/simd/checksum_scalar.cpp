#include "mpr/simd/checksum.hpp"

#include <cstring>

namespace mpr::simd::detail {

std::uint64_t finish(FletcherState state, std::size_t length) {
    std::uint64_t h = state.a ^ ((state.b << 29) | (state.b >> 35)) ^ (length * 0xC2B2AE3D27D4EB4FULL);
    // splitmix64 finalizer
    h ^= h >> 30;
    h *= 0xBF58476D1CE4E5B9ULL;
    h ^= h >> 27;
    h *= 0x94D049BB133111EBULL;
    h ^= h >> 31;
    return h;
}

void fold_scalar(FletcherState& state, std::span<const std::byte> bytes, std::size_t first_word) {
    const std::size_t words = (bytes.size() + 3) / 4;
    for (std::size_t i = first_word; i < words; ++i) {
        std::uint32_t w = 0;
        std::size_t offset = i * 4;
        std::size_t take = bytes.size() - offset < 4 ? bytes.size() - offset : 4;
        unsigned char raw[4] = {0, 0, 0, 0};
        std::memcpy(raw, bytes.data() + offset, take);
        w = static_cast<std::uint32_t>(raw[0]) | (static_cast<std::uint32_t>(raw[1]) << 8) |
            (static_cast<std::uint32_t>(raw[2]) << 16) | (static_cast<std::uint32_t>(raw[3]) << 24);
        state.a += w;
        state.b += state.a;
    }
}

std::uint64_t checksum_scalar(std::span<const std::byte> bytes) {
    FletcherState state;
    fold_scalar(state, bytes, 0);
    return finish(state, bytes.size());
}

}  // namespace mpr::simd::detail
