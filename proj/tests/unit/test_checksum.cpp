#include "mpr/simd/checksum.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>
#include <stdexcept>
#include <vector>

using namespace mpr::simd;

namespace {

// Literal definition: A = sum w_i, B = sum (n - i) w_i over zero-padded LE words.
std::uint64_t reference(std::span<const std::byte> bytes) {
    std::size_t n = (bytes.size() + 3) / 4;
    detail::FletcherState state;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t w = 0;
        for (std::size_t k = 0; k < 4 && i * 4 + k < bytes.size(); ++k)
            w |= static_cast<std::uint64_t>(std::to_integer<unsigned>(bytes[i * 4 + k])) << (8 * k);
        state.a += w;
        state.b += static_cast<std::uint64_t>(n - i) * w;
    }
    return detail::finish(state, bytes.size());
}

std::vector<std::byte> random_bytes(std::mt19937_64& rng, std::size_t n) {
    std::vector<std::byte> out(n);
    for (auto& b : out) b = static_cast<std::byte>(rng());
    return out;
}

}  // namespace

TEST_CASE("scalar kernel matches the literal definition") {
    std::mt19937_64 rng(1);
    for (std::size_t n = 0; n < 80; ++n) {
        auto bytes = random_bytes(rng, n);
        CHECK(detail::checksum_scalar(bytes) == reference(bytes));
    }
}

TEST_CASE("every supported kernel agrees with scalar") {
    std::mt19937_64 rng(2);
    std::vector<std::size_t> sizes;
    for (std::size_t n = 0; n <= 300; ++n) sizes.push_back(n);
    for (int i = 0; i < 20; ++i) sizes.push_back(std::uniform_int_distribution<std::size_t>(300, 1 << 20)(rng));
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
        if (!isa_supported(isa)) {
            CHECK_THROWS_AS((void)checksum_with(isa, {}), std::invalid_argument);
            continue;
        }
        for (std::size_t n : sizes) {
            auto bytes = random_bytes(rng, n);
            // unaligned views too
            std::span<const std::byte> view(bytes);
            if (n > 3) view = view.subspan(3);
            CHECK_MESSAGE(checksum_with(isa, view) == detail::checksum_scalar(view),
                          to_string(isa) << " n=" << view.size());
        }
    }
    MESSAGE("active kernel: " << to_string(active_isa()));
}

TEST_CASE("all-ones words exercise modular wrap the same way") {
    std::vector<std::byte> ones(1 << 16, std::byte{0xff});
    CHECK(checksum(ones) == reference(ones));
}

TEST_CASE("single byte changes and transpositions change the checksum") {
    std::mt19937_64 rng(3);
    auto bytes = random_bytes(rng, 4096);
    auto base = checksum(bytes);
    auto flipped = bytes;
    flipped[1000] ^= std::byte{1};
    CHECK(checksum(flipped) != base);
    auto swapped = bytes;
    std::swap_ranges(swapped.begin(), swapped.begin() + 64, swapped.begin() + 64);
    if (!std::equal(swapped.begin(), swapped.end(), bytes.begin())) CHECK(checksum(swapped) != base);
    std::vector<std::byte> shorter(bytes.begin(), bytes.end() - 1);
    CHECK(checksum(shorter) != base);
}
