#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace mpr::simd {

enum class Isa { scalar, avx2, neon };

std::string_view to_string(Isa isa);

/// True when this build has a kernel for `isa` and the CPU can run it.
bool isa_supported(Isa isa);

/// Widest supported kernel; chosen once per process.
Isa active_isa();

/// Fletcher-style 64-bit checksum over little-endian 32-bit words (the tail
/// is zero-padded): A = sum w_i, B = sum (n - i) w_i, both mod 2^64, then
/// mixed with the byte length. Used to compare registered memory regions.
std::uint64_t checksum(std::span<const std::byte> bytes);

/// Runs the kernel for `isa`; throws std::invalid_argument if unsupported.
std::uint64_t checksum_with(Isa isa, std::span<const std::byte> bytes);

namespace detail {

struct FletcherState {
    std::uint64_t a = 0;
    std::uint64_t b = 0;
};

std::uint64_t finish(FletcherState state, std::size_t length);

/// Folds words [first, end) of `bytes` into `state` one at a time.
void fold_scalar(FletcherState& state, std::span<const std::byte> bytes, std::size_t first_word);

std::uint64_t checksum_scalar(std::span<const std::byte> bytes);
std::uint64_t checksum_avx2(std::span<const std::byte> bytes);
std::uint64_t checksum_neon(std::span<const std::byte> bytes);

}  // namespace detail

}  // namespace mpr::simd
