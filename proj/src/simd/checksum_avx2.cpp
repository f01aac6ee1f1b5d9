// Compiled with -mavx2; only called after a runtime CPU check.
#include "mpr/simd/checksum.hpp"

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>

namespace mpr::simd::detail {

namespace {

std::uint64_t hsum(__m256i v) {
    alignas(32) std::uint64_t lanes[4];
    _mm256_store_si256(reinterpret_cast<__m256i*>(lanes), v);
    return lanes[0] + lanes[1] + lanes[2] + lanes[3];
}

}  // namespace

std::uint64_t checksum_avx2(std::span<const std::byte> bytes) {
    // Per 8-word block: B += 8 * A_before + sum (8 - k) w_k, A += sum w_k.
    // A_before is kept as the running sum of the vector accumulator.
    const std::size_t blocks = bytes.size() / 32;
    const __m256i weights_lo = _mm256_setr_epi64x(8, 7, 6, 5);
    const __m256i weights_hi = _mm256_setr_epi64x(4, 3, 2, 1);
    __m256i acc_a = _mm256_setzero_si256();
    __m256i acc_b = _mm256_setzero_si256();
    __m256i acc_prefix = _mm256_setzero_si256();
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        __m256i words = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(p + blk * 32));
        __m256i lo = _mm256_cvtepu32_epi64(_mm256_castsi256_si128(words));
        __m256i hi = _mm256_cvtepu32_epi64(_mm256_extracti128_si256(words, 1));
        acc_prefix = _mm256_add_epi64(acc_prefix, acc_a);
        acc_b = _mm256_add_epi64(acc_b, _mm256_mul_epu32(lo, weights_lo));
        acc_b = _mm256_add_epi64(acc_b, _mm256_mul_epu32(hi, weights_hi));
        acc_a = _mm256_add_epi64(acc_a, _mm256_add_epi64(lo, hi));
    }
    FletcherState state;
    state.a = hsum(acc_a);
    state.b = hsum(acc_b) + 8 * hsum(acc_prefix);
    fold_scalar(state, bytes, blocks * 8);
    return finish(state, bytes.size());
}

}  // namespace mpr::simd::detail

#endif
