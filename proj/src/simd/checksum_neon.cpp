#include "mpr/simd/checksum.hpp"

#if defined(__aarch64__)
#include <arm_neon.h>

namespace mpr::simd::detail {

std::uint64_t checksum_neon(std::span<const std::byte> bytes) {
    // Same blocking as the AVX2 kernel, 4 words per step.
    const std::size_t blocks = bytes.size() / 16;
    const uint32x2_t weights_lo = {4, 3};
    const uint32x2_t weights_hi = {2, 1};
    uint64x2_t acc_a = vdupq_n_u64(0);
    uint64x2_t acc_b = vdupq_n_u64(0);
    uint64x2_t acc_prefix = vdupq_n_u64(0);
    const auto* p = reinterpret_cast<const std::uint32_t*>(bytes.data());
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        uint32x4_t words = vld1q_u32(p + blk * 4);
        acc_prefix = vaddq_u64(acc_prefix, acc_a);
        acc_b = vmlal_u32(acc_b, vget_low_u32(words), weights_lo);
        acc_b = vmlal_u32(acc_b, vget_high_u32(words), weights_hi);
        acc_a = vaddw_u32(vaddw_u32(acc_a, vget_low_u32(words)), vget_high_u32(words));
    }
    FletcherState state;
    state.a = vgetq_lane_u64(acc_a, 0) + vgetq_lane_u64(acc_a, 1);
    state.b = vgetq_lane_u64(acc_b, 0) + vgetq_lane_u64(acc_b, 1) +
              4 * (vgetq_lane_u64(acc_prefix, 0) + vgetq_lane_u64(acc_prefix, 1));
    fold_scalar(state, bytes, blocks * 4);
    return finish(state, bytes.size());
}

}  // namespace mpr::simd::detail

#endif
