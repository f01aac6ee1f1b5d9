#include "mpr/simd/checksum.hpp"

#include <stdexcept>

namespace mpr::simd {

std::string_view to_string(Isa isa) {
    switch (isa) {
        case Isa::avx2: return "avx2";
        case Isa::neon: return "neon";
        case Isa::scalar: break;
    }
    return "scalar";
}

bool isa_supported(Isa isa) {
    switch (isa) {
        case Isa::scalar: return true;
        case Isa::avx2:
#if defined(__x86_64__) || defined(__i386__)
            return __builtin_cpu_supports("avx2");
#else
            return false;
#endif
        case Isa::neon:
#if defined(__aarch64__)
            return true;
#else
            return false;
#endif
    }
    return false;
}

Isa active_isa() {
    static const Isa chosen = [] {
        if (isa_supported(Isa::avx2)) return Isa::avx2;
        if (isa_supported(Isa::neon)) return Isa::neon;
        return Isa::scalar;
    }();
    return chosen;
}

std::uint64_t checksum_with(Isa isa, std::span<const std::byte> bytes) {
    if (!isa_supported(isa)) throw std::invalid_argument("checksum kernel not supported on this CPU");
    switch (isa) {
#if defined(__x86_64__) || defined(__i386__)
        case Isa::avx2: return detail::checksum_avx2(bytes);
#endif
#if defined(__aarch64__)
        case Isa::neon: return detail::checksum_neon(bytes);
#endif
        default: break;
    }
    return detail::checksum_scalar(bytes);
}

std::uint64_t checksum(std::span<const std::byte> bytes) {
    return checksum_with(active_isa(), bytes);
}

}  // namespace mpr::simd
