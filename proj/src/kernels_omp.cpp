#include "vise/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <bit>
#include <vector>

namespace vise::kernels::parallel {

std::uint64_t popcount(std::span<const std::uint64_t> a) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
    const std::uint64_t* p = a.data();
    std::uint64_t total = 0;
#pragma omp parallel for reduction(+ : total) schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) total += static_cast<std::uint64_t>(std::popcount(p[i]));
    return total;
}

std::uint64_t and_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
    const std::uint64_t* pa = a.data();
    const std::uint64_t* pb = b.data();
    std::uint64_t total = 0;
#pragma omp parallel for reduction(+ : total) schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        total += static_cast<std::uint64_t>(std::popcount(pa[i] & pb[i]));
    return total;
}

std::uint64_t or_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
    const std::uint64_t* pa = a.data();
    const std::uint64_t* pb = b.data();
    std::uint64_t total = 0;
#pragma omp parallel for reduction(+ : total) schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        total += static_cast<std::uint64_t>(std::popcount(pa[i] | pb[i]));
    return total;
}

Counts3 confusion(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
    const std::uint64_t* pa = a.data();
    const std::uint64_t* pb = b.data();
    std::uint64_t both = 0, only_a = 0, only_b = 0;
#pragma omp parallel for reduction(+ : both, only_a, only_b) schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        both += static_cast<std::uint64_t>(std::popcount(pa[i] & pb[i]));
        only_a += static_cast<std::uint64_t>(std::popcount(pa[i] & ~pb[i]));
        only_b += static_cast<std::uint64_t>(std::popcount(~pa[i] & pb[i]));
    }
    return {both, only_a, only_b};
}

void or_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(dst.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) dst[i] |= src[i];
}

void and_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(dst.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) dst[i] &= src[i];
}

void andnot_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(dst.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) dst[i] &= ~src[i];
}

void morph(std::span<const std::uint8_t> in, std::span<std::uint8_t> out, int width,
           int height, int radius, bool dilate) {
    std::vector<std::uint8_t> tmp(in.size());
    auto pass = [&](const std::uint8_t* src, std::uint8_t* dst, int len, std::ptrdiff_t stride,
                    std::vector<int>& prefix) {
        prefix.assign(static_cast<std::size_t>(len) + 1, 0);
        for (int i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + (src[i * stride] ? 1 : 0);
        for (int i = 0; i < len; ++i) {
            const int lo = std::max(0, i - radius);
            const int hi = std::min(len, i + radius + 1);
            const int ones = prefix[hi] - prefix[lo];
            dst[i * stride] = dilate ? (ones > 0) : (ones == 2 * radius + 1);
        }
    };
#pragma omp parallel
    {
        std::vector<int> prefix;
#pragma omp for schedule(static)
        for (int y = 0; y < height; ++y)
            pass(in.data() + static_cast<std::ptrdiff_t>(y) * width,
                 tmp.data() + static_cast<std::ptrdiff_t>(y) * width, width, 1, prefix);
#pragma omp for schedule(static)
        for (int x = 0; x < width; ++x)
            pass(tmp.data() + x, out.data() + x, height, width, prefix);
    }
}

}  // namespace vise::kernels::parallel
