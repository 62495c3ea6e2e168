#include "vise/kernels.hpp"

#include <algorithm>
#include <bit>
#include <vector>

namespace vise::kernels::serial {

std::uint64_t popcount(std::span<const std::uint64_t> a) {
    std::uint64_t n = 0;
    for (auto w : a) n += static_cast<std::uint64_t>(std::popcount(w));
    return n;
}

std::uint64_t and_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        n += static_cast<std::uint64_t>(std::popcount(a[i] & b[i]));
    return n;
}

std::uint64_t or_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        n += static_cast<std::uint64_t>(std::popcount(a[i] | b[i]));
    return n;
}

Counts3 confusion(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    Counts3 c;
    for (std::size_t i = 0; i < a.size(); ++i) {
        c.both += static_cast<std::uint64_t>(std::popcount(a[i] & b[i]));
        c.only_a += static_cast<std::uint64_t>(std::popcount(a[i] & ~b[i]));
        c.only_b += static_cast<std::uint64_t>(std::popcount(~a[i] & b[i]));
    }
    return c;
}

void or_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] |= src[i];
}

void and_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] &= src[i];
}

void andnot_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] &= ~src[i];
}

namespace {

// One 1-D window pass over `len` samples spaced `stride` apart.
void morph_line(const std::uint8_t* in, std::uint8_t* out, int len, std::ptrdiff_t stride,
                int radius, bool dilate, std::vector<int>& prefix) {
    prefix.assign(static_cast<std::size_t>(len) + 1, 0);
    for (int i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + (in[i * stride] ? 1 : 0);
    for (int i = 0; i < len; ++i) {
        const int lo = std::max(0, i - radius);
        const int hi = std::min(len, i + radius + 1);
        const int ones = prefix[hi] - prefix[lo];
        out[i * stride] = dilate ? (ones > 0) : (ones == 2 * radius + 1);
    }
}

}  // namespace

void morph(std::span<const std::uint8_t> in, std::span<std::uint8_t> out, int width,
           int height, int radius, bool dilate) {
    std::vector<std::uint8_t> tmp(in.size());
    std::vector<int> prefix;
    for (int y = 0; y < height; ++y)
        morph_line(in.data() + static_cast<std::ptrdiff_t>(y) * width,
                   tmp.data() + static_cast<std::ptrdiff_t>(y) * width, width, 1, radius,
                   dilate, prefix);
    for (int x = 0; x < width; ++x)
        morph_line(tmp.data() + x, out.data() + x, height, width, radius, dilate, prefix);
}

}  // namespace vise::kernels::serial
