#pragma once

// Word-level bitset kernels. `serial` is the reference implementation kept for
// testing; `parallel` splits the word range across OpenMP threads. The unqualified
// entry points pick one by problem size.

#include <cstddef>
#include <cstdint>
#include <span>

namespace vise::kernels {

struct Counts3 {
    std::uint64_t both = 0;     // a & b
    std::uint64_t only_a = 0;   // a & ~b
    std::uint64_t only_b = 0;   // ~a & b
};

namespace serial {
std::uint64_t popcount(std::span<const std::uint64_t> a);
std::uint64_t and_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
std::uint64_t or_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
Counts3 confusion(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
void or_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void and_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void andnot_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
/// Sliding max (dilate=true) or min over a square window on a byte image.
void morph(std::span<const std::uint8_t> in, std::span<std::uint8_t> out, int width,
           int height, int radius, bool dilate);
}  // namespace serial

namespace parallel {
std::uint64_t popcount(std::span<const std::uint64_t> a);
std::uint64_t and_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
std::uint64_t or_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
Counts3 confusion(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
void or_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void and_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void andnot_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void morph(std::span<const std::uint8_t> in, std::span<std::uint8_t> out, int width,
           int height, int radius, bool dilate);
}  // namespace parallel

/// Word count above which the dispatching entry points go parallel.
inline constexpr std::size_t kParallelWords = std::size_t{1} << 15;

std::uint64_t popcount(std::span<const std::uint64_t> a);
std::uint64_t and_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
std::uint64_t or_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
Counts3 confusion(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);
void or_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void and_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void andnot_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src);
void morph(std::span<const std::uint8_t> in, std::span<std::uint8_t> out, int width,
           int height, int radius, bool dilate);

}  // namespace vise::kernels
