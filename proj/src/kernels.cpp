#include "vise/kernels.hpp"

namespace vise::kernels {

namespace {
bool big(std::size_t words) { return words >= kParallelWords; }
}  // namespace

std::uint64_t popcount(std::span<const std::uint64_t> a) {
    return big(a.size()) ? parallel::popcount(a) : serial::popcount(a);
}
std::uint64_t and_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    return big(a.size()) ? parallel::and_count(a, b) : serial::and_count(a, b);
}
std::uint64_t or_count(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    return big(a.size()) ? parallel::or_count(a, b) : serial::or_count(a, b);
}
Counts3 confusion(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    return big(a.size()) ? parallel::confusion(a, b) : serial::confusion(a, b);
}
void or_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    big(dst.size()) ? parallel::or_into(dst, src) : serial::or_into(dst, src);
}
void and_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    big(dst.size()) ? parallel::and_into(dst, src) : serial::and_into(dst, src);
}
void andnot_into(std::span<std::uint64_t> dst, std::span<const std::uint64_t> src) {
    big(dst.size()) ? parallel::andnot_into(dst, src) : serial::andnot_into(dst, src);
}
void morph(std::span<const std::uint8_t> in, std::span<std::uint8_t> out, int width,
           int height, int radius, bool dilate) {
    // 64 pixels per word, so compare against the same threshold in pixels.
    if (in.size() >= kParallelWords * 64)
        parallel::morph(in, out, width, height, radius, dilate);
    else
        serial::morph(in, out, width, height, radius, dilate);
}

}  // namespace vise::kernels
