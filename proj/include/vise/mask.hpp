#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vise {

/// Half-open integer pixel box [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    int width() const { return x_max - x_min; }
    int height() const { return y_max - y_min; }
    std::int64_t area() const {
        return static_cast<std::int64_t>(width()) * static_cast<std::int64_t>(height());
    }
    bool valid() const { return x_min < x_max && y_min < y_max; }
    bool fits(int image_width, int image_height) const {
        return valid() && x_min >= 0 && y_min >= 0 && x_max <= image_width &&
               y_max <= image_height;
    }
    bool contains(int x, int y) const {
        return x >= x_min && x < x_max && y >= y_min && y < y_max;
    }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Rounds wire coordinates outward: min edges floor, max edges ceil.
BoundingBox box_from_real(double x_min, double y_min, double x_max, double y_max);

/// Box-to-box IoU over pixel areas. Returns 0 when both are degenerate.
double box_iou(const BoundingBox& a, const BoundingBox& b);

std::string to_string(const BoundingBox& box);

/// Dense row-major bitset mask. Bit (y * width + x) is pixel (x, y); padding bits
/// past width*height in the last word are always zero.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height);

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t pixel_count() const {
        return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
    }

    bool test(int x, int y) const {
        const std::size_t i = index(x, y);
        return (words_[i >> 6] >> (i & 63)) & 1u;
    }
    void set(int x, int y, bool on = true) {
        const std::size_t i = index(x, y);
        const std::uint64_t bit = std::uint64_t{1} << (i & 63);
        if (on)
            words_[i >> 6] |= bit;
        else
            words_[i >> 6] &= ~bit;
    }
    void fill_box(const BoundingBox& box);

    std::size_t popcount() const;
    bool empty() const;
    bool same_shape(const BinaryMask& other) const {
        return width_ == other.width_ && height_ == other.height_;
    }

    std::span<const std::uint64_t> words() const { return words_; }
    std::span<std::uint64_t> words() { return words_; }

    /// Tight bounding box of the foreground; invalid (all zero) when empty.
    BoundingBox bounds() const;

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint64_t> words_;
};

/// Column-major run lengths, alternating background/foreground, leading
/// background run first (may be 0).
struct RleMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint64_t> counts;

    friend bool operator==(const RleMask&, const RleMask&) = default;
};

BinaryMask mask_from_box(const BoundingBox& box, int width, int height);

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_intersection(const BinaryMask& a, const BinaryMask& b);
/// a AND NOT b
BinaryMask mask_difference(const BinaryMask& a, const BinaryMask& b);

std::size_t intersection_count(const BinaryMask& a, const BinaryMask& b);
std::size_t union_count(const BinaryMask& a, const BinaryMask& b);

/// |a & b| / |a | b|. Throws EmptyIouError when both masks are empty.
double iou(const BinaryMask& a, const BinaryMask& b);

/// Per-pixel agreement of a prediction against ground truth.
struct PixelTally {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    friend bool operator==(const PixelTally&, const PixelTally&) = default;
};
PixelTally pixel_tally(const BinaryMask& predicted, const BinaryMask& truth);

/// Square (Chebyshev) structuring element of the given radius. Pixels outside the
/// image never count as foreground.
BinaryMask dilate(const BinaryMask& mask, int radius);
BinaryMask erode(const BinaryMask& mask, int radius);

/// Zeroes everything outside the box.
BinaryMask clip_to_box(const BinaryMask& mask, const BoundingBox& box);

RleMask rle_encode(const BinaryMask& mask);
BinaryMask rle_decode(const RleMask& rle);

/// `{"size": [height, width], "counts": [c0, c1, ...]}`
std::string rle_to_text(const RleMask& rle);
RleMask rle_from_text(std::string_view text);

}  // namespace vise
