#include "vise/mask.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "vise/errors.hpp"
#include "vise/kernels.hpp"

namespace vise {

BoundingBox box_from_real(double x_min, double y_min, double x_max, double y_max) {
    return {static_cast<int>(std::floor(x_min)), static_cast<int>(std::floor(y_min)),
            static_cast<int>(std::ceil(x_max)), static_cast<int>(std::ceil(y_max))};
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
    const int ix0 = std::max(a.x_min, b.x_min);
    const int iy0 = std::max(a.y_min, b.y_min);
    const int ix1 = std::min(a.x_max, b.x_max);
    const int iy1 = std::min(a.y_max, b.y_max);
    const std::int64_t inter =
        (ix1 > ix0 && iy1 > iy0) ? std::int64_t{ix1 - ix0} * std::int64_t{iy1 - iy0} : 0;
    const std::int64_t uni = std::max<std::int64_t>(a.area(), 0) +
                             std::max<std::int64_t>(b.area(), 0) - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::string to_string(const BoundingBox& box) {
    std::ostringstream os;
    os << '[' << box.x_min << ',' << box.y_min << ',' << box.x_max << ',' << box.y_max << ']';
    return os.str();
}

BinaryMask::BinaryMask(int width, int height) : width_(width), height_(height) {
    if (width <= 0 || height <= 0)
        throw BoundsError("mask dimensions must be positive, got " + std::to_string(width) +
                          "x" + std::to_string(height));
    words_.assign((pixel_count() + 63) / 64, 0);
}

void BinaryMask::fill_box(const BoundingBox& box) {
    if (!box.fits(width_, height_))
        throw BoundsError("box " + to_string(box) + " outside " + std::to_string(width_) + "x" +
                          std::to_string(height_) + " image");
    for (int y = box.y_min; y < box.y_max; ++y) {
        std::size_t i = index(box.x_min, y);
        const std::size_t end = index(box.x_max - 1, y) + 1;
        // Partial leading word, whole middle words, partial trailing word.
        while (i < end && (i & 63) != 0) {
            words_[i >> 6] |= std::uint64_t{1} << (i & 63);
            ++i;
        }
        while (i + 64 <= end) {
            words_[i >> 6] = ~std::uint64_t{0};
            i += 64;
        }
        while (i < end) {
            words_[i >> 6] |= std::uint64_t{1} << (i & 63);
            ++i;
        }
    }
}

std::size_t BinaryMask::popcount() const { return kernels::popcount(words_); }

bool BinaryMask::empty() const {
    return std::all_of(words_.begin(), words_.end(), [](std::uint64_t w) { return w == 0; });
}

BoundingBox BinaryMask::bounds() const {
    int x0 = width_, y0 = height_, x1 = -1, y1 = -1;
    for (std::size_t wi = 0; wi < words_.size(); ++wi) {
        std::uint64_t w = words_[wi];
        while (w) {
            const int bit = std::countr_zero(w);
            w &= w - 1;
            const std::size_t i = wi * 64 + static_cast<std::size_t>(bit);
            const int y = static_cast<int>(i / static_cast<std::size_t>(width_));
            const int x = static_cast<int>(i % static_cast<std::size_t>(width_));
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (x1 < 0) return {};
    return {x0, y0, x1 + 1, y1 + 1};
}

BinaryMask mask_from_box(const BoundingBox& box, int width, int height) {
    BinaryMask m(width, height);
    m.fill_box(box);
    return m;
}

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": mask shapes differ (" + std::to_string(a.width()) +
                         "x" + std::to_string(a.height()) + " vs " + std::to_string(b.width()) +
                         "x" + std::to_string(b.height()) + ")");
}

}  // namespace

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "union");
    BinaryMask out = a;
    kernels::or_into(out.words(), b.words());
    return out;
}

BinaryMask mask_intersection(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "intersection");
    BinaryMask out = a;
    kernels::and_into(out.words(), b.words());
    return out;
}

BinaryMask mask_difference(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "difference");
    BinaryMask out = a;
    kernels::andnot_into(out.words(), b.words());
    return out;
}

std::size_t intersection_count(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "intersection_count");
    return kernels::and_count(a.words(), b.words());
}

std::size_t union_count(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "union_count");
    return kernels::or_count(a.words(), b.words());
}

double iou(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "iou");
    const auto c = kernels::confusion(a.words(), b.words());
    const std::uint64_t uni = c.both + c.only_a + c.only_b;
    if (uni == 0) throw EmptyIouError("iou: both masks are empty");
    return static_cast<double>(c.both) / static_cast<double>(uni);
}

PixelTally pixel_tally(const BinaryMask& predicted, const BinaryMask& truth) {
    require_same_shape(predicted, truth, "pixel_tally");
    const auto c = kernels::confusion(predicted.words(), truth.words());
    return {c.both, c.only_a, c.only_b};
}

namespace {

BinaryMask morph(const BinaryMask& mask, int radius, bool grow) {
    if (radius < 0) throw BoundsError("morphology radius must be >= 0");
    if (radius == 0) return mask;
    const int w = mask.width(), h = mask.height();
    std::vector<std::uint8_t> in(mask.pixel_count()), out(mask.pixel_count());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) in[static_cast<std::size_t>(y) * w + x] = mask.test(x, y);
    kernels::morph(in, out, w, h, radius, grow);
    BinaryMask result(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (out[static_cast<std::size_t>(y) * w + x]) result.set(x, y);
    return result;
}

}  // namespace

BinaryMask dilate(const BinaryMask& mask, int radius) { return morph(mask, radius, true); }
BinaryMask erode(const BinaryMask& mask, int radius) { return morph(mask, radius, false); }

BinaryMask clip_to_box(const BinaryMask& mask, const BoundingBox& box) {
    return mask_intersection(mask, mask_from_box(box, mask.width(), mask.height()));
}

RleMask rle_encode(const BinaryMask& mask) {
    RleMask rle{mask.height(), mask.width(), {}};
    bool current = false;
    std::uint64_t run = 0;
    for (int x = 0; x < mask.width(); ++x) {
        for (int y = 0; y < mask.height(); ++y) {
            const bool bit = mask.test(x, y);
            if (bit != current) {
                rle.counts.push_back(run);
                run = 0;
                current = bit;
            }
            ++run;
        }
    }
    rle.counts.push_back(run);
    return rle;
}

BinaryMask rle_decode(const RleMask& rle) {
    if (rle.width <= 0 || rle.height <= 0)
        throw CodecError("rle: non-positive size " + std::to_string(rle.height) + "x" +
                         std::to_string(rle.width));
    const std::uint64_t total = static_cast<std::uint64_t>(rle.width) *
                                static_cast<std::uint64_t>(rle.height);
    if (rle.counts.empty()) throw CodecError("rle: empty counts");
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < rle.counts.size(); ++i) {
        if (i > 0 && rle.counts[i] == 0)
            throw CodecError("rle: zero count at interior position " + std::to_string(i));
        if (rle.counts[i] > total - sum)
            throw CodecError("rle: counts exceed " + std::to_string(total) + " pixels");
        sum += rle.counts[i];
    }
    if (sum != total)
        throw CodecError("rle: counts sum to " + std::to_string(sum) + ", expected " +
                         std::to_string(total));
    if (rle.counts.size() == 1 && rle.counts[0] == 0)
        throw CodecError("rle: zero-length mask");

    BinaryMask mask(rle.width, rle.height);
    std::uint64_t pos = 0;
    const auto h = static_cast<std::uint64_t>(rle.height);
    for (std::size_t i = 0; i < rle.counts.size(); ++i) {
        if (i % 2 == 1) {
            for (std::uint64_t p = pos; p < pos + rle.counts[i]; ++p)
                mask.set(static_cast<int>(p / h), static_cast<int>(p % h));
        }
        pos += rle.counts[i];
    }
    return mask;
}

std::string rle_to_text(const RleMask& rle) {
    std::string out = "{\"size\": [" + std::to_string(rle.height) + ", " +
                      std::to_string(rle.width) + "], \"counts\": [";
    for (std::size_t i = 0; i < rle.counts.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(rle.counts[i]);
    }
    out += "]}";
    return out;
}

RleMask rle_from_text(std::string_view text) {
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw CodecError("rle: not a JSON object");
    if (!j.contains("size") || !j.contains("counts")) throw CodecError("rle: missing size/counts");
    const auto& size = j["size"];
    const auto& counts = j["counts"];
    if (!size.is_array() || size.size() != 2 || !size[0].is_number_integer() ||
        !size[1].is_number_integer())
        throw CodecError("rle: size must be [height, width]");
    if (!counts.is_array()) throw CodecError("rle: counts must be an array");
    RleMask rle;
    const auto h = size[0].get<std::int64_t>();
    const auto w = size[1].get<std::int64_t>();
    if (h <= 0 || w <= 0 || h > (1 << 20) || w > (1 << 20))
        throw CodecError("rle: size out of range");
    rle.height = static_cast<int>(h);
    rle.width = static_cast<int>(w);
    rle.counts.reserve(counts.size());
    for (const auto& c : counts) {
        if (!c.is_number_unsigned() && !(c.is_number_integer() && c.get<std::int64_t>() >= 0))
            throw CodecError("rle: counts must be non-negative integers");
        rle.counts.push_back(c.get<std::uint64_t>());
    }
    return rle;
}

}  // namespace vise
