#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace splatpaint {

/// Row-major H x W x C raster. Channel-interleaved, origin at the top-left.
template <typename T>
class Image {
public:
    Image() = default;
    Image(int height, int width, int channels = 1, T fill = T{}) {
        if (height < 0 || width < 0 || channels < 1)
            throw std::invalid_argument("Image: bad dimensions");
        h_ = height;
        w_ = width;
        c_ = channels;
        data_.assign(static_cast<std::size_t>(h_) * w_ * c_, fill);
    }

    int height() const { return h_; }
    int width() const { return w_; }
    int channels() const { return c_; }
    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }

    T& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
    const T& at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    bool in_bounds(int y, int x) const { return y >= 0 && y < h_ && x >= 0 && x < w_; }
    bool same_shape(const Image& o) const { return h_ == o.h_ && w_ == o.w_ && c_ == o.c_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Image& o) const {
        return h_ == o.h_ && w_ == o.w_ && c_ == o.c_ && data_ == o.data_;
    }

private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * w_ + x) * c_ + c;
    }

    int h_ = 0, w_ = 0, c_ = 1;
    std::vector<T> data_;
};

using ImageD = Image<double>;
using ImageI = Image<std::int32_t>;

/// Boolean map: 0 = false, anything else = true.
using Mask = Image<std::uint8_t>;

inline std::size_t count_true(const Mask& m) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.data()[i]) ++n;
    return n;
}

inline bool any_true(const Mask& m) { return count_true(m) > 0; }

struct PixelRect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open [x0,x1) x [y0,y1)
    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool empty() const { return x1 <= x0 || y1 <= y0; }
};

/// Tight bounding box of the true pixels; empty rect when the mask is empty.
inline PixelRect mask_bounding_box(const Mask& m) {
    PixelRect r{m.width(), m.height(), 0, 0};
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m.at(y, x)) {
                r.x0 = std::min(r.x0, x);
                r.y0 = std::min(r.y0, y);
                r.x1 = std::max(r.x1, x + 1);
                r.y1 = std::max(r.y1, y + 1);
            }
    if (r.x1 <= r.x0) return PixelRect{};
    return r;
}

struct MaskOffset {
    int dx, dy;
};

/// (2r+1)x(2r+1) square structuring element.
inline std::vector<MaskOffset> square_element(int radius) {
    std::vector<MaskOffset> e;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) e.push_back({dx, dy});
    return e;
}

/// Disc structuring element: offsets with dx^2+dy^2 <= (r+0.5)^2.
/// radius 2 gives the 21-pixel disc inscribed in a 5x5 square.
inline std::vector<MaskOffset> disc_element(int radius) {
    std::vector<MaskOffset> e;
    const double r2 = (radius + 0.5) * (radius + 0.5);
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= r2) e.push_back({dx, dy});
    return e;
}

/// Erosion; out-of-bounds neighbours count as false, so true regions
/// touching the border are eaten from the border too.
inline Mask erode(const Mask& m, const std::vector<MaskOffset>& element) {
    Mask out(m.height(), m.width(), 1, 0);
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            if (!m.at(y, x)) continue;
            bool keep = true;
            for (const auto& o : element) {
                const int ny = y + o.dy, nx = x + o.dx;
                if (!m.in_bounds(ny, nx) || !m.at(ny, nx)) {
                    keep = false;
                    break;
                }
            }
            out.at(y, x) = keep ? 1 : 0;
        }
    return out;
}

inline Mask dilate(const Mask& m, const std::vector<MaskOffset>& element) {
    Mask out(m.height(), m.width(), 1, 0);
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            if (!m.at(y, x)) continue;
            for (const auto& o : element) {
                const int ny = y + o.dy, nx = x + o.dx;
                if (m.in_bounds(ny, nx)) out.at(ny, nx) = 1;
            }
        }
    return out;
}

inline Mask mask_and(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mask_and: shape mismatch");
    Mask out(a.height(), a.width(), 1, 0);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = (a.data()[i] && b.data()[i]) ? 1 : 0;
    return out;
}

inline Mask mask_or(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mask_or: shape mismatch");
    Mask out(a.height(), a.width(), 1, 0);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = (a.data()[i] || b.data()[i]) ? 1 : 0;
    return out;
}

inline Mask mask_not(const Mask& a) {
    Mask out(a.height(), a.width(), 1, 0);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] ? 0 : 1;
    return out;
}

/// a \ b
inline Mask mask_minus(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mask_minus: shape mismatch");
    Mask out(a.height(), a.width(), 1, 0);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = (a.data()[i] && !b.data()[i]) ? 1 : 0;
    return out;
}

/// True iff every true pixel of a is also true in b.
inline bool mask_subset(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mask_subset: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] && !b.data()[i]) return false;
    return true;
}

}  // namespace splatpaint
