#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "p2ilf/errors.hpp"

namespace p2ilf {

using Pixel = Eigen::Vector2i;

template <typename T>
struct Image {
    int width = 0;
    int height = 0;
    std::vector<T> data;

    Image() = default;
    Image(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    T& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
    const T& at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }

    bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
    size_t size() const { return data.size(); }
};

/// Per-pixel occupancy in [0,1]; hard renders carry only {0,1}.
using SoftMask = Image<double>;

struct Rgb8 {
    uint8_t r = 0;
    uint8_t g = 0;
    uint8_t b = 0;
    bool operator==(const Rgb8&) const = default;
};

// Landmark classes are a per-pixel bitmask: a pixel may carry several.
enum class LandmarkClass : uint8_t {
    Ridge = 1,
    Ligament = 2,
    Silhouette = 4,
};

inline uint8_t class_bit(LandmarkClass c) { return static_cast<uint8_t>(c); }

/// Multi-class 2D landmark raster. Pixel values are class bitmasks.
struct LandmarkMap2D {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> mask;

    LandmarkMap2D() = default;
    LandmarkMap2D(int w, int h) : width(w), height(h), mask(static_cast<size_t>(w) * h, 0) {}

    uint8_t& at(int x, int y) { return mask[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int x, int y) const { return mask[static_cast<size_t>(y) * width + x]; }

    bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

    bool test(int x, int y, LandmarkClass c) const { return (at(x, y) & class_bit(c)) != 0; }
    void set(int x, int y, LandmarkClass c) { at(x, y) |= class_bit(c); }

    std::vector<Pixel> pixels_of(LandmarkClass c) const {
        std::vector<Pixel> out;
        const uint8_t bit = class_bit(c);
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                if (at(x, y) & bit) {
                    out.emplace_back(x, y);
                }
            }
        }
        return out;
    }

    size_t count_of(LandmarkClass c) const {
        size_t n = 0;
        const uint8_t bit = class_bit(c);
        for (uint8_t v : mask) {
            n += (v & bit) != 0;
        }
        return n;
    }

    bool operator==(const LandmarkMap2D&) const = default;
};

// Downsample a landmark map by factor s (0 < s <= 1): a scaled pixel carries
// every class bit that any covering full-resolution pixel carries.
inline LandmarkMap2D downsample(const LandmarkMap2D& map, double s, int out_w, int out_h) {
    LandmarkMap2D out(out_w, out_h);
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            const uint8_t v = map.at(x, y);
            if (!v) {
                continue;
            }
            const int sx = std::min(out_w - 1, static_cast<int>((x + 0.5) * s));
            const int sy = std::min(out_h - 1, static_cast<int>((y + 0.5) * s));
            out.at(sx, sy) |= v;
        }
    }
    return out;
}

inline SoftMask threshold_mask(const SoftMask& m, double thresh = 0.5) {
    SoftMask out(m.width, m.height);
    for (size_t i = 0; i < m.data.size(); ++i) {
        out.data[i] = m.data[i] > thresh ? 1.0 : 0.0;
    }
    return out;
}

} // namespace p2ilf
