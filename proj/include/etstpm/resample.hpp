#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace etstpm {

// Half-pixel bilinear resampling of one row-major plane:
//   src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
// The arithmetic is pinned so independent implementations agree bit for bit.
template <class T>
void resize_bilinear_plane(const T* src, std::size_t in_h, std::size_t in_w, T* dst, std::size_t out_h,
                           std::size_t out_w) {
    auto coord = [](std::size_t d, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& f) {
        double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        i0 = static_cast<std::size_t>(std::floor(s));
        i1 = std::min(i0 + 1, in - 1);
        f = s - static_cast<double>(i0);
    };
    std::vector<std::size_t> x0(out_w), x1(out_w);
    std::vector<double> fx(out_w);
    for (std::size_t x = 0; x < out_w; ++x) coord(x, in_w, out_w, x0[x], x1[x], fx[x]);
    for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t y0, y1;
        double fy;
        coord(y, in_h, out_h, y0, y1, fy);
        const T* r0 = src + y0 * in_w;
        const T* r1 = src + y1 * in_w;
        for (std::size_t x = 0; x < out_w; ++x) {
            const double top = r0[x0[x]] + (static_cast<double>(r0[x1[x]]) - r0[x0[x]]) * fx[x];
            const double bot = r1[x0[x]] + (static_cast<double>(r1[x1[x]]) - r1[x0[x]]) * fx[x];
            dst[y * out_w + x] = static_cast<T>(top + (bot - top) * fy);
        }
    }
}

/// Nearest neighbour: src = floor(dst * in / out).
template <class T>
void resize_nearest_plane(const T* src, std::size_t in_h, std::size_t in_w, T* dst, std::size_t out_h,
                          std::size_t out_w) {
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = std::min(y * in_h / out_h, in_h - 1);
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t sx = std::min(x * in_w / out_w, in_w - 1);
            dst[y * out_w + x] = src[sy * in_w + sx];
        }
    }
}

} // namespace etstpm
