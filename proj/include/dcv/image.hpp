#pragma once

#include <cstddef>
#include <vector>

namespace dcv {

/// Interleaved row-major pixel grid (height x width x channels), values in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/// Boolean grid, row-major.
struct Mask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<bool> cells;

    Mask() = default;
    Mask(std::size_t h, std::size_t w, bool fill = false) : height(h), width(w), cells(h * w, fill) {}

    bool at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }
    void set(std::size_t y, std::size_t x, bool v = true) { cells[y * width + x] = v; }
    std::size_t count() const {
        std::size_t n = 0;
        for (bool c : cells) n += c ? 1 : 0;
        return n;
    }
    bool operator==(const Mask&) const = default;
};

} // namespace dcv
