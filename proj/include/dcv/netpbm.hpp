#pragma once

#include <filesystem>
#include <span>

#include "dcv/image.hpp"

namespace dcv {

/// Binary P6; values are quantized to round(255 * v).
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Binary P4; a set cell is written as a black (1) bit.
void write_pbm(const std::filesystem::path& path, const Mask& mask);
Mask read_pbm(const std::filesystem::path& path);

/// Binary P5, 8-bit, min-max normalized (a constant input maps to 0).
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> values);

/// Nearest-neighbour expansion of a grid mask by `factor` in each direction.
Mask expand_mask(const Mask& mask, std::size_t factor);

} // namespace dcv
