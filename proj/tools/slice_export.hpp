#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm::tools {

enum class Axis { x, y, z };

Axis parse_axis(const std::string& s);

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, top row first
};

/// Linear window [lo, hi] to 0..255 with clamping. Rounding is half-up:
/// pixel = floor(255 (v - lo) / (hi - lo) + 0.5), so 0.5 in [0, 1] gives 128.
std::uint8_t window_pixel(double v, double lo, double hi);

/// Slice perpendicular to `axis` at `index`. Image columns/rows are
/// (x, y) for axis z, (x, z) for axis y and (y, z) for axis x.
GrayImage extract_slice(const Volume& vol, Axis axis, std::size_t index, double lo, double hi);

/// Binary portable graymap (P5, maxval 255).
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);

}  // namespace qsm::tools
