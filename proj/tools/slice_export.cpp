#include "slice_export.hpp"

#include <cmath>
#include <string>

#include "qsm/error.hpp"

namespace qsm::tools {

Axis parse_axis(const std::string& s) {
  if (s == "x") return Axis::x;
  if (s == "y") return Axis::y;
  if (s == "z") return Axis::z;
  fail(ErrorCode::invalid_argument, "axis must be x, y or z, got '" + s + "'");
}

std::uint8_t window_pixel(double v, double lo, double hi) {
  const double t = std::floor(255.0 * (v - lo) / (hi - lo) + 0.5);
  if (!(t > 0.0)) return 0;
  if (t >= 255.0) return 255;
  return static_cast<std::uint8_t>(t);
}

GrayImage extract_slice(const Volume& vol, Axis axis, std::size_t index, double lo, double hi) {
  if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
    fail(ErrorCode::invalid_argument, "window must satisfy lo < hi");
  }
  const Dims d = vol.dims();
  const std::size_t depth = axis == Axis::x ? d.nx : axis == Axis::y ? d.ny : d.nz;
  if (index >= depth) {
    fail(ErrorCode::invalid_argument, "slice index " + std::to_string(index) + " out of range [0, " +
                                          std::to_string(depth) + ")");
  }
  GrayImage img;
  img.width = axis == Axis::x ? d.ny : d.nx;
  img.height = axis == Axis::z ? d.ny : d.nz;
  img.pixels.resize(img.width * img.height);
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      double v = 0.0;
      switch (axis) {
        case Axis::z: v = vol.at(c, r, index); break;
        case Axis::y: v = vol.at(c, index, r); break;
        case Axis::x: v = vol.at(index, c, r); break;
      }
      img.pixels[r * img.width + c] = window_pixel(v, lo, hi);
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

}  // namespace qsm::tools
