#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace protolab {

using Rgb = std::array<std::uint8_t, 3>;

// Interleaved 8-bit RGB image. `background` carries the tint used when a
// transform has to fill pixels that fall outside the source.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
  Rgb background{128, 128, 128};

  Image() = default;
  Image(int w, int h, Rgb fill);

  std::uint8_t& at(int row, int col, int channel) {
    return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  std::uint8_t at(int row, int col, int channel) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  bool operator==(const Image& other) const {
    return width == other.width && height == other.height && pixels == other.pixels;
  }
};

// Single-channel binary grid, same layout as Image without channels.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int row, int col) { return bits[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return bits[static_cast<std::size_t>(row) * width + col]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Masks are stored as 8-bit greyscale, 255 for set pixels.
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
Mask read_mask_png(const std::filesystem::path& path);

// Estimates the background tint as the per-channel median of the border pixels.
Rgb estimate_background(const Image& image);

}  // namespace protolab
