#include "protolab/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <numeric>

namespace protolab {

Image::Image(int w, int h, Rgb fill) : width(w), height(h), background(fill) {
  pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = fill[0];
    pixels[i + 1] = fill[1];
    pixels[i + 2] = fill[2];
  }
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_rows(const std::filesystem::path& path, int width, int height, int color_type,
                int channels, const std::uint8_t* data) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageIoError("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng write failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(r) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any 8-bit PNG, expanding/stripping to `channels` (1 or 3).
std::vector<std::uint8_t> read_rows(const std::filesystem::path& path, int channels, int& width,
                                    int& height) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageIoError("cannot open: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("not a readable PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
  if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const auto rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unexpected PNG layout: " + path.string());
  }
  std::vector<std::uint8_t> data(static_cast<std::size_t>(width) * height * channels);
  for (int r = 0; r < height; ++r) {
    png_read_row(png, data.data() + static_cast<std::size_t>(r) * rowbytes, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return data;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  write_rows(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 3, image.pixels.data());
}

Image read_png(const std::filesystem::path& path) {
  Image image;
  image.pixels = read_rows(path, 3, image.width, image.height);
  image.background = estimate_background(image);
  return image;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> grey(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), grey.begin(),
                 [](std::uint8_t b) { return b ? std::uint8_t{255} : std::uint8_t{0}; });
  write_rows(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, grey.data());
}

Mask read_mask_png(const std::filesystem::path& path) {
  Mask mask;
  auto grey = read_rows(path, 1, mask.width, mask.height);
  mask.bits.resize(grey.size());
  std::transform(grey.begin(), grey.end(), mask.bits.begin(),
                 [](std::uint8_t g) { return g >= 128 ? std::uint8_t{1} : std::uint8_t{0}; });
  return mask;
}

Rgb estimate_background(const Image& image) {
  if (image.width == 0 || image.height == 0) return {128, 128, 128};
  Rgb result{};
  for (int c = 0; c < 3; ++c) {
    std::vector<std::uint8_t> border;
    for (int x = 0; x < image.width; ++x) {
      border.push_back(image.at(0, x, c));
      border.push_back(image.at(image.height - 1, x, c));
    }
    for (int y = 1; y + 1 < image.height; ++y) {
      border.push_back(image.at(y, 0, c));
      border.push_back(image.at(y, image.width - 1, c));
    }
    auto mid = border.begin() + static_cast<std::ptrdiff_t>(border.size() / 2);
    std::nth_element(border.begin(), mid, border.end());
    result[c] = *mid;
  }
  return result;
}

}  // namespace protolab
