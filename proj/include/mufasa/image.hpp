#pragma once

#include "mufasa/support.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace mufasa {

// Interleaved 8-bit image, row-major, RGB unless stated otherwise.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int x, int y, int c) const {
    return pixels[size_t((y * width + x) * channels + c)];
  }
  std::uint8_t& at(int x, int y, int c) {
    return pixels[size_t((y * width + x) * channels + c)];
  }
};

// Integer id map (instance or class labels); -1 is the reserved ignore id.
struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(int x, int y) const { return ids[size_t(y * width + x)]; }
  std::int32_t& at(int x, int y) { return ids[size_t(y * width + x)]; }
};

// Floating-point image used between preprocessing and feature extraction;
// values nominally in [0, 1].
struct ImageD {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> values;

  double at(int x, int y, int c) const { return values[size_t((y * width + x) * channels + c)]; }
  double& at(int x, int y, int c) { return values[size_t((y * width + x) * channels + c)]; }
};

ImageD to_image_d(const ImageU8& img);
ImageU8 to_image_u8(const ImageD& img);

ImageD resize_bilinear(const ImageD& img, int out_w, int out_h);
LabelImage resize_nearest(const LabelImage& img, int out_w, int out_h);
ImageD crop(const ImageD& img, int x0, int y0, int w, int h);
LabelImage crop(const LabelImage& img, int x0, int y0, int w, int h);
ImageD hflip(const ImageD& img);
LabelImage hflip(const LabelImage& img);

// PNG I/O. The encoder emits uncompressed (stored) zlib streams so outputs
// are byte-deterministic; the decoder handles stored, fixed and dynamic
// Huffman blocks with all five scanline filters, covering files from
// standard encoders as well as our own.
void write_png_rgb8(const std::string& path, const ImageU8& img);
void write_png_gray16(const std::string& path, const std::vector<std::uint16_t>& samples, int width,
                      int height);
// Color-indexed PNG (color type 3). Ids index the palette; ignore ids (-1)
// map to palette entry 0. Ids must be < palette size <= 256.
void write_png_indexed(const std::string& path, const LabelImage& labels,
                       const std::vector<std::array<std::uint8_t, 3>>& palette);

ImageU8 read_png_rgb8(const std::string& path);
std::vector<std::uint16_t> read_png_gray16(const std::string& path, int& width, int& height);

}  // namespace mufasa
