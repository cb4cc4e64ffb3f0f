#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "repcn/tensor.hpp"

namespace repcn {

// 8-bit grayscale raster as stored in a binary PGM (P5, maxval 255).
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, height * width
};

void write_pgm(std::ostream& out, const GrayImage& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(std::istream& in);
GrayImage read_pgm(const std::filesystem::path& path);

// [-1,1] -> 0..255 with rounding; values outside are clamped.
GrayImage image_to_gray(std::span<const float> values, std::size_t height, std::size_t width);
// 0/1 -> 0/255.
GrayImage mask_to_gray(std::span<const float> values, std::size_t height, std::size_t width);

// 0..255 -> [-1,1], shape [1,H,W].
Tensor<float> gray_to_image(const GrayImage& image);
// Pixels >= 128 become 1, others 0; shape [1,H,W].
Tensor<float> gray_to_mask(const GrayImage& image);

}  // namespace repcn
