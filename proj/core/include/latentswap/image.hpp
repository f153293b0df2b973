#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "latentswap/masks.hpp"
#include "latentswap/tensor.hpp"

namespace lswap {

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels, any aspect ratio.
struct ImageBuffer {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0);

  std::uint8_t& at(std::size_t i, std::size_t j, std::size_t c) { return pixels[(i * width + j) * channels + c]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t c) const { return pixels[(i * width + j) * channels + c]; }
  bool operator==(const ImageBuffer&) const = default;
};

/// Pixel p maps to p / 127.5 - 1; H x W x C latent.
Tensor encode(const ImageBuffer& image);
/// Inverse map, clamped to [0, 255], rounded half away from zero.
ImageBuffer decode(const Tensor& latent);

/// Binary P5 (gray) or P6 (RGB), maxval 255.
ImageBuffer read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const ImageBuffer& image);
std::string encode_pnm(const ImageBuffer& image);

/// P5 mask: 0 is background, 255 foreground, anything else is an error.
BinaryMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);
/// 16-bit P5 with values scaled by 65535.
void write_soft_mask(const std::filesystem::path& path, const Tensor& field);

/// Field min-max stretched to 0..255; a constant field becomes mid-gray.
ImageBuffer field_to_gray(const Tensor& field);

}  // namespace lswap
