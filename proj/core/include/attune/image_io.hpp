#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attune/tensor.hpp"

ATTUNE_NAMESPACE_BEGIN

/// 8-bit raster, row-major, `channels` interleaved values per pixel.
struct Image8 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// [H,W] or [1,H,W] map with values in [0,1] (clipped) to 8-bit gray.
Image8 to_gray8(const Tensor& map);

/// Input in luminance with the attribution alpha-blended in red.
Image8 render_overlay(const Tensor& image, const Tensor& attribution, double max_alpha = 0.75);

/// Images of equal height placed left to right with a `gap`-pixel black gutter.
Image8 side_by_side(const Image8& left, const Image8& right, std::size_t gap = 2);

/// Nearest-neighbour upscaling by an integer factor.
Image8 upscale(const Image8& image, std::size_t factor);

/// Binary PGM (P5). Gray images only.
std::string encode_pgm(const Image8& image);
Image8 decode_pgm(const std::string& bytes);
std::string encode_png(const Image8& image);

void write_pgm(const std::filesystem::path& path, const Image8& image);
void write_png(const std::filesystem::path& path, const Image8& image);

ATTUNE_NAMESPACE_END
