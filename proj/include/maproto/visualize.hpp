#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "maproto/tensor.hpp"

namespace maproto {

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples

  std::array<std::uint8_t, 3> at(std::size_t col, std::size_t row) const;
};

/// Binary PPM (P6).
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_ppm(const std::filesystem::path& path);

/// The `count` axial slices with the largest summed weight, in ascending z order.
std::vector<std::size_t> top_slices(const Tensor& weight, std::size_t count);

struct OverlayStyle {
  double alpha = 0.5;  // map opacity at full activation
  std::array<std::uint8_t, 3> contour{0, 255, 0};
};

/// Axial slice `z` of `background` (X, Y, Z) in grey, windowed to its own
/// min..max over the volume, with `map` (values in [0, 1]) alpha-blended as a
/// heat colour and the boundary of `mask` drawn on top. Columns are x, rows are y.
/// An empty mask draws no contour.
RgbImage render_overlay(const Tensor& background, const Tensor& map, const Tensor& mask, std::size_t z,
                        const OverlayStyle& style = {});

/// Heat colour of a value in [0, 1] (black-red-yellow-white); out-of-range values are clamped.
std::array<double, 3> heat(double v);

}  // namespace maproto
