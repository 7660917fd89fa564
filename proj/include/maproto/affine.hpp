#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "maproto/layers.hpp"

namespace maproto {

/// Spatial rotation (radians about the H, W and D axes, applied in that
/// order) and isotropic scaling about the grid centre.
struct AffineSpec {
  std::array<double, 3> angles{0.0, 0.0, 0.0};
  double scale = 1.0;

  bool is_identity() const { return angles == std::array<double, 3>{0.0, 0.0, 0.0} && scale == 1.0; }
  static AffineSpec identity() { return {}; }
};

struct AffineRange {
  double max_angle = 10.0 * 3.14159265358979323846 / 180.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
};

/// Uniform draw within `range`; the identity is not excluded.
AffineSpec sample_affine(Rng& rng, const AffineRange& range);

/// Forward rotation matrix R; content at offset v from the centre moves to R v * scale.
std::array<double, 9> rotation_matrix(const std::array<double, 3>& angles);

/// Trilinear sampling plan for one grid: for each output voxel, up to eight
/// (input index, weight) taps. Out-of-range taps are dropped (zero padding).
struct ResampleGrid {
  std::array<std::size_t, 3> extent{};
  std::vector<std::int64_t> index;  // 8 per output voxel, -1 for dropped taps
  std::vector<double> weight;       // 8 per output voxel
};

ResampleGrid make_affine_grid(const std::array<std::size_t, 3>& extent, const AffineSpec& spec);

/// Applies a grid to every leading slice of a (..., X, Y, Z) tensor.
Tensor apply_grid(const ResampleGrid& grid, const Tensor& x);
/// Adjoint of apply_grid (scatter), used for gradients.
Tensor apply_grid_transpose(const ResampleGrid& grid, const Tensor& y);

/// Trilinear affine warp of a (..., X, Y, Z) tensor with zero padding.
Tensor affine_apply(const Tensor& x, const AffineSpec& spec);
/// Nearest-neighbour warp, for label masks.
Tensor affine_apply_nearest(const Tensor& x, const AffineSpec& spec);

/// Differentiable warp of an (N, C, X, Y, Z) batch, one spec per sample.
Var affine_transform(const Var& x, const std::vector<AffineSpec>& specs);

/// Half-pixel-centred trilinear resize of a (..., X, Y, Z) tensor.
Tensor resize_trilinear(const Tensor& x, const std::array<std::size_t, 3>& extent);
/// Half-pixel-centred nearest-neighbour resize.
Tensor resize_nearest(const Tensor& x, const std::array<std::size_t, 3>& extent);

/// Spatial extents (last three axes) of a tensor of rank >= 3.
std::array<std::size_t, 3> spatial_extent(const Tensor& x);

}  // namespace maproto
