#include "maproto/affine.hpp"

#include <cmath>
#include <stdexcept>

namespace maproto {

std::array<std::size_t, 3> spatial_extent(const Tensor& x) {
  if (x.rank() < 3) throw std::invalid_argument("spatial tensor needs rank >= 3, got " + shape_str(x.shape()));
  const std::size_t r = x.rank();
  return {x.dim(r - 3), x.dim(r - 2), x.dim(r - 1)};
}

AffineSpec sample_affine(Rng& rng, const AffineRange& range) {
  std::uniform_real_distribution<double> angle(-range.max_angle, range.max_angle);
  std::uniform_real_distribution<double> scale(range.min_scale, range.max_scale);
  AffineSpec s;
  for (auto& a : s.angles) a = angle(rng);
  s.scale = scale(rng);
  return s;
}

std::array<double, 9> rotation_matrix(const std::array<double, 3>& angles) {
  const double ca = std::cos(angles[0]), sa = std::sin(angles[0]);
  const double cb = std::cos(angles[1]), sb = std::sin(angles[1]);
  const double cg = std::cos(angles[2]), sg = std::sin(angles[2]);
  // R = Rd(g) * Rw(b) * Rh(a)
  const std::array<double, 9> rh{1, 0, 0, 0, ca, -sa, 0, sa, ca};
  const std::array<double, 9> rw{cb, 0, sb, 0, 1, 0, -sb, 0, cb};
  const std::array<double, 9> rd{cg, -sg, 0, sg, cg, 0, 0, 0, 1};
  auto mm = [](const std::array<double, 9>& a, const std::array<double, 9>& b) {
    std::array<double, 9> c{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
  };
  return mm(rd, mm(rw, rh));
}

ResampleGrid make_affine_grid(const std::array<std::size_t, 3>& extent, const AffineSpec& spec) {
  if (!(spec.scale > 0.0)) throw std::invalid_argument("affine: scale must be positive");
  ResampleGrid g;
  g.extent = extent;
  const std::size_t V = extent[0] * extent[1] * extent[2];
  g.index.assign(V * 8, -1);
  g.weight.assign(V * 8, 0.0);
  const auto R = rotation_matrix(spec.angles);
  const double c[3] = {(extent[0] - 1.0) / 2.0, (extent[1] - 1.0) / 2.0, (extent[2] - 1.0) / 2.0};
  const double inv_s = 1.0 / spec.scale;
  std::size_t o = 0;
  for (std::size_t x = 0; x < extent[0]; ++x)
    for (std::size_t y = 0; y < extent[1]; ++y)
      for (std::size_t z = 0; z < extent[2]; ++z, ++o) {
        const double v[3] = {x - c[0], y - c[1], z - c[2]};
        double q[3];
        // Inverse map: q = c + R^T v / s.
        for (int i = 0; i < 3; ++i) q[i] = c[i] + (R[0 * 3 + i] * v[0] + R[1 * 3 + i] * v[1] + R[2 * 3 + i] * v[2]) * inv_s;
        std::int64_t base[3];
        double t[3];
        for (int i = 0; i < 3; ++i) {
          const double f = std::floor(q[i]);
          base[i] = static_cast<std::int64_t>(f);
          t[i] = q[i] - f;
        }
        for (int k = 0; k < 8; ++k) {
          const int dx = (k >> 2) & 1, dy = (k >> 1) & 1, dz = k & 1;
          const std::int64_t ix = base[0] + dx, iy = base[1] + dy, iz = base[2] + dz;
          const double w = (dx ? t[0] : 1.0 - t[0]) * (dy ? t[1] : 1.0 - t[1]) * (dz ? t[2] : 1.0 - t[2]);
          if (ix < 0 || iy < 0 || iz < 0 || ix >= static_cast<std::int64_t>(extent[0]) ||
              iy >= static_cast<std::int64_t>(extent[1]) || iz >= static_cast<std::int64_t>(extent[2]) || w == 0.0) {
            continue;
          }
          g.index[o * 8 + k] = (ix * static_cast<std::int64_t>(extent[1]) + iy) * static_cast<std::int64_t>(extent[2]) + iz;
          g.weight[o * 8 + k] = w;
        }
      }
  return g;
}

namespace {

std::size_t leading_slices(const Tensor& x, const ResampleGrid& g) {
  if (spatial_extent(x) != g.extent) throw std::invalid_argument("resample grid extent mismatch for " + shape_str(x.shape()));
  return x.numel() / (g.extent[0] * g.extent[1] * g.extent[2]);
}

}  // namespace

Tensor apply_grid(const ResampleGrid& g, const Tensor& x) {
  const std::size_t slices = leading_slices(x, g);
  const std::size_t V = g.extent[0] * g.extent[1] * g.extent[2];
  Tensor out(x.shape());
  for (std::size_t s = 0; s < slices; ++s) {
    const double* in = x.raw() + s * V;
    double* o = out.raw() + s * V;
    for (std::size_t v = 0; v < V; ++v) {
      double acc = 0.0;
      for (int k = 0; k < 8; ++k) {
        const std::int64_t i = g.index[v * 8 + k];
        if (i >= 0) acc += g.weight[v * 8 + k] * in[i];
      }
      o[v] = acc;
    }
  }
  return out;
}

Tensor apply_grid_transpose(const ResampleGrid& g, const Tensor& y) {
  const std::size_t slices = leading_slices(y, g);
  const std::size_t V = g.extent[0] * g.extent[1] * g.extent[2];
  Tensor out(y.shape());
  for (std::size_t s = 0; s < slices; ++s) {
    const double* in = y.raw() + s * V;
    double* o = out.raw() + s * V;
    for (std::size_t v = 0; v < V; ++v) {
      for (int k = 0; k < 8; ++k) {
        const std::int64_t i = g.index[v * 8 + k];
        if (i >= 0) o[i] += g.weight[v * 8 + k] * in[v];
      }
    }
  }
  return out;
}

Tensor affine_apply(const Tensor& x, const AffineSpec& spec) {
  if (spec.is_identity()) return x;
  return apply_grid(make_affine_grid(spatial_extent(x), spec), x);
}

Tensor affine_apply_nearest(const Tensor& x, const AffineSpec& spec) {
  if (spec.is_identity()) return x;
  const auto e = spatial_extent(x);
  const std::size_t V = e[0] * e[1] * e[2];
  const std::size_t slices = x.numel() / V;
  const auto R = rotation_matrix(spec.angles);
  const double c[3] = {(e[0] - 1.0) / 2.0, (e[1] - 1.0) / 2.0, (e[2] - 1.0) / 2.0};
  std::vector<std::int64_t> src(V, -1);
  std::size_t o = 0;
  for (std::size_t x0 = 0; x0 < e[0]; ++x0)
    for (std::size_t y0 = 0; y0 < e[1]; ++y0)
      for (std::size_t z0 = 0; z0 < e[2]; ++z0, ++o) {
        const double v[3] = {x0 - c[0], y0 - c[1], z0 - c[2]};
        std::int64_t q[3];
        bool inside = true;
        for (int i = 0; i < 3; ++i) {
          const double qi = c[i] + (R[0 * 3 + i] * v[0] + R[1 * 3 + i] * v[1] + R[2 * 3 + i] * v[2]) / spec.scale;
          q[i] = static_cast<std::int64_t>(std::llround(qi));
          inside = inside && q[i] >= 0 && q[i] < static_cast<std::int64_t>(e[i]);
        }
        if (inside) src[o] = (q[0] * static_cast<std::int64_t>(e[1]) + q[1]) * static_cast<std::int64_t>(e[2]) + q[2];
      }
  Tensor out(x.shape());
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t v = 0; v < V; ++v)
      if (src[v] >= 0) out[s * V + v] = x[s * V + static_cast<std::size_t>(src[v])];
  return out;
}

Var affine_transform(const Var& x, const std::vector<AffineSpec>& specs) {
  const Dims5 d = Dims5::of(x.value());
  if (specs.size() != d.n) {
    throw std::invalid_argument("affine_transform: " + std::to_string(specs.size()) + " specs for batch of " +
                                std::to_string(d.n));
  }
  const std::size_t per_sample = d.c * d.spatial();
  std::vector<ResampleGrid> grids(d.n);
  Tensor out = x.value();
  for (std::size_t n = 0; n < d.n; ++n) {
    if (specs[n].is_identity()) continue;
    grids[n] = make_affine_grid({d.x, d.y, d.z}, specs[n]);
    Tensor slice(Shape{d.c, d.x, d.y, d.z},
                 std::vector<double>(x.value().raw() + n * per_sample, x.value().raw() + (n + 1) * per_sample));
    Tensor warped = apply_grid(grids[n], slice);
    std::copy_n(warped.raw(), per_sample, out.raw() + n * per_sample);
  }
  return Var::make(std::move(out), {x}, [d, per_sample, grids = std::move(grids)](Node& self) {
    Tensor g = self.grad;
    for (std::size_t n = 0; n < d.n; ++n) {
      if (grids[n].index.empty()) continue;
      Tensor slice(Shape{d.c, d.x, d.y, d.z},
                   std::vector<double>(self.grad.raw() + n * per_sample, self.grad.raw() + (n + 1) * per_sample));
      Tensor back = apply_grid_transpose(grids[n], slice);
      std::copy_n(back.raw(), per_sample, g.raw() + n * per_sample);
    }
    self.parents[0]->accumulate(g);
  });
}

namespace {

// Linear resize along one axis of a row-major tensor viewed as (outer, n, inner).
Tensor resize_axis_linear(const Tensor& x, std::size_t axis, std::size_t out_n) {
  const std::size_t n = x.dim(axis);
  if (n == out_n) return x;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  Shape s = x.shape();
  s[axis] = out_n;
  Tensor out(s);
  const double ratio = static_cast<double>(n) / static_cast<double>(out_n);
  for (std::size_t j = 0; j < out_n; ++j) {
    double src = (j + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double t = src - static_cast<double>(i0);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* a = x.raw() + (o * n + i0) * inner;
      const double* b = x.raw() + (o * n + i1) * inner;
      double* dst = out.raw() + (o * out_n + j) * inner;
      for (std::size_t k = 0; k < inner; ++k) dst[k] = (1.0 - t) * a[k] + t * b[k];
    }
  }
  return out;
}

Tensor resize_axis_nearest(const Tensor& x, std::size_t axis, std::size_t out_n) {
  const std::size_t n = x.dim(axis);
  if (n == out_n) return x;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  Shape s = x.shape();
  s[axis] = out_n;
  Tensor out(s);
  const double ratio = static_cast<double>(n) / static_cast<double>(out_n);
  for (std::size_t j = 0; j < out_n; ++j) {
    const std::size_t i = std::min(static_cast<std::size_t>(std::floor((j + 0.5) * ratio)), n - 1);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.raw() + (o * n + i) * inner, inner, out.raw() + (o * out_n + j) * inner);
  }
  return out;
}

}  // namespace

Tensor resize_trilinear(const Tensor& x, const std::array<std::size_t, 3>& extent) {
  spatial_extent(x);
  const std::size_t r = x.rank();
  Tensor out = resize_axis_linear(x, r - 3, extent[0]);
  out = resize_axis_linear(out, r - 2, extent[1]);
  return resize_axis_linear(out, r - 1, extent[2]);
}

Tensor resize_nearest(const Tensor& x, const std::array<std::size_t, 3>& extent) {
  spatial_extent(x);
  const std::size_t r = x.rank();
  Tensor out = resize_axis_nearest(x, r - 3, extent[0]);
  out = resize_axis_nearest(out, r - 2, extent[1]);
  return resize_axis_nearest(out, r - 1, extent[2]);
}

}  // namespace maproto
