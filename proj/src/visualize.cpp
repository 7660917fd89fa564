#include "maproto/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

namespace maproto {

namespace {

void require_grid(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw std::invalid_argument(std::string(what) + " must be an (X, Y, Z) volume");
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::array<std::uint8_t, 3> RgbImage::at(std::size_t col, std::size_t row) const {
  if (col >= width || row >= height) throw std::out_of_range("pixel outside image");
  const std::size_t i = 3 * (row * width + col);
  return {pixels[i], pixels[i + 1], pixels[i + 2]};
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  if (img.pixels.size() != 3 * img.width * img.height) throw std::invalid_argument("write_ppm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::string magic;
  int maxval = 0;
  RgbImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P6" || maxval != 255 || !in) throw std::runtime_error("'" + path.string() + "' is not an 8-bit P6 image");
  in.get();
  img.pixels.resize(3 * img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error("'" + path.string() + "' is truncated");
  return img;
}

std::vector<std::size_t> top_slices(const Tensor& weight, std::size_t count) {
  require_grid(weight, "slice weight");
  const std::size_t X = weight.dim(0), Y = weight.dim(1), Z = weight.dim(2);
  std::vector<double> mass(Z, 0.0);
  for (std::size_t i = 0; i < X * Y; ++i)
    for (std::size_t z = 0; z < Z; ++z) mass[z] += weight[i * Z + z];
  std::vector<std::size_t> order(Z);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
  order.resize(std::min(count, Z));
  std::sort(order.begin(), order.end());
  return order;
}

std::array<double, 3> heat(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return {std::clamp(3.0 * v, 0.0, 1.0), std::clamp(3.0 * v - 1.0, 0.0, 1.0), std::clamp(3.0 * v - 2.0, 0.0, 1.0)};
}

RgbImage render_overlay(const Tensor& background, const Tensor& map, const Tensor& mask, std::size_t z,
                        const OverlayStyle& style) {
  require_grid(background, "background");
  require_grid(map, "map");
  if (map.shape() != background.shape()) throw std::invalid_argument("overlay: map and background grids differ");
  if (!mask.empty() && mask.shape() != background.shape())
    throw std::invalid_argument("overlay: mask and background grids differ");
  const std::size_t X = background.dim(0), Y = background.dim(1), Z = background.dim(2);
  if (z >= Z) throw std::out_of_range("overlay: slice " + std::to_string(z) + " outside volume");

  const double lo = background.min(), hi = background.max();
  const double span = hi > lo ? hi - lo : 1.0;
  auto idx = [&](std::size_t x, std::size_t y) { return (x * Y + y) * Z + z; };
  auto inside = [&](long x, long y) {
    return x >= 0 && y >= 0 && x < static_cast<long>(X) && y < static_cast<long>(Y) &&
           mask[idx(static_cast<std::size_t>(x), static_cast<std::size_t>(y))] > 0.5;
  };

  RgbImage img{X, Y, std::vector<std::uint8_t>(3 * X * Y)};
  for (std::size_t y = 0; y < Y; ++y) {
    for (std::size_t x = 0; x < X; ++x) {
      std::uint8_t* px = img.pixels.data() + 3 * (y * X + x);
      const long lx = static_cast<long>(x), ly = static_cast<long>(y);
      if (!mask.empty() && inside(lx, ly) &&
          !(inside(lx - 1, ly) && inside(lx + 1, ly) && inside(lx, ly - 1) && inside(lx, ly + 1))) {
        std::copy(style.contour.begin(), style.contour.end(), px);
        continue;
      }
      const double g = (background[idx(x, y)] - lo) / span;
      const double m = std::clamp(map[idx(x, y)], 0.0, 1.0);
      const double a = std::clamp(style.alpha * m, 0.0, 1.0);
      const auto c = heat(m);
      for (int k = 0; k < 3; ++k) px[k] = to_byte((1.0 - a) * g + a * c[k]);
    }
  }
  return img;
}

}  // namespace maproto
