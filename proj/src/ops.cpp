#include "maproto/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace maproto::ops {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

thread_local BranchTrace* active_trace = nullptr;
constexpr std::uint64_t kTraceSeed = 0xcbf29ce484222325ULL;

}  // namespace

BranchTrace::BranchTrace() : digest_(kTraceSeed), previous_(active_trace) { active_trace = this; }
BranchTrace::~BranchTrace() { active_trace = previous_; }

void BranchTrace::reset() {
  digest_ = kTraceSeed;
  choices_.clear();
  cursor_ = 0;
  replaying_ = false;
}

void BranchTrace::replay() {
  replaying_ = true;
  cursor_ = 0;
}

std::uint64_t BranchTrace::decide(std::uint64_t computed) {
  if (replaying_) {
    if (cursor_ >= choices_.size()) throw std::logic_error("branch replay: graph differs from the recorded pass");
    return choices_[cursor_++];
  }
  choices_.push_back(computed);
  digest_ = (digest_ ^ computed) * 0x100000001b3ULL;
  return computed;
}

BranchTrace* BranchTrace::current() { return active_trace; }

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor g = self.grad;
      g *= -1.0;
      self.parents[1]->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= pb.value[i];
      pa.accumulate(g);
    }
    if (pb.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= pa.value[i];
      pb.accumulate(g);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  out *= s;
  return Var::make(std::move(out), {a}, [s](Node& self) {
    Tensor g = self.grad;
    g *= s;
    self.parents[0]->accumulate(g);
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) throw std::invalid_argument("mul_const: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  return Var::make(std::move(out), {a}, [c](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= c[i];
    self.parents[0]->accumulate(g);
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  if (auto* t = BranchTrace::current()) {
    for (auto& v : out.storage()) v = t->decide(v > 0.0) ? v : 0.0;
  } else {
    for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  }
  return Var::make(std::move(out), {a}, [](Node& self) {
    Tensor g = self.grad;
    const Tensor& x = self.parents[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (!(x[i] > 0.0)) g[i] = 0.0;
    self.parents[0]->accumulate(g);
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = logistic(v);
  return Var::make(std::move(out), {a}, [](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double y = self.value[i];
      g[i] *= y * (1.0 - y);
    }
    self.parents[0]->accumulate(g);
  });
}

Var abs(const Var& a) {
  Tensor out = a.value();
  if (auto* t = BranchTrace::current()) {
    for (auto& v : out.storage()) v *= static_cast<double>(t->decide(static_cast<std::uint64_t>((v > 0.0) - (v < 0.0) + 1))) - 1.0;
  } else {
    for (auto& v : out.storage()) v = std::abs(v);
  }
  return Var::make(std::move(out), {a}, [](Node& self) {
    Tensor g = self.grad;
    const Tensor& x = self.parents[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= (x[i] > 0.0) - (x[i] < 0.0);
    self.parents[0]->accumulate(g);
  });
}

Var sum(const Var& a) {
  Tensor out({1}, a.value().sum());
  return Var::make(std::move(out), {a}, [](Node& self) {
    self.parents[0]->accumulate(Tensor(self.parents[0]->value.shape(), self.grad[0]));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  Tensor out({1}, a.value().sum() / n);
  return Var::make(std::move(out), {a}, [n](Node& self) {
    self.parents[0]->accumulate(Tensor(self.parents[0]->value.shape(), self.grad[0] / n));
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  std::vector<Var> used;
  std::vector<double> w;
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (weights[i] == 0.0) continue;
    if (terms[i].value().numel() != 1) throw std::invalid_argument("weighted_sum: non-scalar term");
    used.push_back(terms[i]);
    w.push_back(weights[i]);
    total += weights[i] * terms[i].value()[0];
  }
  return Var::make(Tensor({1}, total), used, [w](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (self.parents[i]->requires_grad) self.parents[i]->accumulate(Tensor({1}, w[i] * self.grad[0]));
    }
  });
}

// ---- structural ------------------------------------------------------------

Var transpose(const Var& a, std::size_t axis_a, std::size_t axis_b) {
  Tensor out = maproto::transpose(a.value(), axis_a, axis_b);
  return Var::make(std::move(out), {a}, [axis_a, axis_b](Node& self) {
    self.parents[0]->accumulate(maproto::transpose(self.grad, axis_a, axis_b));
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Dims5 d0 = Dims5::of(parts[0].value());
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Dims5 d = Dims5::of(p.value());
    if (d.n != d0.n || d.x != d0.x || d.y != d0.y || d.z != d0.z) {
      throw std::invalid_argument("concat_channels: extents " + shape_str(p.shape()) + " vs " +
                                  shape_str(parts[0].shape()));
    }
    channels += d.c;
  }
  Dims5 od = d0;
  od.c = channels;
  Tensor out(od.shape());
  const std::size_t sp = od.spatial();
  std::vector<std::size_t> offsets;
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    offsets.push_back(c0);
    const std::size_t pc = p.shape()[1];
    for (std::size_t n = 0; n < od.n; ++n) {
      std::copy_n(p.value().raw() + n * pc * sp, pc * sp, out.raw() + (n * channels + c0) * sp);
    }
    c0 += pc;
  }
  return Var::make(std::move(out), parts, [offsets, channels, sp](Node& self) {
    const std::size_t n_batch = self.value.dim(0);
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = *self.parents[i];
      if (!p.requires_grad) continue;
      const std::size_t pc = p.value.dim(1);
      Tensor g(p.value.shape());
      for (std::size_t n = 0; n < n_batch; ++n) {
        std::copy_n(self.grad.raw() + (n * channels + offsets[i]) * sp, pc * sp, g.raw() + n * pc * sp);
      }
      p.accumulate(g);
    }
  });
}

Var slice_channels(const Var& a, std::size_t start, std::size_t count) {
  const Dims5 d = Dims5::of(a.value());
  if (start + count > d.c || count == 0) throw std::invalid_argument("slice_channels: range out of bounds");
  Dims5 od = d;
  od.c = count;
  Tensor out(od.shape());
  const std::size_t sp = d.spatial();
  for (std::size_t n = 0; n < d.n; ++n)
    std::copy_n(a.value().raw() + (n * d.c + start) * sp, count * sp, out.raw() + n * count * sp);
  return Var::make(std::move(out), {a}, [d, start, count, sp](Node& self) {
    Tensor g(d.shape());
    for (std::size_t n = 0; n < d.n; ++n)
      std::copy_n(self.grad.raw() + n * count * sp, count * sp, g.raw() + (n * d.c + start) * sp);
    self.parents[0]->accumulate(g);
  });
}

Var mul_channel_gate(const Var& x, const Var& gate) {
  const Dims5 d = Dims5::of(x.value());
  const Dims5 g = Dims5::of(gate.value());
  if (g.c != 1 || g.n != d.n || g.x != d.x || g.y != d.y || g.z != d.z) {
    throw std::invalid_argument("mul_channel_gate: gate " + shape_str(gate.shape()) + " for input " +
                                shape_str(x.shape()));
  }
  const std::size_t sp = d.spatial();
  Tensor out = x.value();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      double* o = out.raw() + (n * d.c + c) * sp;
      const double* gv = gate.value().raw() + n * sp;
      for (std::size_t v = 0; v < sp; ++v) o[v] *= gv[v];
    }
  return Var::make(std::move(out), {x, gate}, [d, sp](Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    if (px.requires_grad) {
      Tensor gx = self.grad;
      for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t c = 0; c < d.c; ++c) {
          double* o = gx.raw() + (n * d.c + c) * sp;
          const double* gv = pg.value.raw() + n * sp;
          for (std::size_t v = 0; v < sp; ++v) o[v] *= gv[v];
        }
      px.accumulate(gx);
    }
    if (pg.requires_grad) {
      Tensor gg(pg.value.shape());
      for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t c = 0; c < d.c; ++c) {
          const double* dy = self.grad.raw() + (n * d.c + c) * sp;
          const double* xv = px.value.raw() + (n * d.c + c) * sp;
          double* o = gg.raw() + n * sp;
          for (std::size_t v = 0; v < sp; ++v) o[v] += dy[v] * xv[v];
        }
      pg.accumulate(gg);
    }
  });
}

// ---- convolution -----------------------------------------------------------

Triple conv_output_extent(const Triple& in, const Triple& kernel, const ConvOptions& opt) {
  Triple out{};
  for (int a = 0; a < 3; ++a) {
    if (opt.stride[a] == 0) throw std::invalid_argument("conv: zero stride");
    const std::size_t padded = in[a] + 2 * opt.padding[a];
    if (padded < kernel[a]) {
      throw std::invalid_argument("conv: kernel " + std::to_string(kernel[a]) +
                                  " larger than padded extent " + std::to_string(padded));
    }
    out[a] = (padded - kernel[a]) / opt.stride[a] + 1;
  }
  return out;
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

struct ConvGeometry {
  Dims5 in, out;
  Triple k;
  std::ptrdiff_t s[3], p[3];

  std::size_t taps() const { return k[0] * k[1] * k[2]; }
  std::size_t rows() const { return in.c * taps(); }
  bool pointwise() const { return taps() == 1 && s[0] == 1 && s[1] == 1 && s[2] == 1; }
};

// Valid output range [lo, hi) along one axis for kernel tap k.
inline void tap_range(std::ptrdiff_t k, std::ptrdiff_t stride, std::ptrdiff_t pad, std::ptrdiff_t in_extent,
                      std::ptrdiff_t out_extent, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
  // i = o*stride + k - pad must lie in [0, in_extent).
  const std::ptrdiff_t a = pad - k;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const std::ptrdiff_t b = in_extent - 1 + pad - k;
  hi = b < 0 ? 0 : b / stride + 1;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
}

template <typename Body>
void for_each_tap(const ConvGeometry& g, Body&& body) {
  for (std::size_t kx = 0; kx < g.k[0]; ++kx) {
    std::ptrdiff_t xlo, xhi;
    tap_range(kx, g.s[0], g.p[0], g.in.x, g.out.x, xlo, xhi);
    for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
      std::ptrdiff_t ylo, yhi;
      tap_range(ky, g.s[1], g.p[1], g.in.y, g.out.y, ylo, yhi);
      for (std::size_t kz = 0; kz < g.k[2]; ++kz) {
        std::ptrdiff_t zlo, zhi;
        tap_range(kz, g.s[2], g.p[2], g.in.z, g.out.z, zlo, zhi);
        if (xlo >= xhi || ylo >= yhi || zlo >= zhi) continue;
        body(kx, ky, kz, xlo, xhi, ylo, yhi, zlo, zhi);
      }
    }
  }
}

// Narrow outputs (attention gates) gain nothing from a column buffer.
bool use_direct(const ConvGeometry& g) { return g.out.c <= 4 && !g.pointwise(); }

void direct_forward(const ConvGeometry& g, const double* xin, const double* wd, double* od) {
  const std::size_t ksz = g.taps();
  for (std::size_t n = 0; n < g.out.n; ++n)
    for (std::size_t co = 0; co < g.out.c; ++co) {
      double* obase = od + g.out.index(n, co, 0, 0, 0);
      for (std::size_t ci = 0; ci < g.in.c; ++ci) {
        const double* ibase = xin + g.in.index(n, ci, 0, 0, 0);
        const double* wk = wd + (co * g.in.c + ci) * ksz;
        for_each_tap(g, [&](std::size_t kx, std::size_t ky, std::size_t kz, std::ptrdiff_t xlo, std::ptrdiff_t xhi,
                            std::ptrdiff_t ylo, std::ptrdiff_t yhi, std::ptrdiff_t zlo, std::ptrdiff_t zhi) {
          const double wv = wk[(kx * g.k[1] + ky) * g.k[2] + kz];
          if (wv == 0.0) return;
          const std::ptrdiff_t sz = g.s[2];
          for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) {
            const std::ptrdiff_t ix = ox * g.s[0] + kx - g.p[0];
            for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
              const std::ptrdiff_t iy = oy * g.s[1] + ky - g.p[1];
              double* orow = obase + (ox * g.out.y + oy) * g.out.z;
              const double* irow = ibase + (ix * g.in.y + iy) * g.in.z + kz - g.p[2];
              if (sz == 1) {
                for (std::ptrdiff_t oz = zlo; oz < zhi; ++oz) orow[oz] += wv * irow[oz];
              } else {
                for (std::ptrdiff_t oz = zlo; oz < zhi; ++oz) orow[oz] += wv * irow[oz * sz];
              }
            }
          }
        });
      }
    }
}

void direct_backward(const ConvGeometry& g, const double* dy, const double* xin, const double* wd, double* gx,
                     double* gw) {
  const std::size_t ksz = g.taps();
  for (std::size_t n = 0; n < g.out.n; ++n)
    for (std::size_t co = 0; co < g.out.c; ++co) {
      const double* gbase = dy + g.out.index(n, co, 0, 0, 0);
      for (std::size_t ci = 0; ci < g.in.c; ++ci) {
        const double* ibase = xin + g.in.index(n, ci, 0, 0, 0);
        double* gibase = gx ? gx + g.in.index(n, ci, 0, 0, 0) : nullptr;
        const double* wk = wd + (co * g.in.c + ci) * ksz;
        double* gwk = gw ? gw + (co * g.in.c + ci) * ksz : nullptr;
        for_each_tap(g, [&](std::size_t kx, std::size_t ky, std::size_t kz, std::ptrdiff_t xlo, std::ptrdiff_t xhi,
                            std::ptrdiff_t ylo, std::ptrdiff_t yhi, std::ptrdiff_t zlo, std::ptrdiff_t zhi) {
          const std::size_t kidx = (kx * g.k[1] + ky) * g.k[2] + kz;
          const double wv = wk[kidx];
          const std::ptrdiff_t sz = g.s[2];
          double acc = 0.0;
          for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) {
            const std::ptrdiff_t ix = ox * g.s[0] + kx - g.p[0];
            for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
              const std::ptrdiff_t iy = oy * g.s[1] + ky - g.p[1];
              const double* grow = gbase + (ox * g.out.y + oy) * g.out.z;
              const std::ptrdiff_t ioff = (ix * g.in.y + iy) * g.in.z + kz - g.p[2];
              if (gwk) {
                const double* irow = ibase + ioff;
                for (std::ptrdiff_t oz = zlo; oz < zhi; ++oz) acc += grow[oz] * irow[oz * sz];
              }
              if (gibase && wv != 0.0) {
                double* girow = gibase + ioff;
                for (std::ptrdiff_t oz = zlo; oz < zhi; ++oz) girow[oz * sz] += wv * grow[oz];
              }
            }
          }
          if (gwk) gwk[kidx] += acc;
        });
      }
    }
}

// Output x-slabs processed per column buffer, bounded to keep the buffer small.
std::size_t slab_rows(const ConvGeometry& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 22;  // doubles
  const std::size_t per_x = g.rows() * g.out.y * g.out.z;
  return std::max<std::size_t>(1, std::min<std::size_t>(g.out.x, kBudget / std::max<std::size_t>(per_x, 1)));
}

// Column matrix (Ci*K, cols) for output rows [x0, x1) of sample n.
void im2col(const ConvGeometry& g, const double* sample, std::size_t x0, std::size_t x1, double* col) {
  const std::size_t cols = (x1 - x0) * g.out.y * g.out.z;
  const std::size_t in_sp = g.in.spatial();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.in.c; ++ci) {
    const double* ibase = sample + ci * in_sp;
    for (std::size_t kx = 0; kx < g.k[0]; ++kx)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kz = 0; kz < g.k[2]; ++kz, ++r) {
          double* dst = col + r * cols;
          for (std::size_t ox = x0; ox < x1; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * g.s[0] + kx - g.p[0];
            const bool xin = ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in.x);
            for (std::size_t oy = 0; oy < g.out.y; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * g.s[1] + ky - g.p[1];
              if (!xin || iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.y)) {
                std::fill_n(dst, g.out.z, 0.0);
                dst += g.out.z;
                continue;
              }
              const double* irow = ibase + (ix * g.in.y + iy) * g.in.z;
              for (std::size_t oz = 0; oz < g.out.z; ++oz) {
                const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz) * g.s[2] + kz - g.p[2];
                *dst++ = (iz >= 0 && iz < static_cast<std::ptrdiff_t>(g.in.z)) ? irow[iz] : 0.0;
              }
            }
          }
        }
  }
}

// Scatter-add of a column matrix back onto the input grid (adjoint of im2col).
void col2im(const ConvGeometry& g, const double* col, std::size_t x0, std::size_t x1, double* sample) {
  const std::size_t cols = (x1 - x0) * g.out.y * g.out.z;
  const std::size_t in_sp = g.in.spatial();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.in.c; ++ci) {
    double* ibase = sample + ci * in_sp;
    for (std::size_t kx = 0; kx < g.k[0]; ++kx)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kz = 0; kz < g.k[2]; ++kz, ++r) {
          const double* src = col + r * cols;
          for (std::size_t ox = x0; ox < x1; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * g.s[0] + kx - g.p[0];
            const bool xin = ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in.x);
            for (std::size_t oy = 0; oy < g.out.y; ++oy, src += g.out.z) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * g.s[1] + ky - g.p[1];
              if (!xin || iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.y)) continue;
              double* irow = ibase + (ix * g.in.y + iy) * g.in.z;
              for (std::size_t oz = 0; oz < g.out.z; ++oz) {
                const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz) * g.s[2] + kz - g.p[2];
                if (iz >= 0 && iz < static_cast<std::ptrdiff_t>(g.in.z)) irow[iz] += src[oz];
              }
            }
          }
        }
  }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvOptions& opt) {
  require_volume_batch(x.value(), "conv3d input");
  const Tensor& wt = w.value();
  if (wt.rank() != 5) throw std::invalid_argument("conv3d: weight must be (Co,Ci,Kx,Ky,Kz)");
  ConvGeometry g;
  g.in = Dims5::of(x.value());
  if (wt.dim(1) != g.in.c) {
    throw std::invalid_argument("conv3d: input has " + std::to_string(g.in.c) + " channels, weight expects " +
                                std::to_string(wt.dim(1)));
  }
  g.k = {wt.dim(2), wt.dim(3), wt.dim(4)};
  const Triple oe = conv_output_extent({g.in.x, g.in.y, g.in.z}, g.k, opt);
  g.out = {g.in.n, wt.dim(0), oe[0], oe[1], oe[2]};
  for (int a = 0; a < 3; ++a) {
    g.s[a] = static_cast<std::ptrdiff_t>(opt.stride[a]);
    g.p[a] = static_cast<std::ptrdiff_t>(opt.padding[a]);
  }
  if (bias.defined() && (bias.value().numel() != g.out.c)) throw std::invalid_argument("conv3d: bias size");

  Tensor out(g.out.shape());
  const std::size_t out_sp = g.out.spatial();
  const std::size_t plane = g.out.y * g.out.z;
  const ConstStridedMap wm(wt.raw(), g.out.c, g.rows(), Eigen::OuterStride<>(g.rows()));
  const std::size_t slab = slab_rows(g);
  const bool direct = use_direct(g);
  if (direct) direct_forward(g, x.value().raw(), wt.raw(), out.raw());
  std::vector<double> col(g.pointwise() || direct ? 0 : g.rows() * slab * plane);
  for (std::size_t n = 0; n < g.out.n; ++n) {
    const double* sample = x.value().raw() + n * g.in.c * g.in.spatial();
    double* obase = out.raw() + n * g.out.c * out_sp;
    for (std::size_t x0 = 0; x0 < g.out.x && !direct; x0 += slab) {
      const std::size_t x1 = std::min(g.out.x, x0 + slab);
      const std::size_t cols = (x1 - x0) * plane;
      StridedMap ym(obase + x0 * plane, g.out.c, cols, Eigen::OuterStride<>(out_sp));
      if (g.pointwise()) {
        ym.noalias() = wm * ConstStridedMap(sample + x0 * plane, g.rows(), cols, Eigen::OuterStride<>(out_sp));
      } else {
        im2col(g, sample, x0, x1, col.data());
        ym.noalias() = wm * ConstStridedMap(col.data(), g.rows(), cols, Eigen::OuterStride<>(cols));
      }
    }
    if (bias.defined())
      for (std::size_t co = 0; co < g.out.c; ++co) {
        double* o = obase + co * out_sp;
        const double b = bias.value()[co];
        for (std::size_t v = 0; v < out_sp; ++v) o[v] += b;
      }
  }

  std::vector<Var> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return Var::make(std::move(out), parents, [g, has_bias](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const std::size_t out_sp = g.out.spatial();
    const std::size_t in_sp = g.in.spatial();
    const std::size_t plane = g.out.y * g.out.z;
    Tensor gx, gw;
    if (px.requires_grad) gx = Tensor::zeros(px.value.shape());
    if (pw.requires_grad) gw = Tensor::zeros(pw.value.shape());
    const ConstStridedMap wm(pw.value.raw(), g.out.c, g.rows(), Eigen::OuterStride<>(g.rows()));
    const std::size_t slab = slab_rows(g);
    const bool direct = use_direct(g);
    if (direct) {
      direct_backward(g, self.grad.raw(), px.value.raw(), pw.value.raw(), gx.empty() ? nullptr : gx.raw(),
                      gw.empty() ? nullptr : gw.raw());
    }
    std::vector<double> col(g.pointwise() || direct ? 0 : g.rows() * slab * plane);
    std::vector<double> dcol(g.pointwise() || direct || gx.empty() ? 0 : g.rows() * slab * plane);
    for (std::size_t n = 0; n < g.out.n && !direct; ++n) {
      const double* sample = px.value.raw() + n * g.in.c * in_sp;
      const double* dy = self.grad.raw() + n * g.out.c * out_sp;
      for (std::size_t x0 = 0; x0 < g.out.x; x0 += slab) {
        const std::size_t x1 = std::min(g.out.x, x0 + slab);
        const std::size_t cols = (x1 - x0) * plane;
        const ConstStridedMap dym(dy + x0 * plane, g.out.c, cols, Eigen::OuterStride<>(out_sp));
        if (g.pointwise()) {
          if (!gw.empty()) {
            StridedMap gwm(gw.raw(), g.out.c, g.rows(), Eigen::OuterStride<>(g.rows()));
            gwm.noalias() +=
                dym * ConstStridedMap(sample + x0 * plane, g.rows(), cols, Eigen::OuterStride<>(out_sp)).transpose();
          }
          if (!gx.empty()) {
            StridedMap gxm(gx.raw() + n * g.in.c * in_sp + x0 * plane, g.rows(), cols, Eigen::OuterStride<>(in_sp));
            gxm.noalias() += wm.transpose() * dym;
          }
          continue;
        }
        if (!gw.empty()) {
          im2col(g, sample, x0, x1, col.data());
          StridedMap gwm(gw.raw(), g.out.c, g.rows(), Eigen::OuterStride<>(g.rows()));
          gwm.noalias() += dym * ConstStridedMap(col.data(), g.rows(), cols, Eigen::OuterStride<>(cols)).transpose();
        }
        if (!gx.empty()) {
          StridedMap dcm(dcol.data(), g.rows(), cols, Eigen::OuterStride<>(cols));
          dcm.noalias() = wm.transpose() * dym;
          col2im(g, dcol.data(), x0, x1, gx.raw() + n * g.in.c * in_sp);
        }
      }
    }
    if (!gx.empty()) px.accumulate(gx);
    if (!gw.empty()) pw.accumulate(gw);
    if (has_bias && self.parents[2]->requires_grad) {
      Tensor gb({g.out.c});
      for (std::size_t n = 0; n < g.out.n; ++n)
        for (std::size_t co = 0; co < g.out.c; ++co) {
          const double* gr = self.grad.raw() + g.out.index(n, co, 0, 0, 0);
          double acc = 0.0;
          for (std::size_t v = 0; v < out_sp; ++v) acc += gr[v];
          gb[co] += acc;
        }
      self.parents[2]->accumulate(gb);
    }
  });
}

// ---- normalisation ---------------------------------------------------------

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
  const Dims5 d = Dims5::of(x.value());
  if (gamma.value().numel() != d.c || beta.value().numel() != d.c) {
    throw std::invalid_argument("batch_norm: affine size does not match " + std::to_string(d.c) + " channels");
  }
  if (state.running_mean.numel() != d.c) state.running_mean = Tensor::zeros({d.c});
  if (state.running_var.numel() != d.c) state.running_var = Tensor::full({d.c}, 1.0);
  const std::size_t sp = d.spatial();
  const double count = static_cast<double>(d.n * sp);

  Tensor mean_c({d.c}), inv_std({d.c});
  if (training) {
    for (std::size_t c = 0; c < d.c; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* v = x.value().raw() + d.index(n, c, 0, 0, 0);
        for (std::size_t i = 0; i < sp; ++i) s += v[i];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* v = x.value().raw() + d.index(n, c, 0, 0, 0);
        for (std::size_t i = 0; i < sp; ++i) ss += (v[i] - mu) * (v[i] - mu);
      }
      const double var = ss / count;
      mean_c[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d.c; ++c) {
      mean_c[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  Tensor xhat(d.shape());
  Tensor out(d.shape());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t base = d.index(n, c, 0, 0, 0);
      const double gm = gamma.value()[c], bt = beta.value()[c];
      for (std::size_t i = 0; i < sp; ++i) {
        const double h = (x.value()[base + i] - mean_c[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gm * h + bt;
      }
    }

  return Var::make(std::move(out), {x, gamma, beta},
                   [d, sp, count, training, xhat = std::move(xhat), inv_std](Node& self) {
                     auto& px = *self.parents[0];
                     auto& pg = *self.parents[1];
                     auto& pb = *self.parents[2];
                     const double* dy = self.grad.raw();
                     Tensor sum_dy({d.c}), sum_dy_xhat({d.c});
                     for (std::size_t n = 0; n < d.n; ++n)
                       for (std::size_t c = 0; c < d.c; ++c) {
                         const std::size_t base = d.index(n, c, 0, 0, 0);
                         double a = 0.0, b = 0.0;
                         for (std::size_t i = 0; i < sp; ++i) {
                           a += dy[base + i];
                           b += dy[base + i] * xhat[base + i];
                         }
                         sum_dy[c] += a;
                         sum_dy_xhat[c] += b;
                       }
                     if (pg.requires_grad) pg.accumulate(sum_dy_xhat);
                     if (pb.requires_grad) pb.accumulate(sum_dy);
                     if (px.requires_grad) {
                       Tensor gx(d.shape());
                       for (std::size_t n = 0; n < d.n; ++n)
                         for (std::size_t c = 0; c < d.c; ++c) {
                           const std::size_t base = d.index(n, c, 0, 0, 0);
                           const double k = pg.value[c] * inv_std[c];
                           if (training) {
                             const double m1 = sum_dy[c] / count;
                             const double m2 = sum_dy_xhat[c] / count;
                             for (std::size_t i = 0; i < sp; ++i)
                               gx[base + i] = k * (dy[base + i] - m1 - xhat[base + i] * m2);
                           } else {
                             for (std::size_t i = 0; i < sp; ++i) gx[base + i] = k * dy[base + i];
                           }
                         }
                       px.accumulate(gx);
                     }
                   });
}

// ---- pooling ---------------------------------------------------------------

Var max_pool3d(const Var& x, const Triple& kernel, const Triple& stride, const Triple& padding) {
  const Dims5 d = Dims5::of(x.value());
  ConvOptions opt{stride, padding};
  for (int a = 0; a < 3; ++a)
    if (padding[a] * 2 > kernel[a]) throw std::invalid_argument("max_pool3d: padding exceeds half kernel");
  const Triple oe = conv_output_extent({d.x, d.y, d.z}, kernel, opt);
  const Dims5 od{d.n, d.c, oe[0], oe[1], oe[2]};
  Tensor out(od.shape());
  std::vector<std::size_t> argmax(od.numel());
  const double* in = x.value().raw();
  BranchTrace* trace = BranchTrace::current();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t ox = 0; ox < od.x; ++ox)
        for (std::size_t oy = 0; oy < od.y; ++oy)
          for (std::size_t oz = 0; oz < od.z; ++oz) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_i = 0;
            for (std::size_t kx = 0; kx < kernel[0]; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride[0] + kx) - padding[0];
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.x)) continue;
              for (std::size_t ky = 0; ky < kernel[1]; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride[1] + ky) - padding[1];
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.y)) continue;
                for (std::size_t kz = 0; kz < kernel[2]; ++kz) {
                  const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * stride[2] + kz) - padding[2];
                  if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(d.z)) continue;
                  const std::size_t idx = d.index(n, c, ix, iy, iz);
                  if (in[idx] > best) {
                    best = in[idx];
                    best_i = idx;
                  }
                }
              }
            }
            const std::size_t o = od.index(n, c, ox, oy, oz);
            if (trace) best_i = static_cast<std::size_t>(trace->decide(best_i));
            out[o] = in[best_i];
            argmax[o] = best_i;
          }
  return Var::make(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
    self.parents[0]->accumulate(g);
  });
}

Var avg_pool3d(const Var& x, const Triple& kernel, const Triple& stride) {
  const Dims5 d = Dims5::of(x.value());
  const Triple oe = conv_output_extent({d.x, d.y, d.z}, kernel, ConvOptions{stride, {0, 0, 0}});
  const Dims5 od{d.n, d.c, oe[0], oe[1], oe[2]};
  const double inv = 1.0 / static_cast<double>(kernel[0] * kernel[1] * kernel[2]);
  Tensor out(od.shape());
  const double* in = x.value().raw();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t ox = 0; ox < od.x; ++ox)
        for (std::size_t oy = 0; oy < od.y; ++oy)
          for (std::size_t oz = 0; oz < od.z; ++oz) {
            double s = 0.0;
            for (std::size_t kx = 0; kx < kernel[0]; ++kx)
              for (std::size_t ky = 0; ky < kernel[1]; ++ky)
                for (std::size_t kz = 0; kz < kernel[2]; ++kz)
                  s += in[d.index(n, c, ox * stride[0] + kx, oy * stride[1] + ky, oz * stride[2] + kz)];
            out[od.index(n, c, ox, oy, oz)] = s * inv;
          }
  return Var::make(std::move(out), {x}, [d, od, kernel, stride, inv](Node& self) {
    Tensor g(d.shape());
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t ox = 0; ox < od.x; ++ox)
          for (std::size_t oy = 0; oy < od.y; ++oy)
            for (std::size_t oz = 0; oz < od.z; ++oz) {
              const double gv = self.grad[od.index(n, c, ox, oy, oz)] * inv;
              for (std::size_t kx = 0; kx < kernel[0]; ++kx)
                for (std::size_t ky = 0; ky < kernel[1]; ++ky)
                  for (std::size_t kz = 0; kz < kernel[2]; ++kz)
                    g[d.index(n, c, ox * stride[0] + kx, oy * stride[1] + ky, oz * stride[2] + kz)] += gv;
            }
    self.parents[0]->accumulate(g);
  });
}

Var global_avg_pool(const Var& x) {
  const Dims5 d = Dims5::of(x.value());
  const std::size_t sp = d.spatial();
  Tensor out({d.n, d.c});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* v = x.value().raw() + d.index(n, c, 0, 0, 0);
      double s = 0.0;
      for (std::size_t i = 0; i < sp; ++i) s += v[i];
      out[n * d.c + c] = s / static_cast<double>(sp);
    }
  return Var::make(std::move(out), {x}, [d, sp](Node& self) {
    Tensor g(d.shape());
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t c = 0; c < d.c; ++c) {
        const double gv = self.grad[n * d.c + c] / static_cast<double>(sp);
        double* o = g.raw() + d.index(n, c, 0, 0, 0);
        for (std::size_t i = 0; i < sp; ++i) o[i] = gv;
      }
    self.parents[0]->accumulate(g);
  });
}

Var z_pool(const Var& x) {
  const Dims5 d = Dims5::of(x.value());
  if (d.numel() == 0) throw std::invalid_argument("z_pool: empty tensor");
  const std::size_t sp = d.spatial();
  Tensor out({d.n, 2, d.x, d.y, d.z});
  std::vector<std::uint32_t> argmax(d.n * sp);
  const double* in = x.value().raw();
  for (std::size_t n = 0; n < d.n; ++n) {
    double* mx = out.raw() + (n * 2) * sp;
    double* mn = out.raw() + (n * 2 + 1) * sp;
    const double* first = in + d.index(n, 0, 0, 0, 0);
    std::copy_n(first, sp, mx);
    std::copy_n(first, sp, mn);
    std::uint32_t* am = argmax.data() + n * sp;
    std::fill_n(am, sp, 0u);
    for (std::size_t c = 1; c < d.c; ++c) {
      const double* v = in + d.index(n, c, 0, 0, 0);
      for (std::size_t i = 0; i < sp; ++i) {
        if (v[i] > mx[i]) {
          mx[i] = v[i];
          am[i] = static_cast<std::uint32_t>(c);
        }
        mn[i] += v[i];
      }
    }
    const double inv = 1.0 / static_cast<double>(d.c);
    for (std::size_t i = 0; i < sp; ++i) mn[i] *= inv;
    if (auto* t = BranchTrace::current()) {
      for (std::size_t i = 0; i < sp; ++i) {
        am[i] = static_cast<std::uint32_t>(t->decide(am[i]));
        mx[i] = in[d.index(n, am[i], 0, 0, 0) + i];
      }
    }
  }
  return Var::make(std::move(out), {x}, [d, sp, argmax = std::move(argmax)](Node& self) {
    Tensor g(d.shape());
    const double inv = 1.0 / static_cast<double>(d.c);
    for (std::size_t n = 0; n < d.n; ++n) {
      const double* gmx = self.grad.raw() + (n * 2) * sp;
      const double* gmn = self.grad.raw() + (n * 2 + 1) * sp;
      for (std::size_t c = 0; c < d.c; ++c) {
        double* o = g.raw() + d.index(n, c, 0, 0, 0);
        for (std::size_t i = 0; i < sp; ++i) o[i] = gmn[i] * inv;
      }
      for (std::size_t i = 0; i < sp; ++i) g[d.index(n, argmax[n * sp + i], 0, 0, 0) + i] += gmx[i];
    }
    self.parents[0]->accumulate(g);
  });
}

// ---- prototype layer -------------------------------------------------------

Var soft_mask(const Var& raw, double omega) {
  const Dims5 d = Dims5::of(raw.value());
  const std::size_t sp = d.spatial();
  const std::size_t maps = d.n * d.c;
  const double lo = logistic(-omega / 2.0);
  const double hi = logistic(omega / 2.0);
  const double span = hi - lo;
  Tensor out(d.shape());
  std::vector<std::size_t> amin(maps), amax(maps);
  std::vector<double> range(maps);
  for (std::size_t m = 0; m < maps; ++m) {
    const double* v = raw.value().raw() + m * sp;
    double* o = out.raw() + m * sp;
    const auto [mn_it, mx_it] = std::minmax_element(v, v + sp);
    amin[m] = static_cast<std::size_t>(mn_it - v);
    amax[m] = static_cast<std::size_t>(mx_it - v);
    bool flat = !(*mx_it - *mn_it > 1e-12);
    if (auto* t = BranchTrace::current()) {
      amin[m] = static_cast<std::size_t>(t->decide(amin[m]));
      amax[m] = static_cast<std::size_t>(t->decide(amax[m]));
      flat = t->decide(flat) != 0;
    }
    const double low = v[amin[m]];
    const double r = v[amax[m]] - low;
    range[m] = flat ? 0.0 : r;
    if (flat) {
      std::fill_n(o, sp, 0.5);
      continue;
    }
    for (std::size_t i = 0; i < sp; ++i) {
      const double t = (v[i] - low) / r;
      o[i] = (logistic(omega * (t - 0.5)) - lo) / span;
    }
  }
  return Var::make(std::move(out), {raw},
                   [sp, maps, omega, span, amin = std::move(amin), amax = std::move(amax),
                    range = std::move(range)](Node& self) {
                     const Tensor& x = self.parents[0]->value;
                     Tensor g(x.shape());
                     for (std::size_t m = 0; m < maps; ++m) {
                       const double r = range[m];
                       if (!(r > 1e-12)) continue;
                       const double* v = x.raw() + m * sp;
                       const double* dy = self.grad.raw() + m * sp;
                       double* gv = g.raw() + m * sp;
                       const double mn = v[amin[m]];
                       double dmn = 0.0, dmx = 0.0;
                       for (std::size_t i = 0; i < sp; ++i) {
                         const double t = (v[i] - mn) / r;
                         const double s = logistic(omega * (t - 0.5));
                         const double dt = dy[i] * omega * s * (1.0 - s) / span;
                         gv[i] += dt / r;
                         dmn += dt * (t - 1.0) / r;
                         dmx += -dt * t / r;
                       }
                       gv[amin[m]] += dmn;
                       gv[amax[m]] += dmx;
                     }
                     self.parents[0]->accumulate(g);
                   });
}

Var masked_pool(const Var& maps, const Var& fea) {
  const Dims5 dm = Dims5::of(maps.value());
  const Dims5 df = Dims5::of(fea.value());
  if (dm.n != df.n || dm.x != df.x || dm.y != df.y || dm.z != df.z) {
    throw std::invalid_argument("masked_pool: maps " + shape_str(maps.shape()) + " and features " +
                                shape_str(fea.shape()) + " disagree");
  }
  const std::size_t N = dm.n, P = dm.c, D = df.c, V = dm.spatial();
  Tensor out({N, P, D});
  std::vector<double> mass(N * P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const double* m = maps.value().raw() + dm.index(n, p, 0, 0, 0);
      double w = 0.0;
      for (std::size_t v = 0; v < V; ++v) w += m[v];
      mass[n * P + p] = w;
      bool degenerate = !(w > 1e-12);
      if (auto* t = BranchTrace::current()) degenerate = t->decide(degenerate) != 0;
      if (degenerate) mass[n * P + p] = 0.0;
      for (std::size_t c = 0; c < D; ++c) {
        const double* f = fea.value().raw() + df.index(n, c, 0, 0, 0);
        double acc = 0.0;
        if (degenerate) {
          for (std::size_t v = 0; v < V; ++v) acc += f[v];
          acc /= static_cast<double>(V);
        } else {
          for (std::size_t v = 0; v < V; ++v) acc += m[v] * f[v];
          acc /= w;
        }
        out[(n * P + p) * D + c] = acc;
      }
    }
  return Var::make(std::move(out), {maps, fea}, [N, P, D, V, mass = std::move(mass)](Node& self) {
    auto& pm = *self.parents[0];
    auto& pf = *self.parents[1];
    Tensor gm, gf;
    if (pm.requires_grad) gm = Tensor::zeros(pm.value.shape());
    if (pf.requires_grad) gf = Tensor::zeros(pf.value.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const double w = mass[n * P + p];
        const bool degenerate = !(w > 1e-12);
        const double* m = pm.value.raw() + (n * P + p) * V;
        const double* du = self.grad.raw() + (n * P + p) * D;
        const double* u = self.value.raw() + (n * P + p) * D;
        for (std::size_t c = 0; c < D; ++c) {
          if (du[c] == 0.0) continue;
          const double* f = pf.value.raw() + (n * D + c) * V;
          if (!gf.empty()) {
            double* gfr = gf.raw() + (n * D + c) * V;
            if (degenerate) {
              const double k = du[c] / static_cast<double>(V);
              for (std::size_t v = 0; v < V; ++v) gfr[v] += k;
            } else {
              const double k = du[c] / w;
              for (std::size_t v = 0; v < V; ++v) gfr[v] += k * m[v];
            }
          }
          if (!gm.empty() && !degenerate) {
            double* gmr = gm.raw() + (n * P + p) * V;
            const double k = du[c] / w;
            for (std::size_t v = 0; v < V; ++v) gmr[v] += k * (f[v] - u[c]);
          }
        }
      }
    if (!gm.empty()) pm.accumulate(gm);
    if (!gf.empty()) pf.accumulate(gf);
  });
}

Var prototype_sq_distances(const Var& u, const Var& prototypes) {
  const Tensor& uv = u.value();
  const Tensor& pv = prototypes.value();
  if (uv.rank() != 3 || pv.rank() != 2 || uv.dim(1) != pv.dim(0) || uv.dim(2) != pv.dim(1)) {
    throw std::invalid_argument("prototype_sq_distances: pooled " + shape_str(uv.shape()) + " vs bank " +
                                shape_str(pv.shape()));
  }
  const std::size_t N = uv.dim(0), P = uv.dim(1), D = uv.dim(2);
  Tensor out({N, P});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < D; ++c) {
        const double diff = uv[(n * P + p) * D + c] - pv[p * D + c];
        s += diff * diff;
      }
      out[n * P + p] = s;
    }
  return Var::make(std::move(out), {u, prototypes}, [N, P, D](Node& self) {
    auto& pu = *self.parents[0];
    auto& pp = *self.parents[1];
    Tensor gu(pu.value.shape()), gp(pp.value.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const double k = 2.0 * self.grad[n * P + p];
        for (std::size_t c = 0; c < D; ++c) {
          const double diff = pu.value[(n * P + p) * D + c] - pp.value[p * D + c];
          gu[(n * P + p) * D + c] += k * diff;
          gp[p * D + c] -= k * diff;
        }
      }
    if (pu.requires_grad) pu.accumulate(gu);
    if (pp.requires_grad) pp.accumulate(gp);
  });
}

Var log_similarity(const Var& sq_dist, double eps) {
  Tensor out = sq_dist.value();
  for (auto& v : out.storage()) v = std::log((v + 1.0) / (v + eps));
  return Var::make(std::move(out), {sq_dist}, [eps](Node& self) {
    const Tensor& d = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= 1.0 / (d[i] + 1.0) - 1.0 / (d[i] + eps);
    self.parents[0]->accumulate(g);
  });
}

Var cosine_similarity(const Var& u, const Var& prototypes) {
  const Tensor& uv = u.value();
  const Tensor& pv = prototypes.value();
  if (uv.rank() != 3 || pv.rank() != 2 || uv.dim(1) != pv.dim(0) || uv.dim(2) != pv.dim(1)) {
    throw std::invalid_argument("cosine_similarity: shape mismatch");
  }
  const std::size_t N = uv.dim(0), P = uv.dim(1), D = uv.dim(2);
  constexpr double kEps = 1e-8;
  Tensor out({N, P});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      double dot = 0.0, nu = 0.0, nv = 0.0;
      for (std::size_t c = 0; c < D; ++c) {
        const double a = uv[(n * P + p) * D + c], b = pv[p * D + c];
        dot += a * b;
        nu += a * a;
        nv += b * b;
      }
      out[n * P + p] = dot / (std::sqrt(nu) * std::sqrt(nv) + kEps);
    }
  return Var::make(std::move(out), {u, prototypes}, [N, P, D](Node& self) {
    auto& pu = *self.parents[0];
    auto& pp = *self.parents[1];
    Tensor gu(pu.value.shape()), gp(pp.value.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const double* a = pu.value.raw() + (n * P + p) * D;
        const double* b = pp.value.raw() + p * D;
        double dot = 0.0, nu = 0.0, nv = 0.0;
        for (std::size_t c = 0; c < D; ++c) {
          dot += a[c] * b[c];
          nu += a[c] * a[c];
          nv += b[c] * b[c];
        }
        const double lu = std::sqrt(nu), lv = std::sqrt(nv);
        const double den = lu * lv + kEps;
        const double gy = self.grad[n * P + p];
        for (std::size_t c = 0; c < D; ++c) {
          const double dden_da = lu > 0.0 ? lv * a[c] / lu : 0.0;
          const double dden_db = lv > 0.0 ? lu * b[c] / lv : 0.0;
          gu[(n * P + p) * D + c] += gy * (b[c] * den - dot * dden_da) / (den * den);
          gp[p * D + c] += gy * (a[c] * den - dot * dden_db) / (den * den);
        }
      }
    if (pu.requires_grad) pu.accumulate(gu);
    if (pp.requires_grad) pp.accumulate(gp);
  });
}

Var linear(const Var& s, const Var& w) {
  const Tensor& sv = s.value();
  const Tensor& wv = w.value();
  if (sv.rank() != 2 || wv.rank() != 2 || sv.dim(1) != wv.dim(1)) {
    throw std::invalid_argument("linear: input " + shape_str(sv.shape()) + " weight " + shape_str(wv.shape()));
  }
  const std::size_t N = sv.dim(0), P = sv.dim(1), K = wv.dim(0);
  Tensor out({N, K});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0.0;
      for (std::size_t p = 0; p < P; ++p) acc += sv[n * P + p] * wv[k * P + p];
      out[n * K + k] = acc;
    }
  return Var::make(std::move(out), {s, w}, [N, P, K](Node& self) {
    auto& ps = *self.parents[0];
    auto& pw = *self.parents[1];
    Tensor gs(ps.value.shape()), gw(pw.value.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const double gy = self.grad[n * K + k];
        for (std::size_t p = 0; p < P; ++p) {
          gs[n * P + p] += gy * pw.value[k * P + p];
          gw[k * P + p] += gy * ps.value[n * P + p];
        }
      }
    if (ps.requires_grad) ps.accumulate(gs);
    if (pw.requires_grad) pw.accumulate(gw);
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) throw std::invalid_argument("cross_entropy: shape mismatch");
  const std::size_t N = z.dim(0), K = z.dim(1);
  Tensor probs({N, K});
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw std::invalid_argument("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, z[n * K + k]);
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(z[n * K + k] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(z[n * K + k] - lse);
    total += lse - z[n * K + static_cast<std::size_t>(y)];
  }
  return Var::make(Tensor({1}, total / static_cast<double>(N)), {logits},
                   [N, K, labels, probs = std::move(probs)](Node& self) {
                     Tensor g = probs;
                     for (std::size_t n = 0; n < N; ++n) g[n * K + static_cast<std::size_t>(labels[n])] -= 1.0;
                     g *= self.grad[0] / static_cast<double>(N);
                     self.parents[0]->accumulate(g);
                   });
}

Var masked_row_min(const Var& d, const std::vector<char>& allowed) {
  const Tensor& dv = d.value();
  if (dv.rank() != 2 || allowed.size() != dv.numel()) throw std::invalid_argument("masked_row_min: shape mismatch");
  const std::size_t N = dv.dim(0), P = dv.dim(1);
  Tensor out({N});
  std::vector<std::size_t> arg(N);
  for (std::size_t n = 0; n < N; ++n) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = P;
    for (std::size_t p = 0; p < P; ++p) {
      if (allowed[n * P + p] && dv[n * P + p] < best) {
        best = dv[n * P + p];
        bi = p;
      }
    }
    if (bi == P) throw std::invalid_argument("masked_row_min: row " + std::to_string(n) + " has no allowed entry");
    if (auto* t = BranchTrace::current()) bi = static_cast<std::size_t>(t->decide(bi));
    out[n] = dv[n * P + bi];
    arg[n] = n * P + bi;
  }
  return Var::make(std::move(out), {d}, [arg = std::move(arg)](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t n = 0; n < arg.size(); ++n) g[arg[n]] += self.grad[n];
    self.parents[0]->accumulate(g);
  });
}

}  // namespace maproto::ops
