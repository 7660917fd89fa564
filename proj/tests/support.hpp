#pragma once

// Shared helpers for the test binaries: random tensors, finite differences and
// small generators for property tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "maproto/autograd.hpp"
#include "maproto/ops.hpp"

namespace testing_support {

using maproto::Shape;
using maproto::Tensor;
using maproto::Var;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.storage()) v = u(gen);
  return t;
}

inline std::size_t pick(std::mt19937_64& gen, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
}

inline double uniform(std::mt19937_64& gen, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(gen);
}

/// Scalar probe of an op output: sum(out * weights) with fixed random weights.
inline Var probe(const Var& out, std::uint64_t seed = 99) {
  std::mt19937_64 gen(seed);
  return maproto::ops::sum(maproto::ops::mul_const(out, random_tensor(out.shape(), gen)));
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) for one parameter,
/// using central differences with step h. `f` rebuilds the scalar from scratch.
inline double relative_gradient_error(const std::function<Var()>& f, Var param, double h) {
  param.zero_grad();
  maproto::backward(f());
  const Tensor analytic = param.grad();
  std::vector<double> a(analytic.storage()), n(a.size()), d(a.size());
  Tensor& w = param.mutable_value();
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double keep = w[i];
    double plus = 0.0, minus = 0.0;
    {
      maproto::NoGradGuard g;
      w[i] = keep + h;
      plus = f().value()[0];
      w[i] = keep - h;
      minus = f().value()[0];
    }
    w[i] = keep;
    n[i] = (plus - minus) / (2.0 * h);
    d[i] = a[i] - n[i];
  }
  const double scale = std::max(norm(a), norm(n));
  return scale > 0.0 ? norm(d) / scale : 0.0;
}

/// Central-difference audit of one parameter at step h over `coords` (all
/// coordinates when empty). `raw_error` differentiates the network as is;
/// `piecewise_error` replays the branch choices recorded at the unperturbed
/// point, so both stencil ends stay on the piece the analytic gradient
/// describes. `straddling` counts coordinates whose raw stencil switched a
/// branch.
struct GradientAudit {
  double raw_error = 0.0;
  double piecewise_error = 0.0;
  std::size_t checked = 0;
  std::size_t straddling = 0;
};

inline GradientAudit audit_gradient(const std::function<Var()>& f, Var param, double h,
                                    std::vector<std::size_t> coords = {}) {
  param.zero_grad();
  maproto::backward(f());
  const Tensor analytic = param.grad();
  Tensor& w = param.mutable_value();
  if (coords.empty())
    for (std::size_t i = 0; i < w.numel(); ++i) coords.push_back(i);

  maproto::NoGradGuard no_grad;
  maproto::ops::BranchTrace base;
  f();
  const std::uint64_t base_digest = base.digest();
  std::vector<double> a, raw, piece, d_raw, d_piece;
  std::size_t straddling = 0;
  for (std::size_t i : coords) {
    const double keep = w[i];
    double plus = 0.0, minus = 0.0;
    bool switched = false;
    {
      maproto::ops::BranchTrace probe;
      w[i] = keep + h;
      plus = f().value()[0];
      switched = probe.digest() != base_digest;
      probe.reset();
      w[i] = keep - h;
      minus = f().value()[0];
      switched = switched || probe.digest() != base_digest;
    }
    const double n_raw = (plus - minus) / (2.0 * h);
    base.replay();
    w[i] = keep + h;
    plus = f().value()[0];
    base.replay();
    w[i] = keep - h;
    minus = f().value()[0];
    w[i] = keep;
    const double n_piece = (plus - minus) / (2.0 * h);
    a.push_back(analytic[i]);
    raw.push_back(n_raw);
    piece.push_back(n_piece);
    d_raw.push_back(analytic[i] - n_raw);
    d_piece.push_back(analytic[i] - n_piece);
    straddling += switched;
  }
  GradientAudit out;
  out.checked = coords.size();
  out.straddling = straddling;
  const double sr = std::max(norm(a), norm(raw)), sp = std::max(norm(a), norm(piece));
  out.raw_error = sr > 0.0 ? norm(d_raw) / sr : 0.0;
  out.piecewise_error = sp > 0.0 ? norm(d_piece) / sp : 0.0;
  return out;
}

}  // namespace testing_support
