#include "maproto/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace maproto {

std::string_view branch_name(BranchKind kind) {
  switch (kind) {
    case BranchKind::HWD: return "hwd";
    case BranchKind::CWD: return "cwd";
    case BranchKind::CHD: return "chd";
    case BranchKind::CHW: return "chw";
  }
  return "?";
}

std::size_t rotated_axis(BranchKind kind) {
  switch (kind) {
    case BranchKind::HWD: return 1;
    case BranchKind::CWD: return 2;
    case BranchKind::CHD: return 3;
    case BranchKind::CHW: return 4;
  }
  return 1;
}

Tensor z_pool(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("z_pool: expected (C,H,W,D), got " + shape_str(x.shape()));
  if (x.numel() == 0) throw std::invalid_argument("z_pool: empty tensor");
  NoGradGuard guard;
  Tensor batched = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2), x.dim(3)});
  Tensor out = ops::z_pool(Var(std::move(batched))).value();
  return out.reshaped({2, x.dim(1), x.dim(2), x.dim(3)});
}

QuadBranch::QuadBranch(std::size_t kernel, Rng& rng) {
  if (kernel % 2 == 0) {
    throw std::invalid_argument("quadruplet branch: kernel " + std::to_string(kernel) +
                                " would change spatial extents; use an odd size");
  }
  conv = Conv3d(2, 1, kernel, 1, kernel / 2, false, rng);
  bn = BatchNorm3d(1);
}

Var QuadBranch::gate(const Var& rotated, bool training) {
  return ops::sigmoid(bn.forward(conv.forward(ops::z_pool(rotated)), training));
}

Var QuadBranch::core(const Var& rotated, bool training, bool pin_gate) {
  require_volume_batch(rotated.value(), "quadruplet branch");
  if (pin_gate) {
    Shape gs = rotated.shape();
    gs[1] = 1;
    return ops::mul_channel_gate(rotated, Var(Tensor::full(gs, 1.0)));
  }
  return ops::mul_channel_gate(rotated, gate(rotated, training));
}

Var QuadBranch::forward(const Var& x, BranchKind kind, bool training, bool pin_gate) {
  const std::size_t axis = rotated_axis(kind);
  if (axis == 1) return core(x, training, pin_gate);
  return ops::transpose(core(ops::transpose(x, 1, axis), training, pin_gate), 1, axis);
}

void QuadBranch::collect(const std::string& prefix, ParamCollector& out) {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

QuadrupletAttention::QuadrupletAttention(std::size_t kernel, Rng& rng) {
  for (auto& b : branches_) b = QuadBranch(kernel, rng);
}

std::array<Var, 4> QuadrupletAttention::forward_branches(const Var& x, bool training) {
  std::array<Var, 4> out;
  for (std::size_t i = 0; i < 4; ++i) out[i] = branches_[i].forward(x, kAllBranches[i], training, pin_gates_for_testing);
  return out;
}

Var QuadrupletAttention::forward(const Var& x, bool training) {
  auto b = forward_branches(x, training);
  // Pairwise summation keeps the pinned-gate case exact.
  return ops::scale(ops::add(ops::add(b[0], b[1]), ops::add(b[2], b[3])), 0.25);
}

void QuadrupletAttention::collect(const std::string& prefix, ParamCollector& out) {
  for (std::size_t i = 0; i < 4; ++i) branches_[i].collect(prefix + ".branch_" + std::string(branch_name(kAllBranches[i])), out);
}

// ---- 2D reference ------------------------------------------------------------

namespace {

// (C,H,W) with axes 0 and `axis` swapped.
Tensor swap_first(const Tensor& x, std::size_t axis) { return axis == 0 ? x : transpose(x, 0, axis); }

Tensor gate_2d(const Tensor& x, const TripletBranch2D& b) {
  const std::size_t C = x.dim(0), A = x.dim(1), B = x.dim(2);
  if (b.kernel.rank() != 3 || b.kernel.dim(0) != 2 || b.kernel.dim(1) != b.kernel.dim(2) || b.kernel.dim(1) % 2 == 0) {
    throw std::invalid_argument("triplet branch: kernel must be (2,k,k) with odd k");
  }
  const std::ptrdiff_t k = static_cast<std::ptrdiff_t>(b.kernel.dim(1));
  const std::ptrdiff_t pad = k / 2;

  Tensor pooled({2, A, B});
  for (std::size_t i = 0; i < A * B; ++i) {
    double mx = x[i], s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      mx = std::max(mx, x[c * A * B + i]);
      s += x[c * A * B + i];
    }
    pooled[i] = mx;
    pooled[A * B + i] = s / static_cast<double>(C);
  }

  Tensor conv({A, B});
  for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(A); ++a)
    for (std::ptrdiff_t bb = 0; bb < static_cast<std::ptrdiff_t>(B); ++bb) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::ptrdiff_t u = 0; u < k; ++u)
          for (std::ptrdiff_t v = 0; v < k; ++v) {
            const std::ptrdiff_t ia = a + u - pad, ib = bb + v - pad;
            if (ia < 0 || ib < 0 || ia >= static_cast<std::ptrdiff_t>(A) || ib >= static_cast<std::ptrdiff_t>(B)) continue;
            acc += b.kernel[(c * k + u) * k + v] * pooled[(c * A + ia) * B + ib];
          }
      conv[a * B + bb] = acc;
    }

  double mean = b.mean, var = b.var;
  if (b.use_image_statistics) {
    mean = conv.sum() / static_cast<double>(conv.numel());
    var = 0.0;
    for (double v : conv.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(conv.numel());
  }
  Tensor gate({A, B});
  for (std::size_t i = 0; i < gate.numel(); ++i) {
    const double z = b.gamma * (conv[i] - mean) / std::sqrt(var + b.eps) + b.beta;
    gate[i] = 1.0 / (1.0 + std::exp(-z));
  }
  return gate;
}

}  // namespace

std::array<Tensor, 3> triplet_branches_2d(const Tensor& x, const std::array<TripletBranch2D, 3>& branches,
                                          bool pin_gates) {
  if (x.rank() != 3) throw std::invalid_argument("triplet_attention_2d: expected (C,H,W), got " + shape_str(x.shape()));
  std::array<Tensor, 3> out;
  constexpr std::array<std::size_t, 3> axes{0, 1, 2};
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor r = swap_first(x, axes[i]);
    if (!pin_gates) {
      const Tensor g = gate_2d(r, branches[i]);
      const std::size_t plane = g.numel();
      for (std::size_t c = 0; c < r.dim(0); ++c)
        for (std::size_t j = 0; j < plane; ++j) r[c * plane + j] *= g[j];
    }
    out[i] = swap_first(r, axes[i]);
  }
  return out;
}

Tensor triplet_attention_2d(const Tensor& x, const std::array<TripletBranch2D, 3>& branches, bool pin_gates) {
  auto b = triplet_branches_2d(x, branches, pin_gates);
  Tensor out = b[0];
  out += b[1];
  out += b[2];
  out *= 1.0 / 3.0;
  return out;
}

}  // namespace maproto
