#pragma once

#include <array>
#include <string_view>

#include "maproto/layers.hpp"

namespace maproto {

/// Which axis of (C, H, W, D) is rotated into first position before gating.
enum class BranchKind { HWD, CWD, CHD, CHW };

inline constexpr std::array<BranchKind, 4> kAllBranches{BranchKind::HWD, BranchKind::CWD, BranchKind::CHD,
                                                        BranchKind::CHW};

std::string_view branch_name(BranchKind kind);

/// Axis of an (N, C, H, W, D) batch swapped with the channel axis; 1 means none.
std::size_t rotated_axis(BranchKind kind);

/// Single-subject Z-pool on a (C, H, W, D) tensor: (2, H, W, D) of channel max and mean.
Tensor z_pool(const Tensor& x);

/// One gating branch: x * sigmoid(bn(conv(z_pool(x)))) on the rotated input.
class QuadBranch {
 public:
  QuadBranch() = default;
  /// `kernel` must be odd; padding kernel/2 keeps extents.
  QuadBranch(std::size_t kernel, Rng& rng);

  /// Gating applied to an already-rotated batch.
  Var core(const Var& rotated, bool training, bool pin_gate = false);
  /// The gate alone, (N, 1, ...) over the rotated batch.
  Var gate(const Var& rotated, bool training);
  /// Rotate per `kind`, gate, rotate back.
  Var forward(const Var& x, BranchKind kind, bool training, bool pin_gate = false);

  void collect(const std::string& prefix, ParamCollector& out);

  Conv3d conv;
  BatchNorm3d bn;
};

/// Four-branch average of rotated gating blocks for (N, C, H, W, D) batches.
/// Each branch owns its own convolution and normalisation parameters.
class QuadrupletAttention {
 public:
  QuadrupletAttention() = default;
  QuadrupletAttention(std::size_t kernel, Rng& rng);

  Var forward(const Var& x, bool training);
  /// Branch outputs in the original axis order, indexed as kAllBranches.
  std::array<Var, 4> forward_branches(const Var& x, bool training);

  void collect(const std::string& prefix, ParamCollector& out);

  QuadBranch& branch(BranchKind kind) { return branches_[static_cast<std::size_t>(kind)]; }

  /// Test hook: every gate evaluates to exactly 1.
  bool pin_gates_for_testing = false;

 private:
  std::array<QuadBranch, 4> branches_;
};

/// Parameters of one 2D triplet branch: a (2, k, k) kernel and a scalar
/// normalisation with either fixed statistics or statistics of the image.
struct TripletBranch2D {
  Tensor kernel;
  double gamma = 1.0;
  double beta = 0.0;
  double mean = 0.0;
  double var = 1.0;
  double eps = 1e-5;
  bool use_image_statistics = false;
};

/// 2D triplet attention on a (C, H, W) image, used as a reference for the
/// quadruplet block. Rejects any input that is not rank 3.
Tensor triplet_attention_2d(const Tensor& x, const std::array<TripletBranch2D, 3>& branches,
                            bool pin_gates = false);

/// Individual triplet branch outputs in original (C, H, W) order: HW, CW, CH.
std::array<Tensor, 3> triplet_branches_2d(const Tensor& x, const std::array<TripletBranch2D, 3>& branches,
                                          bool pin_gates = false);

}  // namespace maproto
