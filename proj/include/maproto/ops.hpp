#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "maproto/autograd.hpp"

namespace maproto::ops {

using Triple = std::array<std::size_t, 3>;

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Elementwise product with a constant (non-differentiated) tensor.
Var mul_const(const Var& a, const Tensor& c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var abs(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);

/// Sum of scalars weighted by constants; skips zero weights.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

// ---- structural ------------------------------------------------------------

Var transpose(const Var& a, std::size_t axis_a, std::size_t axis_b);
Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& a, std::size_t start, std::size_t count);

/// x (N,C,...) times a single-channel gate (N,1,...) broadcast over channels.
Var mul_channel_gate(const Var& x, const Var& gate);

// ---- volumetric ------------------------------------------------------------

struct ConvOptions {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
};

Triple conv_output_extent(const Triple& in, const Triple& kernel, const ConvOptions& opt);

/// 3D cross-correlation. x (N,Ci,X,Y,Z), w (Co,Ci,Kx,Ky,Kz), bias (Co) or undefined.
Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvOptions& opt);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation over (N, spatial). Training mode uses batch
/// statistics and updates the running estimates; evaluation uses the
/// running estimates only.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool training);

Var max_pool3d(const Var& x, const Triple& kernel, const Triple& stride, const Triple& padding);
Var avg_pool3d(const Var& x, const Triple& kernel, const Triple& stride);
/// (N,C,X,Y,Z) -> (N,C)
Var global_avg_pool(const Var& x);

/// (N,C,X,Y,Z) -> (N,2,X,Y,Z): per-location max and mean over channels.
Var z_pool(const Var& x);

// ---- prototype layer -------------------------------------------------------

/// Per-map min-max normalisation and logistic sharpening rescaled so that
/// g(0) = 0 and g(1) = 1. A map with zero range becomes 0.5 everywhere.
Var soft_mask(const Var& raw, double omega);

/// maps (N,P,X,Y,Z), fea (N,D,X,Y,Z) -> (N,P,D): map-weighted spatial average.
/// A map with zero mass pools to the plain spatial mean.
Var masked_pool(const Var& maps, const Var& fea);

/// u (N,P,D), prototypes (P,D) -> (N,P) squared distances.
Var prototype_sq_distances(const Var& u, const Var& prototypes);

/// log((d + 1) / (d + eps)) elementwise.
Var log_similarity(const Var& sq_dist, double eps);

/// u (N,P,D), prototypes (P,D) -> (N,P) cosine similarity.
Var cosine_similarity(const Var& u, const Var& prototypes);

/// s (N,P), w (K,P) -> (N,K); no bias.
Var linear(const Var& s, const Var& w);

/// Mean softmax cross-entropy; labels index the last axis of (N,K) logits.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

/// d (N,P) -> (N): minimum over entries where allowed[n*P + p] is set.
Var masked_row_min(const Var& d, const std::vector<char>& allowed);

// ---- branch tracing --------------------------------------------------------

/// Captures the discrete choices made by the non-smooth ops on this thread
/// (ReLU and |x| signs, pooling arg-maxima, soft-mask extremes, row minima,
/// zero-mass fallbacks) while alive. In replay mode the ops reuse the
/// recorded choices in order instead of recomputing them, so a forward pass
/// evaluates the smooth piece active at the recording point.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  /// Digest of every choice seen since construction or the last reset.
  std::uint64_t digest() const { return digest_; }
  void reset();
  /// Switches to replaying the recorded choices from the start.
  void replay();
  bool replaying() const { return replaying_; }
  std::size_t size() const { return choices_.size(); }

  /// Returns the choice to act on: the recorded one when replaying,
  /// otherwise `computed`, which is recorded.
  std::uint64_t decide(std::uint64_t computed);

  static BranchTrace* current();

 private:
  std::uint64_t digest_;
  std::vector<std::uint64_t> choices_;
  std::size_t cursor_ = 0;
  bool replaying_ = false;
  BranchTrace* previous_;
};

/// Choice helper for ops: passes `computed` through when no trace is active.
inline std::uint64_t decide(BranchTrace* t, std::uint64_t computed) { return t ? t->decide(computed) : computed; }

}  // namespace maproto::ops
