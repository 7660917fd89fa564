#pragma once

#include <vector>

#include "maproto/affine.hpp"
#include "maproto/network.hpp"

namespace maproto {

struct LossWeights {
  double clst = 0.8;
  double sep = 0.08;
  double mmap = 0.5;
  double oc = 0.05;
  double l1 = 0.5;  // head fine-tuning only

  /// Throws std::invalid_argument if any weight is negative or not finite.
  void validate() const;
};

/// Mean softmax cross-entropy of the class logits.
Var loss_cls(const Var& logits, const std::vector<int>& labels);
/// Cross-entropy of the auxiliary CAM logits.
Var loss_oc(const Var& cam_logits, const std::vector<int>& labels);

/// Mask over (N, P): prototype p belongs (same=true) or does not belong to sample n's class.
std::vector<char> prototype_class_mask(const std::vector<int>& class_of, const std::vector<int>& labels, bool same);

/// Batch mean of the smallest squared distance to a prototype of the true class.
Var loss_clst(const Var& sq_distances, const std::vector<int>& labels, const PrototypeBank& bank);
/// Negated batch mean of the smallest squared distance to a prototype of another class.
Var loss_sep(const Var& sq_distances, const std::vector<int>& labels, const PrototypeBank& bank);

/// L1 norm of head weights joining each prototype to the classes it is not assigned to.
Var loss_l1(const Var& head_weight, const std::vector<int>& class_of);

/// Sum over prototypes of the per-voxel mean |M(transformed) - A(raw_maps)|, averaged over the batch.
Var mapping_consistency(const MAProtoNet& model, const Var& transformed_h_mul, const Var& raw_maps,
                        const std::vector<AffineSpec>& specs);

/// Multi-scale mapping loss: every pyramid level is warped, then fused.
Var loss_mmap(const MAProtoNet& model, const std::vector<Var>& pyramid, const Var& raw_maps,
              const std::vector<AffineSpec>& specs);
/// Single-scale mapping loss: the fused tensor itself is warped.
Var loss_map(const MAProtoNet& model, const Var& h_mul, const Var& raw_maps, const std::vector<AffineSpec>& specs);

struct LossTerms {
  Var cls, clst, sep, mapping, oc;
};

/// L = cls + w.clst*clst + w.sep*sep + w.mmap*mapping + w.oc*oc.
Var total_loss(const LossTerms& terms, const LossWeights& w);

/// All joint-stage terms for one forward pass. `use_mmap` selects the
/// multi-scale mapping loss over the single-scale one; with `with_mapping`
/// off the mapping term is a constant zero and no warp is computed.
LossTerms compute_losses(const MAProtoNet& model, const ForwardOutput& out, const std::vector<int>& labels,
                         const std::vector<AffineSpec>& specs, bool use_mmap, bool with_mapping = true);

}  // namespace maproto
