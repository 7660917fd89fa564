#include "maproto/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace maproto {

void LossWeights::validate() const {
  for (double v : {clst, sep, mmap, oc, l1})
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("loss weights must be finite and non-negative");
}

Var loss_cls(const Var& logits, const std::vector<int>& labels) { return ops::cross_entropy(logits, labels); }

Var loss_oc(const Var& cam_logits, const std::vector<int>& labels) { return ops::cross_entropy(cam_logits, labels); }

std::vector<char> prototype_class_mask(const std::vector<int>& class_of, const std::vector<int>& labels, bool same) {
  std::vector<char> mask(labels.size() * class_of.size());
  for (std::size_t n = 0; n < labels.size(); ++n) {
    bool any = false;
    for (std::size_t p = 0; p < class_of.size(); ++p) {
      const bool match = class_of[p] == labels[n];
      mask[n * class_of.size() + p] = match == same;
      any |= match == same;
    }
    if (!any) {
      throw std::invalid_argument("class " + std::to_string(labels[n]) + (same ? " owns no" : " leaves no other-class") +
                                  " prototypes");
    }
  }
  return mask;
}

namespace {

void require_distances(const Var& d, const std::vector<int>& labels, const PrototypeBank& bank) {
  if (d.shape().size() != 2 || d.shape()[0] != labels.size() || d.shape()[1] != bank.size()) {
    throw std::invalid_argument("prototype distances " + shape_str(d.shape()) + " do not match batch/bank");
  }
}

}  // namespace

Var loss_clst(const Var& sq_distances, const std::vector<int>& labels, const PrototypeBank& bank) {
  require_distances(sq_distances, labels, bank);
  return ops::mean(ops::masked_row_min(sq_distances, prototype_class_mask(bank.class_of, labels, true)));
}

Var loss_sep(const Var& sq_distances, const std::vector<int>& labels, const PrototypeBank& bank) {
  require_distances(sq_distances, labels, bank);
  return ops::scale(ops::mean(ops::masked_row_min(sq_distances, prototype_class_mask(bank.class_of, labels, false))),
                    -1.0);
}

Var loss_l1(const Var& head_weight, const std::vector<int>& class_of) {
  const Shape& s = head_weight.shape();
  if (s.size() != 2 || s[1] != class_of.size()) throw std::invalid_argument("loss_l1: head must be (K, P)");
  Tensor off(s);
  for (std::size_t k = 0; k < s[0]; ++k)
    for (std::size_t p = 0; p < s[1]; ++p) off[k * s[1] + p] = class_of[p] != static_cast<int>(k) ? 1.0 : 0.0;
  return ops::sum(ops::abs(ops::mul_const(head_weight, off)));
}

Var mapping_consistency(const MAProtoNet& model, const Var& transformed_h_mul, const Var& raw_maps,
                        const std::vector<AffineSpec>& specs) {
  const Var lhs = model.mapping(transformed_h_mul);
  const Var rhs = affine_transform(raw_maps, specs);
  if (lhs.shape() != rhs.shape()) {
    throw std::invalid_argument("mapping loss: " + shape_str(lhs.shape()) + " vs " + shape_str(rhs.shape()));
  }
  // mean over (N, P, voxels) times P == sum over prototypes of the voxel mean, batch-averaged.
  return ops::scale(ops::mean(ops::abs(ops::sub(lhs, rhs))), static_cast<double>(raw_maps.shape()[1]));
}

Var loss_mmap(const MAProtoNet& model, const std::vector<Var>& pyramid, const Var& raw_maps,
              const std::vector<AffineSpec>& specs) {
  std::vector<Var> warped;
  warped.reserve(pyramid.size());
  for (const auto& h : pyramid) warped.push_back(affine_transform(h, specs));
  return mapping_consistency(model, model.fuse(warped), raw_maps, specs);
}

Var loss_map(const MAProtoNet& model, const Var& h_mul, const Var& raw_maps, const std::vector<AffineSpec>& specs) {
  return mapping_consistency(model, affine_transform(h_mul, specs), raw_maps, specs);
}

Var total_loss(const LossTerms& t, const LossWeights& w) {
  return ops::weighted_sum({t.cls, t.clst, t.sep, t.mapping, t.oc}, {1.0, w.clst, w.sep, w.mmap, w.oc});
}

LossTerms compute_losses(const MAProtoNet& model, const ForwardOutput& out, const std::vector<int>& labels,
                         const std::vector<AffineSpec>& specs, bool use_mmap, bool with_mapping) {
  LossTerms t;
  t.cls = loss_cls(out.logits, labels);
  t.clst = loss_clst(out.sq_distances, labels, model.bank());
  t.sep = loss_sep(out.sq_distances, labels, model.bank());
  if (!with_mapping) {
    t.mapping = Var(Tensor({1}, 0.0));
  } else {
    t.mapping = use_mmap ? loss_mmap(model, out.pyramid, out.raw_maps, specs)
                         : loss_map(model, out.h_mul, out.raw_maps, specs);
  }
  t.oc = loss_oc(out.cam_logits, labels);
  return t;
}

}  // namespace maproto
