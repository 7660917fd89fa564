#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "maproto/layers.hpp"

namespace maproto {

/// Down-sampling and fusion architecture for shallow pyramid levels.
///   a: strided convolution, concatenation
///   b: strided convolution, addition
///   c: max+avg pooling, concatenation
///   d: max+avg pooling, 1x1 projection, addition
enum class FusionVariant { ConvConcat, ConvAdd, PoolConcat, PoolAdd };

FusionVariant parse_fusion_variant(std::string_view tag);
char fusion_tag(FusionVariant v);
inline bool is_concat(FusionVariant v) { return v == FusionVariant::ConvConcat || v == FusionVariant::PoolConcat; }
inline bool uses_pooling(FusionVariant v) { return v == FusionVariant::PoolConcat || v == FusionVariant::PoolAdd; }

/// Integer down-sampling factor mapping `shallow` spatial extents onto `deep`.
/// Throws unless every axis divides exactly by the same factor.
std::size_t pyramid_factor(const Shape& shallow, const Shape& deep);

/// Down-samples one shallow level by `factor`. Pool variants concatenate
/// max- and average-pooled copies; conv variants and variant d need `proj`.
Var downsample(const Var& h, std::size_t factor, FusionVariant variant, const Conv3d* proj);

/// Learnable part of the fusion: one projection per shallow level (none for c).
class MultiScaleModule {
 public:
  MultiScaleModule() = default;
  /// `channels[s]` and `factors[s]` describe pyramid level s; the last level
  /// is the deepest and has factor 1.
  MultiScaleModule(FusionVariant variant, std::vector<std::size_t> channels, std::vector<std::size_t> factors,
                   Rng& rng);

  FusionVariant variant() const { return variant_; }
  std::size_t levels() const { return channels_.size(); }
  std::size_t output_channels() const;

  Var downsample_level(std::size_t level, const Var& h) const;
  /// Fused tensor at the deepest level's resolution. One level passes through unchanged.
  Var fuse(const std::vector<Var>& pyramid) const;

  void collect(const std::string& prefix, ParamCollector& out);
  std::optional<Conv3d>& projection(std::size_t level) { return proj_.at(level); }

 private:
  FusionVariant variant_ = FusionVariant::PoolConcat;
  std::vector<std::size_t> channels_;
  std::vector<std::size_t> factors_;
  std::vector<std::optional<Conv3d>> proj_;
};

}  // namespace maproto
