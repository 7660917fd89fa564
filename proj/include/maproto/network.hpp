#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "maproto/attention.hpp"
#include "maproto/multiscale.hpp"

namespace maproto {

enum class SimilarityKind { Log, Cosine };

SimilarityKind parse_similarity(std::string_view name);
std::string_view similarity_name(SimilarityKind kind);

struct NetworkConfig {
  std::size_t in_channels = 4;
  std::array<std::size_t, 3> input_shape{128, 128, 96};

  // Backbone: stride-2 stem convolution, stride-2 max pool, then bottleneck stages.
  std::size_t stem_channels = 64;
  std::size_t stem_kernel = 7;
  std::size_t residual_stages = 1;
  std::size_t stage_blocks = 3;
  std::size_t expansion = 4;

  bool use_quadruplet = true;
  std::size_t attention_kernel = 7;

  bool use_multiscale = true;
  std::size_t n_scale = 2;
  FusionVariant fusion = FusionVariant::PoolConcat;

  std::size_t prototypes = 30;
  std::size_t prototype_dim = 128;
  std::size_t num_classes = 2;
  SimilarityKind similarity = SimilarityKind::Log;
  double similarity_eps = 1e-4;
  double soft_mask_omega = 4.0;
  bool feature_squash = false;  // sigmoid after the feature module

  /// Number of pyramid levels the backbone emits.
  std::size_t emitted_levels() const { return use_multiscale ? n_scale : 1; }
  /// Throws std::invalid_argument describing the first inconsistency.
  void validate() const;
};

/// Shapes (C, X, Y, Z) of every tap the backbone can emit, shallowest first.
std::vector<Shape> backbone_tap_shapes(const NetworkConfig& cfg);
/// Shapes of the levels actually emitted for `cfg`, shallowest first.
std::vector<Shape> pyramid_shapes(const NetworkConfig& cfg);

class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(std::size_t in, std::size_t width, std::size_t expansion, std::size_t stride, Rng& rng);

  Var forward(const Var& x, bool training);
  void collect(const std::string& prefix, ParamCollector& out);

 private:
  Conv3d conv1_, conv2_, conv3_;
  BatchNorm3d bn1_, bn2_, bn3_;
  std::optional<Conv3d> proj_;
  std::optional<BatchNorm3d> proj_bn_;
};

/// 3D residual backbone truncated after `residual_stages` stages, with an
/// optional quadruplet-attention layer after each emitted tap.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const NetworkConfig& cfg, Rng& rng);

  /// Pyramid levels, shallowest first. Rejects a channel count other than the configured one.
  std::vector<Var> forward(const Var& x, bool training);
  void collect(const std::string& prefix, ParamCollector& out);

  std::size_t attention_layers() const;
  QuadrupletAttention* attention(std::size_t tap) { return attn_.at(tap) ? &*attn_[tap] : nullptr; }

 private:
  std::size_t in_channels_ = 0;
  std::size_t first_emitted_ = 0;
  Conv3d stem_conv_;
  BatchNorm3d stem_bn_;
  std::vector<std::vector<Bottleneck>> stages_;
  std::vector<std::optional<QuadrupletAttention>> attn_;  // per tap
};

/// Learnable prototype vectors with a fixed, balanced class assignment.
struct PrototypeBank {
  Var vectors;                 // (P, D)
  std::vector<int> class_of;   // size P

  std::size_t size() const { return class_of.size(); }
  std::size_t dim() const { return vectors.shape()[1]; }
  /// Throws unless every class owns the same number of prototypes.
  void validate(std::size_t num_classes) const;
};

/// Two 1x1x1 convolutions with a ReLU between them, optional logistic output.
class PointwiseStack {
 public:
  PointwiseStack() = default;
  PointwiseStack(std::size_t in, std::size_t hidden, std::size_t out, bool squash, Rng& rng);
  Var forward(const Var& x) const;
  void collect(const std::string& prefix, ParamCollector& out);

  Conv3d first;
  Conv3d second;
  bool squash = false;
};

struct ForwardOutput {
  Var logits;        // (N, K)
  Var raw_maps;      // (N, P, X', Y', Z') mapping-module output in (0, 1)
  Var maps;          // soft-masked attribution maps in [0, 1]
  Var features;      // (N, D, X', Y', Z')
  Var pooled;        // (N, P, D) map-weighted features
  Var sq_distances;  // (N, P)
  Var scores;        // (N, P)
  std::vector<Var> pyramid;
  Var h_mul;
  Var cam_maps;      // (N, K, X', Y', Z')
  Var cam_logits;    // (N, K)
};

/// Per-module parameter totals, in construction order.
struct ArchitectureFingerprint {
  std::vector<std::pair<std::string, std::size_t>> modules;
  std::size_t total = 0;
  std::string str() const;
};

class MAProtoNet {
 public:
  MAProtoNet(const NetworkConfig& cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }

  ForwardOutput forward(const Tensor& x);
  ForwardOutput forward(const Var& x);

  // Stages of the forward pass, exposed for the losses and tests.
  std::vector<Var> backbone_forward(const Var& x) { return backbone_.forward(x, training_); }
  Var fuse(const std::vector<Var>& pyramid) const { return multiscale_.fuse(pyramid); }
  Var mapping(const Var& h_mul) const { return mapping_.forward(h_mul); }
  Var feature(const Var& h_deep) const { return features_.forward(h_deep); }
  Var similarity(const Var& maps, const Var& fea, Var* pooled = nullptr, Var* sq_dist = nullptr) const;
  Var classify(const Var& scores) const { return ops::linear(scores, head_); }
  Var cam_maps(const Var& h_mul) const { return cam_.forward(h_mul); }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  PrototypeBank& bank() { return bank_; }
  const PrototypeBank& bank() const { return bank_; }
  Var& head_weight() { return head_; }
  const Var& head_weight() const { return head_; }
  Backbone& backbone() { return backbone_; }
  MultiScaleModule& multiscale() { return multiscale_; }
  PointwiseStack& mapping_module() { return mapping_; }
  PointwiseStack& feature_module() { return features_; }
  Conv3d& cam_head() { return cam_; }

  /// All parameters in a stable order; names are checkpoint keys.
  std::vector<NamedParam> named_parameters();
  std::vector<NamedBuffer> named_buffers();
  /// Everything except the classification head.
  std::vector<NamedParam> body_parameters();
  std::size_t parameter_count();
  ArchitectureFingerprint fingerprint();

 private:
  void collect(ParamCollector& out);

  NetworkConfig cfg_;
  bool training_ = true;
  Backbone backbone_;
  MultiScaleModule multiscale_;
  PointwiseStack mapping_;
  PointwiseStack features_;
  Conv3d cam_;
  PrototypeBank bank_;
  Var head_;
};

/// Head initialised to +1 where prototype class equals output class, -0.5 elsewhere.
Tensor initial_head_weights(const std::vector<int>& class_of, std::size_t num_classes);

/// Adds a leading batch axis to a single (C, X, Y, Z) subject.
Tensor as_batch(const Tensor& subject);

}  // namespace maproto
