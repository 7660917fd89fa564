#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "maproto/ops.hpp"

namespace maproto {

using Rng = std::mt19937_64;

struct NamedParam {
  std::string name;
  Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

/// Accumulates named parameters and buffers while walking a module tree.
struct ParamCollector {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;

  void param(const std::string& name, const Var& v) { params.push_back({name, v}); }
  void buffer(const std::string& name, Tensor& t) { buffers.push_back({name, &t}); }
};

std::size_t count_parameters(const std::vector<NamedParam>& params);

class Conv3d {
 public:
  Conv3d() = default;
  /// Fan-in scaled normal initialisation, zero bias.
  Conv3d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, bool bias, Rng& rng);

  Var forward(const Var& x) const { return ops::conv3d(x, weight, bias, options); }
  void collect(const std::string& prefix, ParamCollector& out);

  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t kernel() const { return weight.shape()[2]; }

  Var weight;
  Var bias;
  ops::ConvOptions options;
};

class BatchNorm3d {
 public:
  BatchNorm3d() = default;
  explicit BatchNorm3d(std::size_t channels);

  Var forward(const Var& x, bool training) { return ops::batch_norm(x, gamma, beta, state, training); }
  void collect(const std::string& prefix, ParamCollector& out);

  Var gamma;
  Var beta;
  ops::BatchNormState state;
};

}  // namespace maproto
