#include "maproto/layers.hpp"

#include <cmath>

namespace maproto {

std::size_t count_parameters(const std::vector<NamedParam>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

Conv3d::Conv3d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
               std::size_t padding, bool with_bias, Rng& rng) {
  Tensor w({out_channels, in_channels, kernel, kernel, kernel});
  const double fan_in = static_cast<double>(in_channels * kernel * kernel * kernel);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w.storage()) v = dist(rng);
  weight = Var::parameter(std::move(w));
  if (with_bias) bias = Var::parameter(Tensor::zeros({out_channels}));
  options.stride = {stride, stride, stride};
  options.padding = {padding, padding, padding};
}

void Conv3d::collect(const std::string& prefix, ParamCollector& out) {
  out.param(prefix + ".weight", weight);
  if (bias.defined()) out.param(prefix + ".bias", bias);
}

BatchNorm3d::BatchNorm3d(std::size_t channels)
    : gamma(Var::parameter(Tensor::full({channels}, 1.0))), beta(Var::parameter(Tensor::zeros({channels}))) {
  state.running_mean = Tensor::zeros({channels});
  state.running_var = Tensor::full({channels}, 1.0);
}

void BatchNorm3d::collect(const std::string& prefix, ParamCollector& out) {
  out.param(prefix + ".gamma", gamma);
  out.param(prefix + ".beta", beta);
  out.buffer(prefix + ".running_mean", state.running_mean);
  out.buffer(prefix + ".running_var", state.running_var);
}

}  // namespace maproto
