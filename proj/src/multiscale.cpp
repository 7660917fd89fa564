#include "maproto/multiscale.hpp"

#include <stdexcept>

namespace maproto {

FusionVariant parse_fusion_variant(std::string_view tag) {
  if (tag == "a") return FusionVariant::ConvConcat;
  if (tag == "b") return FusionVariant::ConvAdd;
  if (tag == "c") return FusionVariant::PoolConcat;
  if (tag == "d") return FusionVariant::PoolAdd;
  throw std::invalid_argument("unknown fusion variant '" + std::string(tag) + "' (expected a, b, c or d)");
}

char fusion_tag(FusionVariant v) {
  switch (v) {
    case FusionVariant::ConvConcat: return 'a';
    case FusionVariant::ConvAdd: return 'b';
    case FusionVariant::PoolConcat: return 'c';
    case FusionVariant::PoolAdd: return 'd';
  }
  return '?';
}

std::size_t pyramid_factor(const Shape& shallow, const Shape& deep) {
  if (shallow.size() != 5 || deep.size() != 5) throw std::invalid_argument("pyramid_factor: rank-5 shapes expected");
  std::size_t factor = 0;
  for (std::size_t a = 2; a < 5; ++a) {
    if (deep[a] == 0 || shallow[a] % deep[a] != 0) {
      throw std::invalid_argument("pyramid level " + shape_str(shallow) + " is not an integer multiple of " +
                                  shape_str(deep));
    }
    const std::size_t f = shallow[a] / deep[a];
    if (factor != 0 && f != factor) {
      throw std::invalid_argument("pyramid level " + shape_str(shallow) + " has anisotropic ratio to " +
                                  shape_str(deep));
    }
    factor = f;
  }
  return factor;
}

namespace {

void require_divisible(const Var& h, std::size_t factor) {
  require_volume_batch(h.value(), "downsample");
  if (factor == 0) throw std::invalid_argument("downsample: zero factor");
  for (std::size_t a = 2; a < 5; ++a) {
    if (h.shape()[a] % factor != 0) {
      throw std::invalid_argument("downsample: extent " + std::to_string(h.shape()[a]) + " of " +
                                  shape_str(h.shape()) + " not divisible by " + std::to_string(factor));
    }
  }
}

}  // namespace

Var downsample(const Var& h, std::size_t factor, FusionVariant variant, const Conv3d* proj) {
  require_divisible(h, factor);
  const ops::Triple f{factor, factor, factor};
  if (uses_pooling(variant)) {
    Var pooled = ops::concat_channels({ops::max_pool3d(h, f, f, {0, 0, 0}), ops::avg_pool3d(h, f, f)});
    if (variant == FusionVariant::PoolConcat) return pooled;
    if (!proj) throw std::invalid_argument("downsample: variant d requires a 1x1 projection");
    if (proj->in_channels() != pooled.shape()[1] || proj->kernel() != 1) {
      throw std::invalid_argument("downsample: variant d projection expects " + std::to_string(proj->in_channels()) +
                                  " channels, pooled tensor has " + std::to_string(pooled.shape()[1]));
    }
    return proj->forward(pooled);
  }
  if (!proj) throw std::invalid_argument("downsample: convolution variants require a strided convolution");
  if (proj->options.stride[0] != factor) throw std::invalid_argument("downsample: convolution stride != factor");
  Var out = proj->forward(h);
  for (std::size_t a = 2; a < 5; ++a) {
    if (out.shape()[a] * factor != h.shape()[a]) {
      throw std::invalid_argument("downsample: convolution produced " + shape_str(out.shape()) + " from " +
                                  shape_str(h.shape()));
    }
  }
  return out;
}

MultiScaleModule::MultiScaleModule(FusionVariant variant, std::vector<std::size_t> channels,
                                   std::vector<std::size_t> factors, Rng& rng)
    : variant_(variant), channels_(std::move(channels)), factors_(std::move(factors)) {
  if (channels_.empty()) throw std::invalid_argument("multi-scale module: no pyramid levels");
  if (factors_.size() != channels_.size()) throw std::invalid_argument("multi-scale module: factor count mismatch");
  if (factors_.back() != 1) throw std::invalid_argument("multi-scale module: deepest level must have factor 1");
  const std::size_t deep = channels_.back();
  proj_.resize(channels_.size());
  for (std::size_t s = 0; s + 1 < channels_.size(); ++s) {
    const std::size_t f = factors_[s];
    if (f < 1) throw std::invalid_argument("multi-scale module: zero factor");
    switch (variant_) {
      case FusionVariant::ConvConcat:
      case FusionVariant::ConvAdd:
        // Kernel 2f-1 covers the stride window; padding f/2 keeps extents exact.
        proj_[s] = Conv3d(channels_[s], deep, 2 * f - 1, f, f / 2, true, rng);
        break;
      case FusionVariant::PoolAdd:
        proj_[s] = Conv3d(2 * channels_[s], deep, 1, 1, 0, true, rng);
        break;
      case FusionVariant::PoolConcat:
        break;
    }
  }
}

std::size_t MultiScaleModule::output_channels() const {
  const std::size_t deep = channels_.back();
  if (!is_concat(variant_)) return deep;
  std::size_t total = deep;
  for (std::size_t s = 0; s + 1 < channels_.size(); ++s)
    total += variant_ == FusionVariant::PoolConcat ? 2 * channels_[s] : deep;
  return total;
}

Var MultiScaleModule::downsample_level(std::size_t level, const Var& h) const {
  if (level + 1 >= channels_.size()) throw std::invalid_argument("downsample_level: not a shallow level");
  if (h.shape()[1] != channels_[level]) {
    throw std::invalid_argument("downsample_level: level " + std::to_string(level) + " expects " +
                                std::to_string(channels_[level]) + " channels, got " + shape_str(h.shape()));
  }
  const Conv3d* proj = proj_[level] ? &*proj_[level] : nullptr;
  return downsample(h, factors_[level], variant_, proj);
}

Var MultiScaleModule::fuse(const std::vector<Var>& pyramid) const {
  if (pyramid.empty()) throw std::invalid_argument("fuse: empty pyramid");
  if (pyramid.size() != channels_.size()) {
    throw std::invalid_argument("fuse: pyramid has " + std::to_string(pyramid.size()) + " levels, module built for " +
                                std::to_string(channels_.size()));
  }
  const Var& deep = pyramid.back();
  if (pyramid.size() == 1) return deep;
  std::vector<Var> parts;
  for (std::size_t s = 0; s + 1 < pyramid.size(); ++s) {
    if (pyramid_factor(pyramid[s].shape(), deep.shape()) != factors_[s]) {
      throw std::invalid_argument("fuse: level " + std::to_string(s) + " ratio does not match module factor " +
                                  std::to_string(factors_[s]));
    }
    parts.push_back(downsample_level(s, pyramid[s]));
  }
  if (is_concat(variant_)) {
    parts.push_back(deep);
    return ops::concat_channels(parts);
  }
  Var acc = deep;
  for (const auto& p : parts) acc = ops::add(acc, p);
  return acc;
}

void MultiScaleModule::collect(const std::string& prefix, ParamCollector& out) {
  for (std::size_t s = 0; s < proj_.size(); ++s)
    if (proj_[s]) proj_[s]->collect(prefix + ".level" + std::to_string(s) + ".proj", out);
}

}  // namespace maproto
