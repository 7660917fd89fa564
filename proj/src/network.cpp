#include "maproto/network.hpp"

#include <sstream>
#include <stdexcept>

namespace maproto {

SimilarityKind parse_similarity(std::string_view name) {
  if (name == "log") return SimilarityKind::Log;
  if (name == "cosine") return SimilarityKind::Cosine;
  throw std::invalid_argument("unknown similarity '" + std::string(name) + "' (expected log or cosine)");
}

std::string_view similarity_name(SimilarityKind kind) { return kind == SimilarityKind::Log ? "log" : "cosine"; }

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("network config: " + msg); };
  if (in_channels == 0) fail("in_channels must be positive");
  for (std::size_t e : input_shape)
    if (e == 0) fail("input extents must be positive");
  if (stem_channels == 0 || expansion == 0 || stage_blocks == 0) fail("backbone widths must be positive");
  if (stem_kernel % 2 == 0) fail("stem kernel must be odd");
  if (residual_stages == 0) fail("at least one residual stage is required");
  if (use_quadruplet && attention_kernel % 2 == 0) fail("attention kernel must be odd");
  // Stem, pool and every stage after the first halve the grid; pyramid levels need exact ratios.
  const std::size_t reduction = std::size_t{2} << residual_stages;
  for (std::size_t e : input_shape)
    if (e % reduction != 0) fail("input extents must be multiples of " + std::to_string(reduction));
  if (n_scale == 0) fail("n_scale must be at least 1");
  if (use_multiscale && n_scale > residual_stages + 1) {
    fail("n_scale " + std::to_string(n_scale) + " exceeds the " + std::to_string(residual_stages + 1) +
         " available backbone taps");
  }
  if (num_classes < 2) fail("at least two classes are required");
  if (prototypes == 0 || prototypes % num_classes != 0) fail("prototypes must split evenly across classes");
  if (prototype_dim == 0) fail("prototype_dim must be positive");
  if (!(similarity_eps > 0.0)) fail("similarity_eps must be positive");
  if (!(soft_mask_omega > 0.0)) fail("soft_mask_omega must be positive");
}

namespace {

std::size_t stage_width(const NetworkConfig& cfg, std::size_t stage) { return cfg.stem_channels << stage; }

ops::Triple extent_after(const ops::Triple& in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  ops::ConvOptions opt{{stride, stride, stride}, {pad, pad, pad}};
  return ops::conv_output_extent(in, {kernel, kernel, kernel}, opt);
}

Shape level_shape(std::size_t channels, const ops::Triple& e) { return {channels, e[0], e[1], e[2]}; }

}  // namespace

std::vector<Shape> backbone_tap_shapes(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<Shape> taps;
  ops::Triple e = extent_after(cfg.input_shape, cfg.stem_kernel, 2, cfg.stem_kernel / 2);
  taps.push_back(level_shape(cfg.stem_channels, e));
  e = extent_after(e, 3, 2, 1);
  for (std::size_t s = 0; s < cfg.residual_stages; ++s) {
    if (s > 0) e = extent_after(e, 3, 2, 1);
    taps.push_back(level_shape(stage_width(cfg, s) * cfg.expansion, e));
  }
  return taps;
}

std::vector<Shape> pyramid_shapes(const NetworkConfig& cfg) {
  auto taps = backbone_tap_shapes(cfg);
  const std::size_t emitted = cfg.emitted_levels();
  return {taps.end() - static_cast<std::ptrdiff_t>(emitted), taps.end()};
}

// ---- backbone ---------------------------------------------------------------

Bottleneck::Bottleneck(std::size_t in, std::size_t width, std::size_t expansion, std::size_t stride, Rng& rng)
    : conv1_(in, width, 1, 1, 0, false, rng),
      conv2_(width, width, 3, stride, 1, false, rng),
      conv3_(width, width * expansion, 1, 1, 0, false, rng),
      bn1_(width),
      bn2_(width),
      bn3_(width * expansion) {
  if (stride != 1 || in != width * expansion) {
    proj_.emplace(in, width * expansion, 1, stride, 0, false, rng);
    proj_bn_.emplace(width * expansion);
  }
}

Var Bottleneck::forward(const Var& x, bool training) {
  Var y = ops::relu(bn1_.forward(conv1_.forward(x), training));
  y = ops::relu(bn2_.forward(conv2_.forward(y), training));
  y = bn3_.forward(conv3_.forward(y), training);
  Var shortcut = proj_ ? proj_bn_->forward(proj_->forward(x), training) : x;
  return ops::relu(ops::add(y, shortcut));
}

void Bottleneck::collect(const std::string& prefix, ParamCollector& out) {
  conv1_.collect(prefix + ".conv1", out);
  bn1_.collect(prefix + ".bn1", out);
  conv2_.collect(prefix + ".conv2", out);
  bn2_.collect(prefix + ".bn2", out);
  conv3_.collect(prefix + ".conv3", out);
  bn3_.collect(prefix + ".bn3", out);
  if (proj_) {
    proj_->collect(prefix + ".downsample.conv", out);
    proj_bn_->collect(prefix + ".downsample.bn", out);
  }
}

Backbone::Backbone(const NetworkConfig& cfg, Rng& rng)
    : in_channels_(cfg.in_channels),
      stem_conv_(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, 2, cfg.stem_kernel / 2, false, rng),
      stem_bn_(cfg.stem_channels) {
  const std::size_t taps = cfg.residual_stages + 1;
  first_emitted_ = taps - cfg.emitted_levels();
  std::size_t in = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.residual_stages; ++s) {
    const std::size_t width = stage_width(cfg, s);
    std::vector<Bottleneck> blocks;
    for (std::size_t b = 0; b < cfg.stage_blocks; ++b) {
      blocks.emplace_back(in, width, cfg.expansion, (s > 0 && b == 0) ? 2 : 1, rng);
      in = width * cfg.expansion;
    }
    stages_.push_back(std::move(blocks));
  }
  attn_.resize(taps);
  if (cfg.use_quadruplet)
    for (std::size_t t = first_emitted_; t < taps; ++t) attn_[t].emplace(cfg.attention_kernel, rng);
}

std::vector<Var> Backbone::forward(const Var& x, bool training) {
  require_volume_batch(x.value(), "backbone input");
  if (x.shape()[1] != in_channels_) {
    throw std::invalid_argument("backbone: input has " + std::to_string(x.shape()[1]) +
                                " channels, configured for " + std::to_string(in_channels_));
  }
  std::vector<Var> levels;
  auto tap = [&](std::size_t t, Var h) {
    if (attn_[t]) h = attn_[t]->forward(h, training);
    if (t >= first_emitted_) levels.push_back(h);
    return h;
  };
  Var h = ops::relu(stem_bn_.forward(stem_conv_.forward(x), training));
  h = tap(0, h);
  h = ops::max_pool3d(h, {3, 3, 3}, {2, 2, 2}, {1, 1, 1});
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (auto& block : stages_[s]) h = block.forward(h, training);
    h = tap(s + 1, h);
  }
  return levels;
}

void Backbone::collect(const std::string& prefix, ParamCollector& out) {
  stem_conv_.collect(prefix + ".stem.conv", out);
  stem_bn_.collect(prefix + ".stem.bn", out);
  for (std::size_t s = 0; s < stages_.size(); ++s)
    for (std::size_t b = 0; b < stages_[s].size(); ++b)
      stages_[s][b].collect(prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
  for (std::size_t t = 0; t < attn_.size(); ++t)
    if (attn_[t]) attn_[t]->collect(prefix + ".attention" + std::to_string(t), out);
}

std::size_t Backbone::attention_layers() const {
  std::size_t n = 0;
  for (const auto& a : attn_) n += a.has_value();
  return n;
}

// ---- prototype layer ----------------------------------------------------------

void PrototypeBank::validate(std::size_t num_classes) const {
  if (!vectors.defined() || vectors.shape().size() != 2 || vectors.shape()[0] != class_of.size()) {
    throw std::invalid_argument("prototype bank: vectors must be (P, D) with one class per row");
  }
  std::vector<std::size_t> counts(num_classes, 0);
  for (int c : class_of) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw std::invalid_argument("prototype bank: bad class");
    ++counts[static_cast<std::size_t>(c)];
  }
  for (std::size_t c = 1; c < num_classes; ++c)
    if (counts[c] != counts[0]) throw std::invalid_argument("prototype bank: unequal prototypes per class");
}

PointwiseStack::PointwiseStack(std::size_t in, std::size_t hidden, std::size_t out, bool squash_output, Rng& rng)
    : first(in, hidden, 1, 1, 0, true, rng), second(hidden, out, 1, 1, 0, true, rng), squash(squash_output) {}

Var PointwiseStack::forward(const Var& x) const {
  Var y = second.forward(ops::relu(first.forward(x)));
  return squash ? ops::sigmoid(y) : y;
}

void PointwiseStack::collect(const std::string& prefix, ParamCollector& out) {
  first.collect(prefix + ".conv1", out);
  second.collect(prefix + ".conv2", out);
}

Tensor initial_head_weights(const std::vector<int>& class_of, std::size_t num_classes) {
  Tensor w({num_classes, class_of.size()});
  for (std::size_t k = 0; k < num_classes; ++k)
    for (std::size_t p = 0; p < class_of.size(); ++p)
      w[k * class_of.size() + p] = class_of[p] == static_cast<int>(k) ? 1.0 : -0.5;
  return w;
}

Tensor as_batch(const Tensor& subject) {
  Shape s{1};
  s.insert(s.end(), subject.shape().begin(), subject.shape().end());
  return subject.reshaped(std::move(s));
}

std::string ArchitectureFingerprint::str() const {
  std::ostringstream os;
  for (const auto& [name, count] : modules) os << name << '=' << count << ';';
  os << "total=" << total;
  return os.str();
}

// ---- full network -------------------------------------------------------------

MAProtoNet::MAProtoNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  backbone_ = Backbone(cfg_, rng);

  const auto levels = pyramid_shapes(cfg_);
  std::vector<std::size_t> channels, factors;
  for (const auto& s : levels) {
    channels.push_back(s[0]);
    const Shape shallow{1, s[0], s[1], s[2], s[3]};
    const Shape deep{1, levels.back()[0], levels.back()[1], levels.back()[2], levels.back()[3]};
    factors.push_back(pyramid_factor(shallow, deep));
  }
  multiscale_ = MultiScaleModule(cfg_.fusion, channels, factors, rng);
  const std::size_t c_mul = multiscale_.output_channels();
  const std::size_t c_deep = channels.back();

  mapping_ = PointwiseStack(c_mul, cfg_.prototype_dim, cfg_.prototypes, true, rng);
  features_ = PointwiseStack(c_deep, cfg_.prototype_dim, cfg_.prototype_dim, cfg_.feature_squash, rng);
  cam_ = Conv3d(c_mul, cfg_.num_classes, 1, 1, 0, true, rng);

  Tensor v({cfg_.prototypes, cfg_.prototype_dim});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& x : v.storage()) x = unit(rng);
  bank_.vectors = Var::parameter(std::move(v));
  const std::size_t per_class = cfg_.prototypes / cfg_.num_classes;
  for (std::size_t p = 0; p < cfg_.prototypes; ++p) bank_.class_of.push_back(static_cast<int>(p / per_class));
  bank_.validate(cfg_.num_classes);
  head_ = Var::parameter(initial_head_weights(bank_.class_of, cfg_.num_classes));
}

Var MAProtoNet::similarity(const Var& maps, const Var& fea, Var* pooled, Var* sq_dist) const {
  Var u = ops::masked_pool(maps, fea);
  Var d = ops::prototype_sq_distances(u, bank_.vectors);
  if (pooled) *pooled = u;
  if (sq_dist) *sq_dist = d;
  return cfg_.similarity == SimilarityKind::Log ? ops::log_similarity(d, cfg_.similarity_eps)
                                                : ops::cosine_similarity(u, bank_.vectors);
}

ForwardOutput MAProtoNet::forward(const Tensor& x) { return forward(Var(x)); }

ForwardOutput MAProtoNet::forward(const Var& x) {
  ForwardOutput out;
  out.pyramid = backbone_forward(x);
  out.h_mul = fuse(out.pyramid);
  out.raw_maps = mapping(out.h_mul);
  out.maps = ops::soft_mask(out.raw_maps, cfg_.soft_mask_omega);
  out.features = feature(out.pyramid.back());
  out.scores = similarity(out.maps, out.features, &out.pooled, &out.sq_distances);
  out.logits = classify(out.scores);
  out.cam_maps = cam_maps(out.h_mul);
  out.cam_logits = ops::global_avg_pool(out.cam_maps);
  return out;
}

void MAProtoNet::collect(ParamCollector& out) {
  backbone_.collect("backbone", out);
  multiscale_.collect("multiscale", out);
  mapping_.collect("mapping", out);
  features_.collect("feature", out);
  cam_.collect("cam", out);
  out.param("prototypes", bank_.vectors);
  out.param("head.weight", head_);
}

std::vector<NamedParam> MAProtoNet::named_parameters() {
  ParamCollector c;
  collect(c);
  return c.params;
}

std::vector<NamedBuffer> MAProtoNet::named_buffers() {
  ParamCollector c;
  collect(c);
  return c.buffers;
}

std::vector<NamedParam> MAProtoNet::body_parameters() {
  auto all = named_parameters();
  std::erase_if(all, [](const NamedParam& p) { return p.name == "head.weight"; });
  return all;
}

std::size_t MAProtoNet::parameter_count() { return count_parameters(named_parameters()); }

ArchitectureFingerprint MAProtoNet::fingerprint() {
  ArchitectureFingerprint fp;
  for (const auto& p : named_parameters()) {
    // Backbone and fusion parameters are grouped per sub-module, the rest per top-level module.
    std::string key = p.name.substr(0, p.name.find('.'));
    if (key == "backbone" || key == "multiscale") key = p.name.substr(0, p.name.find('.', key.size() + 1));
    const std::size_t n = p.var.value().numel();
    if (fp.modules.empty() || fp.modules.back().first != key) fp.modules.emplace_back(key, 0);
    fp.modules.back().second += n;
    fp.total += n;
  }
  return fp;
}

}  // namespace maproto
