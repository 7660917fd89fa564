#include "maproto/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace maproto {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a non-negative integer");
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a non-negative integer");
  return out;
}

double parse_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected true or false");
}

std::array<std::size_t, 3> parse_triple(const std::string& v) {
  std::array<std::size_t, 3> out{};
  std::stringstream ss(v);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw std::invalid_argument("expected three comma-separated integers");
    out[i++] = parse_size(trim(part));
  }
  if (i != 3) throw std::invalid_argument("expected three comma-separated integers");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(const std::array<std::size_t, 3>& v) {
  return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]);
}

struct Field {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE(k, m, h) Field{k, h, [](RunConfig& c, const std::string& v) { c.m = parse_size(v); }, \
                            [](const RunConfig& c) { return fmt(c.m); }}
#define U64(k, m, h) Field{k, h, [](RunConfig& c, const std::string& v) { c.m = parse_u64(v); }, \
                           [](const RunConfig& c) { return fmt(c.m, 0); }}
#define REAL(k, m, h) Field{k, h, [](RunConfig& c, const std::string& v) { c.m = parse_double(v); }, \
                            [](const RunConfig& c) { return fmt(c.m); }}
#define FLAG(k, m, h) Field{k, h, [](RunConfig& c, const std::string& v) { c.m = parse_bool(v); }, \
                            [](const RunConfig& c) { return fmt(c.m); }}
#define TRIPLE(k, m, h) Field{k, h, [](RunConfig& c, const std::string& v) { c.m = parse_triple(v); }, \
                              [](const RunConfig& c) { return fmt(c.m); }}
#define TEXT(k, m, h) Field{k, h, [](RunConfig& c, const std::string& v) { c.m = v; }, \
                            [](const RunConfig& c) { return c.m; }}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields{
      SIZE("model.in_channels", model.in_channels, "input modalities on the channel axis"),
      TRIPLE("model.input_shape", model.input_shape, "input volume extents X,Y,Z"),
      SIZE("model.stem_channels", model.stem_channels, "stem convolution width"),
      SIZE("model.stem_kernel", model.stem_kernel, "stem convolution kernel (odd)"),
      SIZE("model.residual_stages", model.residual_stages, "bottleneck stages kept in the backbone"),
      SIZE("model.stage_blocks", model.stage_blocks, "bottleneck blocks per stage"),
      SIZE("model.expansion", model.expansion, "bottleneck channel expansion"),
      FLAG("model.use_quadruplet", model.use_quadruplet, "insert quadruplet attention after emitted levels"),
      SIZE("model.attention_kernel", model.attention_kernel, "attention gate kernel (odd)"),
      FLAG("model.use_multiscale", model.use_multiscale, "fuse several pyramid levels"),
      SIZE("model.n_scale", model.n_scale, "pyramid levels fused when multi-scale is on"),
      Field{"model.fusion_variant", "fusion architecture a, b, c or d",
            [](RunConfig& c, const std::string& v) { c.model.fusion = parse_fusion_variant(v); },
            [](const RunConfig& c) { return std::string(1, fusion_tag(c.model.fusion)); }},
      SIZE("model.prototypes", model.prototypes, "prototype count, split evenly over classes"),
      SIZE("model.prototype_dim", model.prototype_dim, "prototype and feature dimension"),
      SIZE("model.num_classes", model.num_classes, "output classes"),
      Field{"model.similarity", "prototype similarity: log or cosine",
            [](RunConfig& c, const std::string& v) { c.model.similarity = parse_similarity(v); },
            [](const RunConfig& c) { return std::string(similarity_name(c.model.similarity)); }},
      REAL("model.similarity_eps", model.similarity_eps, "epsilon of the log similarity"),
      REAL("model.soft_mask_omega", model.soft_mask_omega, "soft-mask sharpness"),
      FLAG("model.feature_squash", model.feature_squash, "sigmoid on the feature-module output"),

      REAL("loss.clst", train.weights.clst, "cluster loss weight"),
      REAL("loss.sep", train.weights.sep, "separation loss weight"),
      REAL("loss.mmap", train.weights.mmap, "mapping loss weight"),
      REAL("loss.oc", train.weights.oc, "online CAM loss weight"),
      REAL("loss.l1", train.weights.l1, "head L1 weight (head fine-tuning)"),
      FLAG("loss.use_mmap", train.use_mmap, "multi-scale mapping loss (false: single-scale)"),
      REAL("loss.affine_max_angle_deg", train.affine_max_angle_deg, "mapping-loss rotation bound, degrees"),
      REAL("loss.affine_min_scale", train.affine_min_scale, "mapping-loss minimum scale"),
      REAL("loss.affine_max_scale", train.affine_max_scale, "mapping-loss maximum scale"),

      SIZE("train.epochs", train.epochs, "joint epochs"),
      SIZE("train.batch", train.batch, "batch size"),
      REAL("train.base_lr", train.base_lr, "peak joint learning rate"),
      REAL("train.weight_decay", train.weight_decay, "decoupled weight decay"),
      SIZE("train.warmup_epochs", train.warmup_epochs, "linear warm-up epochs"),
      SIZE("train.stage_period", train.stage_period, "joint epochs between pushes"),
      SIZE("train.head_epochs", train.head_epochs, "head epochs after each push"),
      REAL("train.head_lr", train.head_lr, "head fine-tuning learning rate"),
      REAL("train.beta1", train.beta1, "Adam first-moment decay"),
      REAL("train.beta2", train.beta2, "Adam second-moment decay"),
      REAL("train.adam_eps", train.adam_eps, "Adam epsilon"),
      REAL("train.grad_clip", train.grad_clip, "global gradient-norm clip, 0 disables"),
      U64("train.seed", train.seed, "seed for initialisation, shuffling and augmentation"),
      FLAG("train.augment", train.augment, "augment joint-stage batches"),

      REAL("augment.probability", train.augmentation.probability, "per-step trigger probability"),
      REAL("augment.rotation_deg", train.augmentation.rotation_deg, "rotation bound per axis, degrees"),
      REAL("augment.scale_min", train.augmentation.scale_min, "minimum zoom"),
      REAL("augment.scale_max", train.augmentation.scale_max, "maximum zoom"),
      REAL("augment.noise_var_max", train.augmentation.noise_var_max, "maximum Gaussian noise variance"),
      REAL("augment.blur_sigma_min", train.augmentation.blur_sigma_min, "minimum blur sigma, voxels"),
      REAL("augment.blur_sigma_max", train.augmentation.blur_sigma_max, "maximum blur sigma, voxels"),
      REAL("augment.brightness_min", train.augmentation.brightness_min, "minimum brightness factor"),
      REAL("augment.brightness_max", train.augmentation.brightness_max, "maximum brightness factor"),
      REAL("augment.contrast_min", train.augmentation.contrast_min, "minimum contrast factor"),
      REAL("augment.contrast_max", train.augmentation.contrast_max, "maximum contrast factor"),
      REAL("augment.lowres_zoom_min", train.augmentation.lowres_zoom_min, "minimum low-resolution zoom"),
      REAL("augment.lowres_zoom_max", train.augmentation.lowres_zoom_max, "maximum low-resolution zoom"),
      REAL("augment.gamma_min", train.augmentation.gamma_min, "minimum gamma"),
      REAL("augment.gamma_max", train.augmentation.gamma_max, "maximum gamma"),

      TEXT("data.source", data.source, "manifest or synthetic"),
      TEXT("data.manifest", data.manifest, "CSV manifest path"),
      SIZE("data.synth_count", data.synth_count, "synthetic subjects"),
      U64("data.synth_seed", data.synth_seed, "synthetic generator seed"),
      TRIPLE("data.crop_shape", data.crop, "centre crop before resizing"),
      SIZE("data.folds", data.folds, "cross-validation folds"),
      TEXT("data.fold", data.fold, "all, none, or the held-out fold index"),
      U64("data.fold_seed", data.fold_seed, "fold assignment seed"),

      REAL("eval.threshold", eval.threshold, "activation-precision threshold"),
      SIZE("eval.ids_steps", eval.ids_steps, "deletion steps (20 = 5% increments)"),
      FLAG("eval.compute_ids", eval.compute_ids, "compute the incremental deletion score"),
      SIZE("eval.batch", eval.batch, "evaluation batch size"),

      TEXT("out.dir", out_dir, "output directory"),
  };
  return fields;
}

#undef SIZE
#undef U64
#undef REAL
#undef FLAG
#undef TRIPLE
#undef TEXT

const Field& field(const std::string& key) {
  for (const auto& f : schema())
    if (f.key == key) return f;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const Field& f = field(key);
  try {
    f.set(*this, trim(value));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("invalid value '" + trim(value) + "' for " + key + ": " + e.what());
  }
}

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : schema()) out.push_back(f.key);
  return out;
}

std::string RunConfig::describe(const std::string& key) { return field(key).help; }

std::string RunConfig::snapshot() const {
  std::string out;
  for (const auto& f : schema()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.source != "manifest" && data.source != "synthetic")
    throw std::invalid_argument("data.source must be manifest or synthetic");
  if (data.fold != "all" && data.fold != "none") {
    std::size_t f = 0;
    try {
      f = parse_size(data.fold);
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("data.fold must be all, none or a fold index");
    }
    if (f >= data.folds) throw std::invalid_argument("data.fold exceeds data.folds");
  }
  if (data.fold != "none" && data.folds < 2) throw std::invalid_argument("data.folds must be at least 2");
  if (!(eval.threshold >= 0.0 && eval.threshold <= 1.0)) throw std::invalid_argument("eval.threshold not in [0,1]");
  if (eval.ids_steps == 0 || eval.batch == 0) throw std::invalid_argument("eval.ids_steps and eval.batch must be positive");
  if (out_dir.empty()) throw std::invalid_argument("out.dir must not be empty");
}

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(n) + ": ";
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected key = value");
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override '" + o + "' is not key=value");
    cfg.set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

PreprocessOptions preprocess_options(const RunConfig& cfg) {
  PreprocessOptions opt;
  opt.crop = cfg.data.crop;
  opt.target = cfg.model.input_shape;
  return opt;
}

}  // namespace maproto
