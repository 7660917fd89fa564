#include "maproto/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace maproto {

namespace fs = std::filesystem;

// ---- NIfTI-1 -------------------------------------------------------------------

namespace {

constexpr std::size_t kHeaderSize = 348;

std::vector<unsigned char> read_all_gz(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      gzclose(f);
      throw std::runtime_error("corrupt compressed data in '" + path.string() + "'");
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

template <typename T>
T load(const unsigned char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof v);
  if (swap) {
    unsigned char b[sizeof v];
    std::memcpy(b, &v, sizeof v);
    std::reverse(b, b + sizeof v);
    std::memcpy(&v, b, sizeof v);
  }
  return v;
}

template <typename T>
void store(std::vector<unsigned char>& h, std::size_t off, T v) {
  std::memcpy(h.data() + off, &v, sizeof v);
}

double read_voxel(const unsigned char* p, int datatype, bool swap) {
  switch (datatype) {
    case 2: return *p;
    case 256: return static_cast<std::int8_t>(*p);
    case 4: return load<std::int16_t>(p, swap);
    case 512: return load<std::uint16_t>(p, swap);
    case 8: return load<std::int32_t>(p, swap);
    case 768: return load<std::uint32_t>(p, swap);
    case 16: return load<float>(p, swap);
    case 64: return load<double>(p, swap);
    default: throw std::invalid_argument("unsupported datatype " + std::to_string(datatype));
  }
}

std::size_t datatype_bytes(int datatype) {
  switch (datatype) {
    case 2: case 256: return 1;
    case 4: case 512: return 2;
    case 8: case 768: case 16: return 4;
    case 64: return 8;
    default: return 0;
  }
}

}  // namespace

NiftiImage read_nifti(const fs::path& path) {
  const auto bytes = read_all_gz(path);  // gzread passes uncompressed files through
  auto fail = [&](const std::string& msg) -> NiftiImage {
    throw std::runtime_error("'" + path.string() + "': " + msg);
  };
  if (bytes.size() < kHeaderSize) return fail("truncated header");
  const unsigned char* h = bytes.data();
  bool swap = false;
  if (load<std::int32_t>(h, false) != 348) {
    if (load<std::int32_t>(h, true) != 348) return fail("not a NIfTI-1 header");
    swap = true;
  }
  if (std::memcmp(h + 344, "n+1", 4) != 0 && std::memcmp(h + 344, "ni1", 4) != 0) return fail("bad magic");
  const int ndim = load<std::int16_t>(h + 40, swap);
  if (ndim < 3 || ndim > 7) return fail("expected a 3D volume, header has " + std::to_string(ndim) + " dims");
  NiftiImage img;
  for (int a = 0; a < 3; ++a) {
    const int d = load<std::int16_t>(h + 42 + 2 * a, swap);
    if (d <= 0) return fail("non-positive dimension");
    img.dims[a] = static_cast<std::size_t>(d);
    const double s = load<float>(h + 80 + 4 * a, swap);
    img.spacing[a] = s > 0 ? s : 1.0;
  }
  for (int a = 3; a < ndim; ++a)
    if (load<std::int16_t>(h + 42 + 2 * a, swap) > 1) return fail("multi-volume files are not supported");
  const int datatype = load<std::int16_t>(h + 70, swap);
  const std::size_t bpv = datatype_bytes(datatype);
  if (bpv == 0) return fail("unsupported datatype " + std::to_string(datatype));
  const auto offset = static_cast<std::size_t>(load<float>(h + 108, swap));
  double slope = load<float>(h + 112, swap);
  const double inter = load<float>(h + 116, swap);
  if (slope == 0.0 || !std::isfinite(slope)) slope = 1.0;
  const std::size_t nx = img.dims[0], ny = img.dims[1], nz = img.dims[2];
  if (offset < kHeaderSize || bytes.size() < offset + nx * ny * nz * bpv) return fail("truncated image data");
  img.data = Tensor({nx, ny, nz});
  const unsigned char* vox = h + offset;
  // On disk x varies fastest; in memory z does.
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        const double v = read_voxel(vox + ((z * ny + y) * nx + x) * bpv, datatype, swap);
        img.data[(x * ny + y) * nz + z] = v * slope + (std::isfinite(inter) ? inter : 0.0);
      }
  return img;
}

void write_nifti(const fs::path& path, const Tensor& volume, const std::array<double, 3>& spacing) {
  if (volume.rank() != 3) throw std::invalid_argument("write_nifti: expected an (X, Y, Z) tensor");
  const std::size_t nx = volume.dim(0), ny = volume.dim(1), nz = volume.dim(2);
  if (nx > 32767 || ny > 32767 || nz > 32767) throw std::invalid_argument("write_nifti: extent too large");
  std::vector<unsigned char> hdr(kHeaderSize + 4, 0);
  store<std::int32_t>(hdr, 0, 348);
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(nx), static_cast<std::int16_t>(ny),
                                static_cast<std::int16_t>(nz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store<std::int16_t>(hdr, 40 + 2 * i, dims[i]);
  store<std::int16_t>(hdr, 70, 16);
  store<std::int16_t>(hdr, 72, 32);
  store<float>(hdr, 76, 1.0f);
  for (int a = 0; a < 3; ++a) store<float>(hdr, 80 + 4 * a, static_cast<float>(spacing[a]));
  store<float>(hdr, 108, 352.0f);
  store<float>(hdr, 112, 1.0f);
  std::memcpy(hdr.data() + 344, "n+1", 4);

  std::vector<float> vox(nx * ny * nz);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x)
        vox[(z * ny + y) * nx + x] = static_cast<float>(volume[(x * ny + y) * nz + z]);

  const bool gz = path.extension() == ".gz";
  if (gz) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
    const bool ok = gzwrite(f, hdr.data(), static_cast<unsigned>(hdr.size())) == static_cast<int>(hdr.size()) &&
                    gzwrite(f, vox.data(), static_cast<unsigned>(vox.size() * 4)) == static_cast<int>(vox.size() * 4);
    if (gzclose(f) != Z_OK || !ok) throw std::runtime_error("failed writing '" + path.string() + "'");
  } else {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(hdr.data()), static_cast<std::streamsize>(hdr.size()));
    f.write(reinterpret_cast<const char*>(vox.data()), static_cast<std::streamsize>(vox.size() * 4));
    if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
  }
}

// ---- manifest ------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_label(const std::string& s, const std::string& where) {
  if (s == "0" || s == "LGG" || s == "lgg") return 0;
  if (s == "1" || s == "HGG" || s == "hgg") return 1;
  throw std::invalid_argument(where + ": label '" + s + "' is not 0/1/LGG/HGG");
}

}  // namespace

std::vector<SubjectRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty()) return p;
    const fs::path q(p);
    return q.is_absolute() ? p : (base / q).string();
  };
  std::string line;
  if (!std::getline(in, line)) return {};
  const auto header = split_csv(line);
  const std::vector<std::string> expected{"id", "t1", "t1ce", "t2", "flair", "seg", "label"};
  if (header != expected) {
    throw std::invalid_argument("manifest '" + path.string() + "': header must be id,t1,t1ce,t2,flair,seg,label");
  }
  std::vector<SubjectRecord> out;
  for (std::size_t row = 2; std::getline(in, line); ++row) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    if (cells.size() != expected.size()) throw std::invalid_argument(where + ": expected 7 columns");
    SubjectRecord r;
    r.id = cells[0];
    for (std::size_t m = 0; m < 4; ++m) {
      if (cells[1 + m].empty()) throw std::invalid_argument(where + ": missing modality " + kModalities[m]);
      r.modalities[m] = resolve(cells[1 + m]);
    }
    r.segmentation = resolve(cells[5]);
    r.label = parse_label(cells[6], where);
    out.push_back(std::move(r));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<SubjectRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
  const fs::path base = path.parent_path();
  // Absolute paths below the manifest directory are stored relative to it; everything else verbatim.
  auto rel = [&](const std::string& p) {
    const fs::path q(p);
    if (p.empty() || !q.is_absolute()) return p;
    const fs::path r = q.lexically_relative(fs::absolute(base));
    return r.empty() || *r.begin() == ".." ? p : r.string();
  };
  out << "id,t1,t1ce,t2,flair,seg,label\n";
  for (const auto& r : records) {
    out << r.id;
    for (const auto& m : r.modalities) out << ',' << rel(m);
    out << ',' << rel(r.segmentation) << ',' << r.label << '\n';
  }
  if (!out) throw std::runtime_error("failed writing manifest '" + path.string() + "'");
}

RawSubject load_subject(const SubjectRecord& record) {
  RawSubject raw;
  std::array<std::size_t, 3> dims{};
  for (std::size_t m = 0; m < 4; ++m) {
    const NiftiImage img = read_nifti(record.modalities[m]);
    if (m == 0) {
      dims = img.dims;
      raw.image = Tensor({4, dims[0], dims[1], dims[2]});
    } else if (img.dims != dims) {
      throw std::runtime_error("'" + record.modalities[m] + "': shape differs from the T1 volume");
    }
    std::copy(img.data.storage().begin(), img.data.storage().end(),
              raw.image.raw() + m * img.data.numel());
  }
  if (!record.segmentation.empty()) {
    NiftiImage seg = read_nifti(record.segmentation);
    if (seg.dims != dims) throw std::runtime_error("'" + record.segmentation + "': shape differs from the images");
    for (auto& v : seg.data.storage()) v = v > 0.0 ? 1.0 : 0.0;
    raw.mask = std::move(seg.data);
  }
  return raw;
}

// ---- preprocessing -------------------------------------------------------------

std::array<std::size_t, 3> crop_offsets(const std::array<std::size_t, 3>& extent,
                                        const std::array<std::size_t, 3>& crop) {
  std::array<std::size_t, 3> off{};
  for (int a = 0; a < 3; ++a) {
    if (crop[a] > extent[a]) {
      throw std::invalid_argument("crop window " + std::to_string(crop[a]) + " exceeds extent " +
                                  std::to_string(extent[a]) + " on axis " + std::to_string(a));
    }
    off[a] = (extent[a] - crop[a]) / 2;
  }
  return off;
}

Tensor crop_spatial(const Tensor& x, const std::array<std::size_t, 3>& off, const std::array<std::size_t, 3>& ext) {
  const auto in = spatial_extent(x);
  for (int a = 0; a < 3; ++a)
    if (off[a] + ext[a] > in[a]) throw std::invalid_argument("crop window exceeds bounds");
  Shape s(x.shape().begin(), x.shape().end() - 3);
  std::size_t lead = 1;
  for (auto d : s) lead *= d;
  s.insert(s.end(), ext.begin(), ext.end());
  Tensor out(s);
  double* o = out.raw();
  for (std::size_t l = 0; l < lead; ++l) {
    const double* src = x.raw() + l * in[0] * in[1] * in[2];
    for (std::size_t i = 0; i < ext[0]; ++i)
      for (std::size_t j = 0; j < ext[1]; ++j) {
        const double* row = src + ((off[0] + i) * in[1] + off[1] + j) * in[2] + off[2];
        o = std::copy(row, row + ext[2], o);
      }
  }
  return out;
}

void zscore_nonzero(Tensor& image, double sd_floor) {
  if (image.rank() < 4) throw std::invalid_argument("zscore_nonzero: expected (C, X, Y, Z)");
  const std::size_t sp = image.numel() / image.dim(0);
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    double* p = image.raw() + c * sp;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < sp; ++i)
      if (p[i] != 0.0) sum += p[i], ++n;
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < sp; ++i)
      if (p[i] != 0.0) ss += (p[i] - mean) * (p[i] - mean);
    const double sd = std::max(std::sqrt(ss / static_cast<double>(n)), sd_floor);
    for (std::size_t i = 0; i < sp; ++i)
      if (p[i] != 0.0) p[i] = (p[i] - mean) / sd;
  }
}

Volume preprocess(const RawSubject& raw, const PreprocessOptions& opt) {
  if (raw.image.rank() != 4 || raw.image.dim(0) != 4) {
    throw std::invalid_argument("preprocess: expected a (4, X, Y, Z) stack, got " + shape_str(raw.image.shape()));
  }
  const auto extent = spatial_extent(raw.image);
  if (raw.has_mask() && spatial_extent(raw.mask) != extent) throw std::invalid_argument("preprocess: mask grid");
  Volume v;
  if (extent == opt.target) {
    v.image = raw.image;
    v.mask = raw.mask;
  } else {
    const auto off = crop_offsets(extent, opt.crop);
    v.image = resize_trilinear(crop_spatial(raw.image, off, opt.crop), opt.target);
    if (raw.has_mask()) v.mask = resize_nearest(crop_spatial(raw.mask, off, opt.crop), opt.target);
  }
  zscore_nonzero(v.image, opt.sd_floor);
  return v;
}

// ---- augmentation --------------------------------------------------------------

void AugmentOptions::validate() const {
  auto range = [](double lo, double hi, const char* what) {
    if (!(lo <= hi)) throw std::invalid_argument(std::string("augment: ") + what + " range is inverted");
  };
  if (!(probability >= 0.0 && probability <= 1.0)) throw std::invalid_argument("augment: probability not in [0,1]");
  if (rotation_deg < 0.0 || noise_var_max < 0.0) throw std::invalid_argument("augment: negative magnitude");
  range(scale_min, scale_max, "scale");
  range(blur_sigma_min, blur_sigma_max, "blur");
  range(brightness_min, brightness_max, "brightness");
  range(contrast_min, contrast_max, "contrast");
  range(lowres_zoom_min, lowres_zoom_max, "low-resolution");
  range(gamma_min, gamma_max, "gamma");
  if (scale_min <= 0.0 || lowres_zoom_min <= 0.0 || gamma_min <= 0.0)
    throw std::invalid_argument("augment: scale, zoom and gamma must be positive");
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::size_t channel_size(const Tensor& image) { return image.numel() / image.dim(0); }

void blur_axis(double* p, const std::array<std::size_t, 3>& e, int axis, const std::vector<double>& k) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const std::size_t stride = axis == 0 ? e[1] * e[2] : axis == 1 ? e[2] : 1;
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(e[axis]);
  std::vector<double> line(e[axis]);
  const std::size_t total = e[0] * e[1] * e[2];
  for (std::size_t base = 0; base < total; ++base) {
    // Visit each line once, from the voxel whose coordinate on `axis` is 0.
    if ((base / stride) % e[axis] != 0) continue;
    for (std::ptrdiff_t i = 0; i < n; ++i) line[i] = p[base + i * stride];
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) acc += k[t + r] * line[std::clamp<std::ptrdiff_t>(i + t, 0, n - 1)];
      p[base + i * stride] = acc;
    }
  }
}

}  // namespace

void gaussian_blur(Tensor& image, double sigma) {
  if (sigma <= 0.0) return;
  const auto e = spatial_extent(image);
  const std::size_t radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
  }
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= s;
  const std::size_t sp = e[0] * e[1] * e[2];
  for (std::size_t c = 0; c < image.numel() / sp; ++c)
    for (int a = 0; a < 3; ++a) blur_axis(image.raw() + c * sp, e, a, k);
}

void gamma_transform(Tensor& image, double gamma) {
  if (gamma == 1.0) return;
  const std::size_t sp = channel_size(image);
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    double* p = image.raw() + c * sp;
    const auto [lo, hi] = std::minmax_element(p, p + sp);
    const double mn = *lo, range = *hi - *lo;
    if (range <= 0.0) continue;
    for (std::size_t i = 0; i < sp; ++i) p[i] = std::pow((p[i] - mn) / range, gamma) * range + mn;
  }
}

void mirror(Volume& v, const std::array<bool, 3>& axes) {
  auto flip = [&](Tensor& t) {
    if (t.empty()) return;
    const auto e = spatial_extent(t);
    const std::size_t sp = e[0] * e[1] * e[2];
    Tensor out(t.shape());
    for (std::size_t l = 0; l < t.numel() / sp; ++l)
      for (std::size_t i = 0; i < e[0]; ++i)
        for (std::size_t j = 0; j < e[1]; ++j)
          for (std::size_t k = 0; k < e[2]; ++k) {
            const std::size_t si = axes[0] ? e[0] - 1 - i : i;
            const std::size_t sj = axes[1] ? e[1] - 1 - j : j;
            const std::size_t sk = axes[2] ? e[2] - 1 - k : k;
            out[l * sp + (i * e[1] + j) * e[2] + k] = t[l * sp + (si * e[1] + sj) * e[2] + sk];
          }
    t = std::move(out);
  };
  flip(v.image);
  flip(v.mask);
}

void augment(Volume& v, Rng& rng, const AugmentOptions& opt) {
  std::bernoulli_distribution trigger(opt.probability);
  const std::size_t sp = channel_size(v.image);
  const std::size_t channels = v.image.dim(0);
  const auto extent = spatial_extent(v.image);

  if (trigger(rng)) {
    const double a = opt.rotation_deg * std::numbers::pi / 180.0;
    AffineSpec spec;
    for (auto& angle : spec.angles) angle = uniform(rng, -a, a);
    spec.scale = uniform(rng, opt.scale_min, opt.scale_max);
    v.image = affine_apply(v.image, spec);
    if (v.has_mask()) v.mask = affine_apply_nearest(v.mask, spec);
  }
  if (trigger(rng)) {
    const double sd = std::sqrt(uniform(rng, 0.0, opt.noise_var_max));
    std::normal_distribution<double> noise(0.0, sd > 0.0 ? sd : 1e-300);
    for (auto& x : v.image.storage()) x += noise(rng);
  }
  if (trigger(rng)) gaussian_blur(v.image, uniform(rng, opt.blur_sigma_min, opt.blur_sigma_max));
  if (trigger(rng)) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double f = uniform(rng, opt.brightness_min, opt.brightness_max);
      for (std::size_t i = 0; i < sp; ++i) v.image[c * sp + i] *= f;
    }
  }
  if (trigger(rng)) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = v.image.raw() + c * sp;
      const double f = uniform(rng, opt.contrast_min, opt.contrast_max);
      const double mean = std::accumulate(p, p + sp, 0.0) / static_cast<double>(sp);
      const auto [lo, hi] = std::minmax_element(p, p + sp);
      const double mn = *lo, mx = *hi;
      for (std::size_t i = 0; i < sp; ++i) p[i] = std::clamp((p[i] - mean) * f + mean, mn, mx);
    }
  }
  if (trigger(rng)) {
    const double zoom = uniform(rng, opt.lowres_zoom_min, opt.lowres_zoom_max);
    std::array<std::size_t, 3> low{};
    for (int a = 0; a < 3; ++a)
      low[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(extent[a] * zoom)));
    v.image = resize_trilinear(resize_nearest(v.image, low), extent);
  }
  if (trigger(rng)) gamma_transform(v.image, uniform(rng, opt.gamma_min, opt.gamma_max));
  if (trigger(rng)) {
    std::bernoulli_distribution coin(0.5);
    std::array<bool, 3> axes{};
    for (auto& ax : axes) ax = coin(rng);
    mirror(v, axes);
  }
}

// ---- folds ---------------------------------------------------------------------

std::vector<int> make_folds(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be at least 2");
  std::vector<int> classes(labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<int> fold(labels.size(), -1);
  Rng rng(seed);
  for (int c : classes) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    if (idx.size() < k) {
      throw std::invalid_argument("make_folds: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                  " records, fewer than k=" + std::to_string(k));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) fold[idx[j]] = static_cast<int>(j % k);
  }
  return fold;
}

// ---- synthetic data ------------------------------------------------------------

Dataset synth_generate(std::size_t n, const std::array<std::size_t, 4>& shape, std::uint64_t seed,
                       const SynthOptions& opt) {
  const std::size_t C = shape[0], X = shape[1], Y = shape[2], Z = shape[3];
  if (C == 0 || X == 0 || Y == 0 || Z == 0) throw std::invalid_argument("synth_generate: empty shape");
  // Radii are specified for a 24-voxel short axis and scale with the volume.
  const double unit = static_cast<double>(std::min({X, Y, Z})) / 24.0;
  const std::array<double, 3> centre{(X - 1) / 2.0, (Y - 1) / 2.0, (Z - 1) / 2.0};
  const std::array<double, 3> brain{0.45 * X, 0.45 * Y, 0.45 * Z};
  const double tissue[4] = {1.0, 1.2, 0.9, 1.1};
  const double blob_gain[4] = {0.3, 1.0, 0.6, 0.8};

  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    Volume v;
    v.id = "synth_" + std::to_string(i);
    v.label = static_cast<int>(i % 2);
    v.image = Tensor({C, X, Y, Z});
    v.mask = Tensor({X, Y, Z});
    const bool high = v.label == 1;
    const double radius = unit * (high ? uniform(rng, opt.class1_radius_min, opt.class1_radius_max)
                                       : uniform(rng, opt.class0_radius_min, opt.class0_radius_max));
    const double contrast = high ? uniform(rng, opt.class1_contrast_min, opt.class1_contrast_max)
                                 : uniform(rng, opt.class0_contrast_min, opt.class0_contrast_max);
    std::array<double, 3> axes{};
    for (auto& a : axes) a = radius * uniform(rng, 0.85, 1.15);
    // Blob centre inside the brain, at least one voxel from its edge.
    std::array<double, 3> c{};
    for (;;) {
      std::array<double, 3> u{};
      double r2 = 0.0;
      for (auto& x : u) x = uniform(rng, -1.0, 1.0), r2 += x * x;
      if (r2 > 1.0) continue;
      for (int a = 0; a < 3; ++a) c[a] = centre[a] + u[a] * std::max(0.0, brain[a] - axes[a] - 1.0);
      break;
    }
    // Smooth low-frequency tissue variation plus white noise.
    std::array<double, 3> phase{};
    for (auto& p : phase) p = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> noise(0.0, opt.noise_sd);
    for (std::size_t x = 0; x < X; ++x)
      for (std::size_t y = 0; y < Y; ++y)
        for (std::size_t z = 0; z < Z; ++z) {
          const double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
          double b = 0.0, k = 0.0;
          for (int a = 0; a < 3; ++a) {
            b += (p[a] - centre[a]) * (p[a] - centre[a]) / (brain[a] * brain[a]);
            k += (p[a] - c[a]) * (p[a] - c[a]) / (axes[a] * axes[a]);
          }
          if (b > 1.0) continue;
          const bool in_blob = k <= 1.0;
          const std::size_t s = (x * Y + y) * Z + z;
          v.mask[s] = in_blob ? 1.0 : 0.0;
          const double field = 0.1 * std::sin(2.0 * std::numbers::pi * x / X + phase[0]) *
                               std::cos(2.0 * std::numbers::pi * y / Y + phase[1]) *
                               std::sin(std::numbers::pi * z / Z + phase[2]);
          for (std::size_t ch = 0; ch < C; ++ch) {
            double val = tissue[ch % 4] + field + noise(rng);
            if (in_blob) val += contrast * blob_gain[ch % 4];
            // Keep brain voxels nonzero so the z-score support is the brain.
            v.image[ch * X * Y * Z + s] = val == 0.0 ? 1e-12 : val;
          }
        }
    zscore_nonzero(v.image, 1e-6);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<SubjectRecord> write_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  // The manifest names files relative to itself; the returned records carry full paths.
  std::vector<SubjectRecord> records, relative;
  for (const auto& v : data) {
    SubjectRecord r;
    r.id = v.id;
    r.label = v.label;
    SubjectRecord rel = r;
    const std::size_t sp = channel_size(v.image);
    const auto e = spatial_extent(v.image);
    for (std::size_t m = 0; m < 4; ++m) {
      Tensor chan({e[0], e[1], e[2]});
      std::copy_n(v.image.raw() + (m % v.image.dim(0)) * sp, sp, chan.raw());
      const std::string name = v.id + "_" + kModalities[m] + ".nii.gz";
      write_nifti(dir / name, chan);
      r.modalities[m] = (dir / name).string();
      rel.modalities[m] = name;
    }
    if (v.has_mask()) {
      const std::string name = v.id + "_seg.nii.gz";
      write_nifti(dir / name, v.mask);
      r.segmentation = (dir / name).string();
      rel.segmentation = name;
    }
    records.push_back(std::move(r));
    relative.push_back(std::move(rel));
  }
  write_manifest(dir / "manifest.csv", relative);
  return records;
}

// ---- cache ---------------------------------------------------------------------

namespace {

constexpr char kVolumeMagic[8] = {'M', 'A', 'P', 'V', 'O', 'L', '0', '1'};

void put_u64(std::ostream& o, std::uint64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
std::uint64_t get_u64(std::istream& i) {
  std::uint64_t v = 0;
  i.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void put_tensor(std::ostream& o, const Tensor& t) {
  put_u64(o, t.rank());
  for (std::size_t d : t.shape()) put_u64(o, d);
  o.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor get_tensor(std::istream& i) {
  const std::uint64_t rank = get_u64(i);
  if (rank > 8) throw std::runtime_error("corrupt volume container");
  Shape s(rank);
  for (auto& d : s) d = get_u64(i);
  Tensor t(s);
  i.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  return t;
}

std::string cache_key(const SubjectRecord& r, const PreprocessOptions& opt) {
  std::ostringstream os;
  os << r.id << '_' << opt.target[0] << 'x' << opt.target[1] << 'x' << opt.target[2];
  return os.str();
}

}  // namespace

void save_volume(const fs::path& path, const Volume& v) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary);
    o.write(kVolumeMagic, 8);
    put_u64(o, v.id.size());
    o.write(v.id.data(), static_cast<std::streamsize>(v.id.size()));
    put_u64(o, static_cast<std::uint64_t>(v.label));
    put_tensor(o, v.image);
    put_u64(o, v.has_mask());
    if (v.has_mask()) put_tensor(o, v.mask);
    if (!o) throw std::runtime_error("failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

Volume load_volume(const fs::path& path) {
  std::ifstream i(path, std::ios::binary);
  char magic[8];
  if (!i.read(magic, 8) || std::memcmp(magic, kVolumeMagic, 8) != 0)
    throw std::runtime_error("'" + path.string() + "' is not a volume container");
  Volume v;
  v.id.resize(get_u64(i));
  i.read(v.id.data(), static_cast<std::streamsize>(v.id.size()));
  v.label = static_cast<int>(get_u64(i));
  v.image = get_tensor(i);
  if (get_u64(i)) v.mask = get_tensor(i);
  if (!i) throw std::runtime_error("truncated volume container '" + path.string() + "'");
  return v;
}

std::optional<fs::path> cache_dir_from_env() {
  const char* env = std::getenv(kCacheEnv);
  if (!env || !*env) return std::nullopt;
  return fs::path(env);
}

Dataset load_dataset(const std::vector<SubjectRecord>& records, const PreprocessOptions& opt,
                     const std::optional<fs::path>& cache_dir) {
  Dataset out;
  std::vector<std::string> index;
  if (cache_dir) fs::create_directories(*cache_dir);
  for (const auto& r : records) {
    const std::string key = cache_key(r, opt);
    const fs::path cached = cache_dir ? *cache_dir / (key + ".vol") : fs::path();
    Volume v;
    if (cache_dir && fs::exists(cached)) {
      v = load_volume(cached);
    } else {
      v = preprocess(load_subject(r), opt);
      v.id = r.id;
      v.label = r.label;
      if (cache_dir) save_volume(cached, v);
    }
    v.label = r.label;
    if (cache_dir) index.push_back(key + ".vol " + r.id + ' ' + std::to_string(r.label));
    out.push_back(std::move(v));
  }
  if (cache_dir) {
    std::ofstream idx(*cache_dir / "index.txt");
    for (const auto& line : index) idx << line << '\n';
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

}  // namespace maproto
