#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "maproto/affine.hpp"

namespace maproto {

/// Modality order on the channel axis.
inline constexpr std::array<const char*, 4> kModalities{"t1", "t1ce", "t2", "flair"};
inline constexpr std::size_t kT1ceChannel = 1;

struct SubjectRecord {
  std::string id;
  std::array<std::string, 4> modalities;  // T1, T1CE, T2, FLAIR
  std::string segmentation;               // empty if absent
  int label = 0;                          // LGG = 0, HGG = 1
};

/// One preprocessed subject: (4, X, Y, Z) intensities and an optional (X, Y, Z) binary mask.
struct Volume {
  std::string id;
  Tensor image;
  Tensor mask;
  int label = 0;

  bool has_mask() const { return !mask.empty(); }
};

using Dataset = std::vector<Volume>;

// ---- NIfTI-1 -------------------------------------------------------------------

struct NiftiImage {
  std::array<std::size_t, 3> dims{};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Tensor data;  // (X, Y, Z), scaling already applied
};

/// Reads a single-volume NIfTI-1 file, gzip-compressed or not. Errors name the path.
NiftiImage read_nifti(const std::filesystem::path& path);
/// Writes a float32 NIfTI-1 file; a ".gz" suffix selects gzip compression.
void write_nifti(const std::filesystem::path& path, const Tensor& volume,
                 const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});

// ---- manifest ------------------------------------------------------------------

/// CSV with header `id,t1,t1ce,t2,flair,seg,label`. Relative paths resolve against the manifest's directory.
std::vector<SubjectRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<SubjectRecord>& records);

struct RawSubject {
  Tensor image;  // (4, X, Y, Z)
  Tensor mask;   // (X, Y, Z) whole-tumour mask, or empty

  bool has_mask() const { return !mask.empty(); }
};

/// Loads all four modalities (and the segmentation, relabelled to label > 0).
RawSubject load_subject(const SubjectRecord& record);

// ---- preprocessing -------------------------------------------------------------

struct PreprocessOptions {
  std::array<std::size_t, 3> crop{192, 192, 144};
  std::array<std::size_t, 3> target{128, 128, 96};
  double sd_floor = 1e-6;
};

/// Centre crop, trilinear resize, per-modality z-score over nonzero voxels.
/// Input already at the target size skips the geometric steps.
Volume preprocess(const RawSubject& raw, const PreprocessOptions& opt);

/// In place z-score of each channel over its nonzero voxels; zeros stay zero.
void zscore_nonzero(Tensor& image, double sd_floor);

/// Centre-crop offsets of `crop` inside `extent`. Throws if the window does not fit.
std::array<std::size_t, 3> crop_offsets(const std::array<std::size_t, 3>& extent,
                                        const std::array<std::size_t, 3>& crop);
/// Crops the last three axes of a (..., X, Y, Z) tensor.
Tensor crop_spatial(const Tensor& x, const std::array<std::size_t, 3>& offset,
                    const std::array<std::size_t, 3>& extent);

// ---- augmentation --------------------------------------------------------------

struct AugmentOptions {
  double probability = 0.2;  // per-step trigger probability
  double rotation_deg = 15.0;
  double scale_min = 0.9, scale_max = 1.1;
  double noise_var_max = 0.1;
  double blur_sigma_min = 0.5, blur_sigma_max = 1.0;
  double brightness_min = 0.75, brightness_max = 1.25;
  double contrast_min = 0.75, contrast_max = 1.25;
  double lowres_zoom_min = 0.5, lowres_zoom_max = 1.0;
  double gamma_min = 0.7, gamma_max = 1.5;

  void validate() const;
};

enum class AugmentStep { Spatial, Noise, Blur, Brightness, Contrast, LowRes, Gamma, Mirror };
inline constexpr std::size_t kAugmentSteps = 8;

/// Applies the eight steps in order, each triggered independently with
/// `opt.probability`. Geometric steps move the mask with the image.
void augment(Volume& v, Rng& rng, const AugmentOptions& opt);

/// Individual steps, exposed for tests.
void mirror(Volume& v, const std::array<bool, 3>& axes);
void gamma_transform(Tensor& image, double gamma);
void gaussian_blur(Tensor& image, double sigma);

// ---- folds ---------------------------------------------------------------------

/// Stratified k-fold: entry i is the validation fold of record i.
std::vector<int> make_folds(const std::vector<int>& labels, std::size_t k, std::uint64_t seed);

// ---- synthetic data ------------------------------------------------------------

struct SynthOptions {
  double class1_radius_min = 5.0, class1_radius_max = 7.0;
  double class0_radius_min = 3.0, class0_radius_max = 5.0;
  double class1_contrast_min = 2.0, class1_contrast_max = 3.0;
  double class0_contrast_min = 0.8, class0_contrast_max = 1.3;
  double noise_sd = 0.25;
};

/// Balanced synthetic set of (C, X, Y, Z) volumes: an ellipsoidal "brain"
/// with one ellipsoidal blob whose size and brightness depend on the class.
/// The blob is the stored mask. Volumes are z-scored like real data.
Dataset synth_generate(std::size_t n, const std::array<std::size_t, 4>& shape, std::uint64_t seed,
                       const SynthOptions& opt = {});

/// Writes each subject as four modality files plus a mask, and a manifest.
std::vector<SubjectRecord> write_dataset(const Dataset& data, const std::filesystem::path& dir);

// ---- loading with cache --------------------------------------------------------

/// Environment variable naming an optional preprocessed-volume cache directory.
inline constexpr const char* kCacheEnv = "MAPROTO_CACHE_DIR";

/// Loads and preprocesses every record, using the cache directory if set.
Dataset load_dataset(const std::vector<SubjectRecord>& records, const PreprocessOptions& opt,
                     const std::optional<std::filesystem::path>& cache_dir);
std::optional<std::filesystem::path> cache_dir_from_env();

/// Flat binary container of one volume (image, mask, label).
void save_volume(const std::filesystem::path& path, const Volume& v);
Volume load_volume(const std::filesystem::path& path);

/// Deterministic 64-bit mixing of a seed with stream coordinates.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace maproto
