#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dain/tensor.hpp"

namespace dain::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Synthetic ground-terrain generator
//
//   I(x; theta) = clamp(alpha * [T(x) * (rho0 + rho1 * cos(theta - theta0)) + relief(x, theta)] + noise)
//   relief(x, theta) = relief_amp * tan(theta) * dh/dx

enum class TextureFamily { BandNoise, Stripes, Blobs };

std::string_view to_string(TextureFamily f);
TextureFamily parse_texture_family(std::string_view s);

struct SpatialSpec {
  TextureFamily family = TextureFamily::BandNoise;
  double freq_lo = 2.0;  // cycles per image
  double freq_hi = 6.0;
  double orientation_deg = 0.0;  // stripes only
  double contrast = 0.3;
};

struct SynthClassSpec {
  int class_id = 0;
  std::string name;
  SpatialSpec spatial;
  double rho0 = 0.5;
  double rho1 = 0.0;
  double theta0_deg = 90.0;
  double relief_amp = 0.0;

  void validate() const;
};

enum class ImageFormat { F32Raw, Png8, Png16 };

std::string_view to_string(ImageFormat f);
ImageFormat parse_image_format(std::string_view s);

struct GeneratorConfig {
  std::vector<SynthClassSpec> specs;
  std::size_t samples_per_class = 20;
  std::vector<double> views_deg = {-40, -30, -20, -10, 0, 10, 20, 30, 40};
  double delta_deg = 5.0;
  std::size_t image_size = 32;
  std::size_t channels = 1;
  /// Per-sample gain, log-uniform over [gain_lo, gain_hi], stratified within each class.
  double gain_lo = 0.5;
  double gain_hi = 1.0;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
  ImageFormat format = ImageFormat::F32Raw;
  std::string illumination = "sun";

  void validate() const;
};

/// Four classes with identical spatial statistics that differ only in rho1.
std::vector<SynthClassSpec> angular_only_specs();
/// Eight classes separable by texture alone (rho1 = 0). All are flip-invariant.
std::vector<SynthClassSpec> spatial_only_specs();
/// Four classes differing in both texture and angular response.
std::vector<SynthClassSpec> mixed_specs();

/// The view-independent part of one sample.
struct SampleRealization {
  Tensor texture;    // T, [H,W] f64, unit mean
  Tensor height_dx;  // dh/dx, [H,W] f64
  double gain = 1.0;
};

/// Per-class gains: one draw from each of n equal-probability strata of the log-uniform law, randomly ordered.
std::vector<double> stratified_gains(const GeneratorConfig& cfg, int class_id);

SampleRealization realize_sample(const SynthClassSpec& spec, const GeneratorConfig& cfg, std::size_t sample_index,
                                 double gain);

/// One image [C,H,W] f64 at angle theta. Pixels outside [0,1] are clamped and counted in *clamped.
Tensor render_view(const SynthClassSpec& spec, const SampleRealization& r, double theta_deg, double noise_sigma,
                   std::size_t channels, std::mt19937_64& noise_rng, std::size_t* clamped = nullptr);

// ---------------------------------------------------------------------------
// Manifest

enum class Split { Train, Test, Unassigned };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

/// One I_v image; its I_{v+delta} partner lives at partner_path(path).
struct ManifestRecord {
  std::string path;  // relative to the manifest's root directory
  int class_id = 0;
  std::string sample_id;
  int view_index = 0;
  double theta_deg = 0.0;
  double delta_deg = 5.0;
  std::string illumination;
  Split split = Split::Unassigned;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  /// Unique (sample_id, view_index, illumination); one split and one class per sample.
  void validate() const;
  /// Sorted by (class_id, sample_id, view_index, illumination).
  void sort();
  std::vector<const ManifestRecord*> select(Split s) const;
  std::size_t n_classes() const;
  std::vector<std::string> sample_ids() const;
};

/// Replaces the last "_base" in a path with "_delta".
std::string partner_path(const std::string& base_path);

/// Tab-separated, one record per line, fields in canonical order:
///   path class_id sample_id view_index theta_deg delta_deg illumination split
/// Backslash, tab, CR and newline inside text fields are written as \\ \t \r \n.
std::string escape_field(std::string_view s);
std::string unescape_field(std::string_view s);
void write_manifest(const std::filesystem::path& file, const DatasetManifest& m);
/// Sets root to the file's directory and validates.
DatasetManifest read_manifest(const std::filesystem::path& file);

struct GenerateResult {
  DatasetManifest manifest;
  std::size_t clamped_pixels = 0;
  std::size_t total_pixels = 0;
};

/// Renders every (class, sample, view) pair into out_dir and writes out_dir/manifest.tsv.
/// Throws DataError if more than 1% of pixels had to be clamped.
GenerateResult generate_synthetic(const GeneratorConfig& cfg, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Images

/// [C,H,W] f32, values nominally in [0,1]. ".f32" writes raw little-endian floats plus a ".hdr"
/// sidecar ("f32 C H W"); ".png" writes 8- or 16-bit grey/RGB.
void write_image(const std::filesystem::path& path, const Tensor& image, ImageFormat png_depth = ImageFormat::Png16);
Tensor read_image(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// GTOS-style directory ingestion
//   <root>/<class_name>/sample_<NN>/theta_<+DD|-DD>_<base|delta>_<illum>.<png|f32>

struct GtosLayout {
  double delta_deg = 5.0;
};

struct IngestResult {
  DatasetManifest manifest;
  std::vector<std::string> class_names;  // index = class_id
  std::vector<std::string> warnings;     // unpaired views
  std::vector<std::string> errors;       // unparseable names
};

IngestResult ingest_gtos(const std::filesystem::path& root, const GtosLayout& layout = {});

// ---------------------------------------------------------------------------
// Splits

using SplitAssignment = std::map<std::string, Split>;  // sample_id -> split

/// Per class, ceil(train_fraction * n) samples train (at most n - 1), the rest test.
/// Split i shuffles with seed + i. Throws DataError for a class with fewer than 2 samples.
std::vector<SplitAssignment> make_splits(const DatasetManifest& m, double train_fraction = 0.7,
                                         std::size_t n_splits = 5, std::uint64_t seed = 0);
DatasetManifest apply_split(const DatasetManifest& m, const SplitAssignment& a);
void write_split(const std::filesystem::path& file, const SplitAssignment& a);
SplitAssignment read_split(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Loading and augmentation

struct Item {
  int class_id = 0;
  std::string sample_id;
  int view_index = 0;
  double theta_deg = 0.0;
  Tensor image;  // I_v [C,H,W] f32
  Tensor diff;   // I_delta [C,H,W] f32
};

/// Reads the records of one split (all records when split is nullopt) with their differential images.
std::vector<Item> load_items(const DatasetManifest& m, std::optional<Split> split);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Per-channel mean and std over the I_v images.
ChannelStats channel_stats(const std::vector<Item>& items);

struct AugmentConfig {
  double stretch_pct = 10.0;
  double flip_prob = 0.5;
  std::size_t crop = 28;
  ChannelStats norm;

  void validate(std::size_t image_size) const;
};

struct ImagePair {
  Tensor image;
  Tensor diff;
};

/// Random per-axis stretch, mirror flips and crop, drawn once and applied to both images.
/// I_v is standardized with norm; I_delta is divided by the same std without a mean shift.
ImagePair augment(const Tensor& image, const Tensor& diff, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Evaluation transform: centre crop and the same normalization, no randomness.
ImagePair eval_transform(const Tensor& image, const Tensor& diff, const AugmentConfig& cfg);

}  // namespace dain::data
