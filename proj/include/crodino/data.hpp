#pragma once

// Synthetic RGBD scenes and on-disk paired datasets.
//
// On disk: binary netpbm files. RGB is 8-bit PPM (P6), depth is 16-bit PGM
// (P5, maxval 65535), labels are 8-bit PGM. A manifest is JSON lines: one
// header object {"num_classes": int, "depth_divisor": float} followed by one
// {"rgb": str, "depth": str, "label": str} object per sample. Relative paths
// resolve against the manifest's directory.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crodino/augment.hpp"
#include "crodino/core.hpp"

namespace crodino::data {

enum class Split { Train, Test };

struct ClassAppearance {
  std::array<float, 3> color;
  float depth;
};

/// Per-class mean colour and depth. Classes 0 and 1 share almost the same
/// colour but sit on far-apart depth planes; classes 2 and 3 (when C >= 4)
/// have clearly different colours but nearly the same depth.
std::vector<ClassAppearance> class_palette(std::int64_t num_classes);

constexpr float kColorNoise = 0.06f;
constexpr float kDepthNoise = 0.02f;
constexpr float kDepthTilt = 0.05f;

/// n Voronoi scenes of H x W with one cell per class. Deterministic in seed.
std::vector<RGBDSample> generate_synthetic(std::uint64_t seed, std::int64_t n, std::int64_t height, std::int64_t width,
                                           std::int64_t num_classes);

struct ManifestEntry {
  std::string rgb;
  std::string depth;
  std::string label;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::int64_t num_classes = 0;
  double depth_divisor = 65535.0;
  Split split = Split::Train;
  std::filesystem::path base_dir;
};

DatasetManifest load_manifest(const std::filesystem::path& path, Split split = Split::Train);

/// Decodes every entry and validates it. depth_norm is one of "divisor"
/// (manifest divisor), "image_minmax" or "dataset_minmax".
std::vector<RGBDSample> load_samples(const DatasetManifest& m, const std::string& depth_norm = "divisor",
                                     std::int64_t ignore_index = kDefaultIgnore);

/// Writes samples as netpbm files plus `<name>.jsonl`; returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& name,
                                    const std::vector<RGBDSample>& samples, std::int64_t num_classes);

// netpbm. Images come back H x W x c float in [0, maxval] raw counts.
torch::Tensor read_netpbm(const std::filesystem::path& path);
void write_ppm8(const std::filesystem::path& path, const torch::Tensor& rgb01);
void write_pgm16(const std::filesystem::path& path, const torch::Tensor& depth01);
void write_pgm8_labels(const std::filesystem::path& path, const torch::Tensor& labels);

/// Index batches for one epoch. Train drops the final partial batch, test
/// keeps it. The shuffle is a function of (seed, epoch) only.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::int64_t batch_size, std::uint64_t seed,
                                                    std::int64_t epoch, Split split, bool shuffle);

augment::Batch collate(const std::vector<RGBDSample>& samples, const std::vector<std::size_t>& indices);

class BatchStream {
 public:
  BatchStream(const std::vector<RGBDSample>& samples, std::int64_t batch_size, std::uint64_t seed, std::int64_t epoch,
              Split split, bool shuffle);

  std::optional<augment::Batch> next();
  std::size_t num_batches() const { return plan_.size(); }

 private:
  const std::vector<RGBDSample>& samples_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
};

}  // namespace crodino::data
