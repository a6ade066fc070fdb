#pragma once

// Geometric and photometric augmentation with label co-transformation.
// "Decoupled" mode samples RGB and depth transforms from independent streams,
// so each modality carries its own label view.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "crodino/core.hpp"

namespace crodino::augment {

using RngStream = std::mt19937_64;

/// Horizontal flip of the source, isotropic scale, and the top-left corner of
/// the crop window in scaled-image pixels.
struct GeoTransform {
  bool flip_h = false;
  double scale = 1.0;
  std::int64_t crop_row = 0;
  std::int64_t crop_col = 0;
};

struct AugmentParams {
  bool enabled = true;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double jitter = 0.2;
  std::int64_t out_height = 0;  // 0: same as input
  std::int64_t out_width = 0;
};

AugmentParams params_from(const TrainConfig& cfg);

constexpr std::int64_t kMinImageSide = 8;

/// Crop window size for an image of in_h x in_w scaled by `scale` and an
/// output of out_h x out_w: the output size, shrunk to fit the scaled image.
std::pair<std::int64_t, std::int64_t> crop_size(std::int64_t in_h, std::int64_t in_w, double scale,
                                                std::int64_t out_h, std::int64_t out_w);

/// Draws flip (p = 1/2), scale ~ U[scale_min, scale_max], and a uniform crop
/// origin. Throws ShapeError for images below kMinImageSide.
GeoTransform sample_transform(RngStream& rng, std::int64_t height, std::int64_t width, const AugmentParams& p);

/// Applies t to an H x W x c image (bilinear) and its H x W label map
/// (nearest neighbour). Output is out_hw (defaults to the input size).
std::pair<torch::Tensor, torch::Tensor> apply_geo(const torch::Tensor& image, const torch::Tensor& labels,
                                                  const GeoTransform& t,
                                                  std::pair<std::int64_t, std::int64_t> out_hw = {0, 0});

/// Brightness, contrast and saturation factors drawn from [1-s, 1+s], output
/// clamped to [0,1]. Only valid for 3-channel images.
torch::Tensor color_jitter(const torch::Tensor& rgb, RngStream& rng, double strength);

/// A batch of paired samples: rgb B x H x W x 3, depth B x H x W x 1,
/// labels B x H x W.
struct Batch {
  torch::Tensor rgb;
  torch::Tensor depth;
  torch::Tensor labels;

  std::int64_t size() const { return labels.size(0); }
};

/// Per-modality views after augmentation.
struct AugmentedBatch {
  torch::Tensor rgb;
  torch::Tensor rgb_labels;
  torch::Tensor depth;
  torch::Tensor depth_labels;
};

/// Samples per-sample transforms from streams split off `master_seed` and
/// applies them. decoupled=false applies one shared transform to both
/// modalities (and therefore one label view).
AugmentedBatch augment_batch(const Batch& batch, std::uint64_t master_seed, bool decoupled, const AugmentParams& p);

/// Applies explicit per-sample transforms (no jitter).
AugmentedBatch apply_views(const Batch& batch, const std::vector<GeoTransform>& rgb_t,
                           const std::vector<GeoTransform>& depth_t, std::pair<std::int64_t, std::int64_t> out_hw = {0, 0});

}  // namespace crodino::augment
