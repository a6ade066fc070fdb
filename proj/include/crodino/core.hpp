#pragma once

// Shared domain types for the cross-modal distillation framework.
//
// Every array that crosses a module boundary is channel-last:
//   images     B x H x W x c   (float, values in [0,1])
//   labels     B x H x W       (int64, class id or ignore_index)
//   features   B x h x w x F/2 (one tensor per embedding half)
//   logits     B x H x W x C
// Modules are free to permute internally (the convolutions run NCHW).

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace crodino {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Modality { RGB, Depth };

constexpr std::int64_t kDefaultIgnore = 255;

inline std::int64_t input_channels(Modality m) { return m == Modality::RGB ? 3 : 1; }
std::string_view modality_name(Modality m);  // "rgb" / "d"
Modality parse_modality(std::string_view name);
inline Modality other(Modality m) { return m == Modality::RGB ? Modality::Depth : Modality::RGB; }

/// One paired scene. rgb is H x W x 3, depth H x W x 1, labels H x W (int64).
struct RGBDSample {
  torch::Tensor rgb;
  torch::Tensor depth;
  torch::Tensor labels;
};

/// Throws DataError when shapes disagree or a label is neither a class id
/// nor the ignore value.
void validate_sample(const RGBDSample& s, std::int64_t num_classes,
                     std::int64_t ignore_index = kDefaultIgnore);

/// Encoder output split along channels: inv holds the first F/2 channels,
/// spc the last F/2. skip carries low-level backbone features for decoders
/// that use a skip connection (undefined for presets without one).
struct FeatureVolume {
  torch::Tensor inv;
  torch::Tensor spc;
  torch::Tensor skip;
  Modality modality = Modality::RGB;

  std::int64_t half_channels() const { return inv.size(3); }
};

/// Pre-softmax class scores, B x H x W x C.
using SegLogits = torch::Tensor;

struct TrainConfig {
  std::int64_t num_classes = 4;
  std::int64_t epochs = 140;
  std::int64_t batch_size = 8;
  double lr_start = 1e-8;
  double lr_target = 1e-4;
  std::int64_t warmup_epochs = 10;
  double poly_power = 0.9;
  double tau = 0.07;
  double mixup_lambda = 0.35;

  bool use_orth = true;
  bool use_con = true;
  bool use_aux = true;
  bool use_mixup = true;
  bool use_decoupled_aug = true;

  std::uint64_t seed = 0;
  std::string backbone = "tiny";
  std::int64_t ignore_index = kDefaultIgnore;

  // Optimizer (AdamW, decoupled weight decay).
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // Augmentation. aug.decoupled is an alias of use_decoupled_aug.
  bool augment = true;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double jitter = 0.2;
  std::int64_t image_height = 0;  // 0: keep the input resolution
  std::int64_t image_width = 0;

  // Data.
  std::string train_manifest;
  std::string eval_manifest;
  std::string depth_norm = "divisor";  // divisor | image_minmax | dataset_minmax

  // Canonical InfoNCE (positive pair also in the denominator) instead of the
  // negatives-only denominator.
  bool infonce_include_positive = false;

  // Teacher/student baseline.
  double kd_alpha = 0.5;
  std::string kd_modality = "d";
  std::string teacher_checkpoint;

  std::int64_t checkpoint_every = 10;
  std::int64_t threads = 1;
};

/// Returns cfg unchanged, or throws ConfigError naming the first violated bound.
const TrainConfig& validate_config(const TrainConfig& cfg);

/// All addressable config keys, in file order.
const std::vector<std::string>& config_keys();
void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const TrainConfig& cfg, std::string_view key);

/// Flat `key = value` text, `#` starts a comment. Unknown keys are errors.
TrainConfig parse_config(std::istream& in, TrainConfig base = {});
TrainConfig load_config(const std::string& path);
std::string format_config(const TrainConfig& cfg);

/// Applies a `key=value` override.
void apply_override(TrainConfig& cfg, std::string_view assignment);

struct LossReport {
  // Indexed by modality: [0] = RGB, [1] = Depth.
  double seg[2] = {0, 0};
  double orth[2] = {0, 0};
  double con[2] = {0, 0};
  double aux[2] = {0, 0};
  double total = 0;

  double terms_sum() const;
  LossReport& operator+=(const LossReport& o);
  LossReport scaled(double f) const;
};

inline int modality_index(Modality m) { return m == Modality::RGB ? 0 : 1; }

/// Sub-seed for a named stream of a master seed (splitmix64 over the tag).
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0);

}  // namespace crodino
