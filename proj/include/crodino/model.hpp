#pragma once

// Per-modality encoder/decoder networks and the shared auxiliary decoder.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "crodino/core.hpp"

namespace crodino {

struct BackbonePreset {
  std::string name;
  std::int64_t features;  // F, encoder output channels (even)
  std::int64_t stride;    // input-to-feature downsampling
  bool uses_skip;         // main decoder consumes a low-level skip tensor
  std::int64_t skip_channels;
};

/// "tiny" (F=64, stride 8) or "resnet50-dilated" (F=1024, stride 8).
BackbonePreset backbone_preset(const std::string& name);

struct EncoderOutput {
  torch::Tensor features;  // N x F x h x w
  torch::Tensor skip;      // N x c x H/4 x W/4, or undefined
};

class EncoderBase : public torch::nn::Module {
 public:
  virtual EncoderOutput forward(const torch::Tensor& x_nchw) = 0;
  /// First convolution of the stem; target of the RGB -> depth adaptation.
  virtual torch::nn::Conv2d& stem() = 0;
};

class DecoderBase : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& skip,
                                std::pair<std::int64_t, std::int64_t> out_hw) = 0;
  virtual std::int64_t in_channels() const = 0;
  virtual std::int64_t out_channels() const = 0;
};

std::shared_ptr<EncoderBase> make_encoder(const BackbonePreset& p, std::int64_t in_channels);
/// use_skip=false builds the skip-free variant (auxiliary decoder).
std::shared_ptr<DecoderBase> make_decoder(const BackbonePreset& p, std::int64_t in_channels,
                                          std::int64_t num_classes, bool use_skip);

/// Enc_m followed by Dec_m for one modality.
class ModalityNetImpl : public torch::nn::Module {
 public:
  ModalityNetImpl(Modality modality, const BackbonePreset& preset, std::int64_t num_classes);

  Modality modality() const { return modality_; }
  const BackbonePreset& preset() const { return preset_; }
  std::int64_t num_classes() const { return num_classes_; }

  std::shared_ptr<EncoderBase> encoder;
  std::shared_ptr<DecoderBase> decoder;

 private:
  Modality modality_;
  BackbonePreset preset_;
  std::int64_t num_classes_;
};
TORCH_MODULE(ModalityNet);

/// Single training-only decoder shared by all four embedding halves.
class AuxDecoderImpl : public torch::nn::Module {
 public:
  AuxDecoderImpl(const BackbonePreset& preset, std::int64_t num_classes);

  const BackbonePreset& preset() const { return preset_; }
  std::shared_ptr<DecoderBase> decoder;

 private:
  BackbonePreset preset_;
};
TORCH_MODULE(AuxDecoder);

/// X is B x H x W x c_in (c_in = 3 for RGB, 1 for depth).
FeatureVolume encode(ModalityNet& net, const torch::Tensor& x);

/// Decodes [inv : spc] (in that order) to full-resolution logits B x H x W x C.
/// out_hw defaults to the feature grid times the preset stride.
SegLogits decode_main(ModalityNet& net, const torch::Tensor& inv, const torch::Tensor& spc,
                      const torch::Tensor& skip = {},
                      std::optional<std::pair<std::int64_t, std::int64_t>> out_hw = std::nullopt);

SegLogits decode_aux(AuxDecoder& aux, const torch::Tensor& half,
                     std::optional<std::pair<std::int64_t, std::int64_t>> out_hw = std::nullopt);

/// Full forward pass used for evaluation.
SegLogits predict(ModalityNet& net, const torch::Tensor& x);

/// k x k x 3 x n kernel (channel-last HWIO) -> k x k x 1 x n, averaging the
/// three input-channel slices.
torch::Tensor adapt_first_layer(const torch::Tensor& hwio_kernel);

/// Optional pretrained-weight hook. Copies matching encoder tensors by name
/// (names as in Module::named_parameters / named_buffers). A three-channel
/// stem kernel loaded into a depth encoder is averaged down to one channel.
/// With freeze_projection_bn the projection batch-norm keeps its loaded
/// statistics and affine terms during training.
void load_encoder_weights(ModalityNet& net, const std::map<std::string, torch::Tensor>& weights,
                          bool freeze_projection_bn = false);

std::int64_t parameter_count(const torch::nn::Module& m);

/// Flattened `prefix/name` -> tensor map of parameters and buffers.
void collect_tensors(const torch::nn::Module& m, const std::string& prefix,
                     std::map<std::string, torch::Tensor>& out);
/// Inverse of collect_tensors. Every parameter/buffer must be present.
void restore_tensors(torch::nn::Module& m, const std::string& prefix,
                     const std::map<std::string, torch::Tensor>& in);

}  // namespace crodino
