#include "crodino/model.hpp"

namespace crodino {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

BackbonePreset backbone_preset(const std::string& name) {
  if (name == "tiny") return {"tiny", 64, 8, false, 0};
  if (name == "resnet50-dilated") return {"resnet50-dilated", 1024, 8, true, 256};
  throw ConfigError("unknown backbone preset '" + name + "'");
}

namespace {

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1,
                std::int64_t dilation = 1, bool bias = false) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k)
                        .stride(stride)
                        .padding(dilation * (k - 1) / 2)
                        .dilation(dilation)
                        .bias(bias));
}

void append_cbr(nn::Sequential& seq, std::int64_t in, std::int64_t out, std::int64_t stride = 1,
                std::int64_t dilation = 1) {
  seq->push_back(conv(in, out, 3, stride, dilation));
  seq->push_back(nn::BatchNorm2d(out));
  seq->push_back(nn::ReLU());
}

torch::Tensor resize_to(const torch::Tensor& x, std::pair<std::int64_t, std::int64_t> hw) {
  if (x.size(2) == hw.first && x.size(3) == hw.second) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{hw.first, hw.second})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

// -- tiny preset ------------------------------------------------------------
//
// Four stride/width stages: /2 (32), /4 (64), /8 (64), and a dilated stage
// producing F channels, each ending in BN + ReLU.
class TinyEncoder : public EncoderBase {
 public:
  TinyEncoder(std::int64_t in_channels, std::int64_t features) {
    stem_ = register_module("stem", conv(in_channels, 32, 3, 2));
    body_ = nn::Sequential();
    body_->push_back(nn::BatchNorm2d(32));
    body_->push_back(nn::ReLU());
    append_cbr(body_, 32, 32);
    append_cbr(body_, 32, 64, 2);
    append_cbr(body_, 64, 64);
    append_cbr(body_, 64, 64, 2);
    append_cbr(body_, 64, 64);
    append_cbr(body_, 64, features, 1, 2);
    register_module("body", body_);
  }

  EncoderOutput forward(const torch::Tensor& x) override { return {body_->forward(stem_->forward(x)), {}}; }
  nn::Conv2d& stem() override { return stem_; }

 private:
  nn::Conv2d stem_{nullptr};
  nn::Sequential body_{nullptr};
};

// Two learned upsampling stages (x2 then x4) and a 1x1 classifier.
class TinyDecoder : public DecoderBase {
 public:
  TinyDecoder(std::int64_t in_channels, std::int64_t num_classes)
      : in_(in_channels), out_(num_classes) {
    body_ = nn::Sequential();
    body_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in_channels, 64, 4).stride(2).padding(1).bias(false)));
    body_->push_back(nn::BatchNorm2d(64));
    body_->push_back(nn::ReLU());
    append_cbr(body_, 64, 64);
    body_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(64, 32, 4).stride(4).bias(false)));
    body_->push_back(nn::BatchNorm2d(32));
    body_->push_back(nn::ReLU());
    append_cbr(body_, 32, 32);
    body_->push_back(conv(32, num_classes, 1, 1, 1, true));
    register_module("body", body_);
  }

  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor&,
                        std::pair<std::int64_t, std::int64_t> out_hw) override {
    return resize_to(body_->forward(features), out_hw);
  }
  std::int64_t in_channels() const override { return in_; }
  std::int64_t out_channels() const override { return out_; }

 private:
  std::int64_t in_, out_;
  nn::Sequential body_{nullptr};
};

// -- resnet50-dilated preset --------------------------------------------------

class BottleneckImpl : public nn::Module {
 public:
  static constexpr std::int64_t kExpansion = 4;

  BottleneckImpl(std::int64_t inplanes, std::int64_t planes, std::int64_t stride, std::int64_t dilation,
                 bool downsample) {
    conv1 = register_module("conv1", conv(inplanes, planes, 1));
    bn1 = register_module("bn1", nn::BatchNorm2d(planes));
    conv2 = register_module("conv2", conv(planes, planes, 3, stride, dilation));
    bn2 = register_module("bn2", nn::BatchNorm2d(planes));
    conv3 = register_module("conv3", conv(planes, planes * kExpansion, 1));
    bn3 = register_module("bn3", nn::BatchNorm2d(planes * kExpansion));
    if (downsample) {
      down = register_module("downsample", nn::Sequential(conv(inplanes, planes * kExpansion, 1, stride),
                                                         nn::BatchNorm2d(planes * kExpansion)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    return torch::relu(y + (down ? down->forward(x) : x));
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  nn::Sequential down{nullptr};
};
TORCH_MODULE(Bottleneck);

// ResNet-50 with strides of layer3/layer4 replaced by dilation (output stride
// 8), no final pooling, and a 1x1 projection 2048 -> F with BN + ReLU.
class ResNetDilatedEncoder : public EncoderBase {
 public:
  ResNetDilatedEncoder(std::int64_t in_channels, std::int64_t features) {
    stem_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, 64, 7).stride(2).padding(3).bias(false)));
    bn1_ = register_module("bn1", nn::BatchNorm2d(64));
    layer1_ = register_module("layer1", make_layer(64, 3, 1, false));
    layer2_ = register_module("layer2", make_layer(128, 4, 2, false));
    layer3_ = register_module("layer3", make_layer(256, 6, 2, true));
    layer4_ = register_module("layer4", make_layer(512, 3, 2, true));
    proj_ = register_module("proj", conv(512 * BottleneckImpl::kExpansion, features, 1));
    proj_bn_ = register_module("proj_bn", nn::BatchNorm2d(features));
  }

  EncoderOutput forward(const torch::Tensor& x) override {
    if (freeze_proj_bn_) proj_bn_->eval();
    auto y = torch::relu(bn1_(stem_(x)));
    y = F::max_pool2d(y, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    auto low = layer1_->forward(y);
    y = layer4_->forward(layer3_->forward(layer2_->forward(low)));
    return {torch::relu(proj_bn_(proj_(y))), low};
  }
  nn::Conv2d& stem() override { return stem_; }

  void freeze_projection_bn(bool on) {
    freeze_proj_bn_ = on;
    for (auto& p : proj_bn_->parameters()) p.set_requires_grad(!on);
  }

 private:
  nn::Sequential make_layer(std::int64_t planes, int blocks, std::int64_t stride, bool dilate) {
    const auto previous_dilation = dilation_;
    if (dilate) {
      dilation_ *= stride;
      stride = 1;
    }
    nn::Sequential seq;
    const bool downsample = stride != 1 || inplanes_ != planes * BottleneckImpl::kExpansion;
    seq->push_back(Bottleneck(inplanes_, planes, stride, previous_dilation, downsample));
    inplanes_ = planes * BottleneckImpl::kExpansion;
    for (int i = 1; i < blocks; ++i) seq->push_back(Bottleneck(inplanes_, planes, 1, dilation_, false));
    return seq;
  }

  std::int64_t inplanes_ = 64;
  std::int64_t dilation_ = 1;
  bool freeze_proj_bn_ = false;
  nn::Conv2d stem_{nullptr};
  nn::BatchNorm2d bn1_{nullptr};
  nn::Sequential layer1_{nullptr}, layer2_{nullptr}, layer3_{nullptr}, layer4_{nullptr};
  nn::Conv2d proj_{nullptr};
  nn::BatchNorm2d proj_bn_{nullptr};
};

class AsppImpl : public nn::Module {
 public:
  AsppImpl(std::int64_t in, std::int64_t out, std::vector<std::int64_t> rates) {
    branches_ = register_module("branches", nn::ModuleList());
    branches_->push_back(nn::Sequential(conv(in, out, 1), nn::BatchNorm2d(out), nn::ReLU()));
    for (auto r : rates) branches_->push_back(nn::Sequential(conv(in, out, 3, 1, r), nn::BatchNorm2d(out), nn::ReLU()));
    pool_ = register_module("pool", nn::Sequential(conv(in, out, 1), nn::BatchNorm2d(out), nn::ReLU()));
    project_ = register_module(
        "project", nn::Sequential(conv(out * static_cast<std::int64_t>(rates.size() + 2), out, 1), nn::BatchNorm2d(out), nn::ReLU()));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> outs;
    for (auto& b : *branches_) outs.push_back(b->as<nn::Sequential>()->forward(x));
    auto pooled = pool_->forward(F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1)));
    outs.push_back(resize_to(pooled, {x.size(2), x.size(3)}));
    return project_->forward(torch::cat(outs, 1));
  }

 private:
  nn::ModuleList branches_{nullptr};
  nn::Sequential pool_{nullptr}, project_{nullptr};
};
TORCH_MODULE(Aspp);

// DeepLabV3+ head: ASPP (rates for output stride 8), optional 48-channel
// low-level skip projection, two 3x3 refinement convs, classifier.
class DeepLabDecoder : public DecoderBase {
 public:
  DeepLabDecoder(std::int64_t in_channels, std::int64_t skip_channels, std::int64_t num_classes, bool use_skip)
      : in_(in_channels), out_(num_classes), use_skip_(use_skip) {
    aspp_ = register_module("aspp", Aspp(in_channels, 256, std::vector<std::int64_t>{12, 24, 36}));
    std::int64_t refine_in = 256;
    if (use_skip_) {
      low_ = register_module("low", nn::Sequential(conv(skip_channels, 48, 1), nn::BatchNorm2d(48), nn::ReLU()));
      refine_in += 48;
    }
    refine_ = nn::Sequential();
    append_cbr(refine_, refine_in, 256);
    if (use_skip_) append_cbr(refine_, 256, 256);
    refine_->push_back(conv(256, num_classes, 1, 1, 1, true));
    register_module("refine", refine_);
  }

  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& skip,
                        std::pair<std::int64_t, std::int64_t> out_hw) override {
    auto y = aspp_->forward(features);
    if (use_skip_) {
      if (!skip.defined()) throw ShapeError("decoder requires the low-level skip tensor");
      auto low = low_->forward(skip);
      y = torch::cat({resize_to(y, {low.size(2), low.size(3)}), low}, 1);
    }
    return resize_to(refine_->forward(y), out_hw);
  }
  std::int64_t in_channels() const override { return in_; }
  std::int64_t out_channels() const override { return out_; }

 private:
  std::int64_t in_, out_;
  bool use_skip_;
  Aspp aspp_{nullptr};
  nn::Sequential low_{nullptr}, refine_{nullptr};
};

torch::Tensor to_nchw(const torch::Tensor& x) { return x.permute({0, 3, 1, 2}); }
torch::Tensor to_nhwc(const torch::Tensor& x) { return x.permute({0, 2, 3, 1}); }

}  // namespace

std::shared_ptr<EncoderBase> make_encoder(const BackbonePreset& p, std::int64_t in_channels) {
  if (p.features % 2 != 0) throw ConfigError("encoder output channel count must be even");
  if (p.name == "tiny") return std::make_shared<TinyEncoder>(in_channels, p.features);
  return std::make_shared<ResNetDilatedEncoder>(in_channels, p.features);
}

std::shared_ptr<DecoderBase> make_decoder(const BackbonePreset& p, std::int64_t in_channels,
                                          std::int64_t num_classes, bool use_skip) {
  if (p.name == "tiny") return std::make_shared<TinyDecoder>(in_channels, num_classes);
  return std::make_shared<DeepLabDecoder>(in_channels, p.skip_channels, num_classes, use_skip && p.uses_skip);
}

ModalityNetImpl::ModalityNetImpl(Modality modality, const BackbonePreset& preset, std::int64_t num_classes)
    : modality_(modality), preset_(preset), num_classes_(num_classes) {
  encoder = register_module("enc", make_encoder(preset, input_channels(modality)));
  decoder = register_module("dec", make_decoder(preset, preset.features, num_classes, true));
}

AuxDecoderImpl::AuxDecoderImpl(const BackbonePreset& preset, std::int64_t num_classes) : preset_(preset) {
  decoder = register_module("dec", make_decoder(preset, preset.features / 2, num_classes, false));
}

FeatureVolume encode(ModalityNet& net, const torch::Tensor& x) {
  if (x.dim() != 4) throw ShapeError("encode expects a B x H x W x c batch");
  const auto want = input_channels(net->modality());
  if (x.size(3) != want)
    throw ShapeError("input has " + std::to_string(x.size(3)) + " channels but the " +
                     std::string(modality_name(net->modality())) + " encoder expects " + std::to_string(want));
  auto out = net->encoder->forward(to_nchw(x));
  auto z = to_nhwc(out.features);
  const auto half = z.size(3) / 2;
  FeatureVolume v;
  v.inv = z.narrow(3, 0, half);
  v.spc = z.narrow(3, half, half);
  v.skip = out.skip;
  v.modality = net->modality();
  return v;
}

SegLogits decode_main(ModalityNet& net, const torch::Tensor& inv, const torch::Tensor& spc, const torch::Tensor& skip,
                      std::optional<std::pair<std::int64_t, std::int64_t>> out_hw) {
  if (inv.dim() != 4 || spc.dim() != 4 || inv.sizes() != spc.sizes())
    throw ShapeError("inv and spc must be B x h x w x F/2 volumes of equal shape");
  if (inv.size(3) + spc.size(3) != net->decoder->in_channels())
    throw ShapeError("inv/spc channels sum to " + std::to_string(inv.size(3) + spc.size(3)) +
                     " but the decoder expects " + std::to_string(net->decoder->in_channels()));
  auto hw = out_hw.value_or(std::pair{inv.size(1) * net->preset().stride, inv.size(2) * net->preset().stride});
  auto z = torch::cat({inv, spc}, 3);
  return to_nhwc(net->decoder->forward(to_nchw(z), skip, hw));
}

SegLogits decode_aux(AuxDecoder& aux, const torch::Tensor& half,
                     std::optional<std::pair<std::int64_t, std::int64_t>> out_hw) {
  if (half.dim() != 4 || half.size(3) != aux->decoder->in_channels())
    throw ShapeError("auxiliary decoder expects a half volume with " + std::to_string(aux->decoder->in_channels()) +
                     " channels");
  auto hw = out_hw.value_or(std::pair{half.size(1) * aux->preset().stride, half.size(2) * aux->preset().stride});
  return to_nhwc(aux->decoder->forward(to_nchw(half), {}, hw));
}

SegLogits predict(ModalityNet& net, const torch::Tensor& x) {
  auto v = encode(net, x);
  return decode_main(net, v.inv, v.spc, v.skip, std::pair{x.size(1), x.size(2)});
}

torch::Tensor adapt_first_layer(const torch::Tensor& hwio_kernel) {
  if (hwio_kernel.dim() != 4 || hwio_kernel.size(2) != 3)
    throw ShapeError("first-layer adaptation expects a k x k x 3 x n kernel");
  return hwio_kernel.mean(2, /*keepdim=*/true);
}

void load_encoder_weights(ModalityNet& net, const std::map<std::string, torch::Tensor>& weights,
                          bool freeze_projection_bn) {
  torch::NoGradGuard guard;
  auto stem_weight = net->encoder->stem()->weight;
  for (auto& kv : net->encoder->named_parameters()) {
    const auto& name = kv.key();
    auto& t = kv.value();
    auto it = weights.find(name);
    if (it == weights.end()) continue;
    auto src = it->second;
    if (t.is_same(stem_weight) && src.dim() == 4 && src.size(1) == 3 && t.size(1) == 1) {
      // OIHW -> HWIO, average, back to OIHW.
      src = adapt_first_layer(src.permute({2, 3, 1, 0})).permute({3, 2, 0, 1});
    }
    if (src.sizes() != t.sizes()) throw ShapeError("pretrained tensor '" + name + "' has the wrong shape");
    t.copy_(src);
  }
  for (auto& kv : net->encoder->named_buffers()) {
    auto it = weights.find(kv.key());
    if (it != weights.end()) kv.value().copy_(it->second);
  }
  if (auto* resnet = dynamic_cast<ResNetDilatedEncoder*>(net->encoder.get())) resnet->freeze_projection_bn(freeze_projection_bn);
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

void collect_tensors(const torch::nn::Module& m, const std::string& prefix,
                     std::map<std::string, torch::Tensor>& out) {
  for (const auto& kv : m.named_parameters()) out[prefix + "/" + kv.key()] = kv.value().detach().clone();
  for (const auto& kv : m.named_buffers()) out[prefix + "/" + kv.key()] = kv.value().detach().clone();
}

void restore_tensors(torch::nn::Module& m, const std::string& prefix,
                     const std::map<std::string, torch::Tensor>& in) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& name, torch::Tensor& t) {
    auto it = in.find(prefix + "/" + name);
    if (it == in.end()) throw DataError("checkpoint is missing '" + prefix + "/" + name + "'");
    if (it->second.sizes() != t.sizes()) throw DataError("checkpoint tensor '" + prefix + "/" + name + "' has the wrong shape");
    t.copy_(it->second);
  };
  for (auto& kv : m.named_parameters()) copy(kv.key(), kv.value());
  for (auto& kv : m.named_buffers()) copy(kv.key(), kv.value());
}

}  // namespace crodino
