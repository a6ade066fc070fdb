#pragma once

// Conventional baselines: a concatenation-fusion RGBD teacher, plain
// single-modality training, and teacher -> student distillation.

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "crodino/training.hpp"

namespace crodino::baseline {

/// One encoder per modality, features concatenated along channels (2F), one
/// main decoder.
class FusionTeacherImpl : public torch::nn::Module {
 public:
  FusionTeacherImpl(const BackbonePreset& preset, std::int64_t num_classes);

  std::shared_ptr<EncoderBase> enc_rgb;
  std::shared_ptr<EncoderBase> enc_d;
  std::shared_ptr<DecoderBase> decoder;
  const BackbonePreset& preset() const { return preset_; }
  std::int64_t num_classes() const { return num_classes_; }

 private:
  BackbonePreset preset_;
  std::int64_t num_classes_;
};
TORCH_MODULE(FusionTeacher);

FusionTeacher make_teacher(const TrainConfig& cfg);

/// Both inputs are required and must be spatially paired.
SegLogits teacher_forward(FusionTeacher& t, const torch::Tensor& x_rgb, const torch::Tensor& x_d);

metrics::ConfusionMatrix evaluate_teacher(FusionTeacher& t, const std::vector<RGBDSample>& samples,
                                          std::int64_t batch_size, std::int64_t ignore_index);

// -- checkpoints -------------------------------------------------------------------

training::Checkpoint teacher_checkpoint(FusionTeacher& t, const TrainConfig& cfg, std::int64_t epoch,
                                        std::int64_t step);
FusionTeacher teacher_from_checkpoint(const training::Checkpoint& ck);

/// Loads the `enc_<m>/` and `dec_<m>/` networks of any checkpoint kind that
/// carries them (joint, single or kd).
ModalityNet net_from_checkpoint(const training::Checkpoint& ck, Modality m);
bool has_net(const training::Checkpoint& ck, Modality m);

// -- trainers ------------------------------------------------------------------------
//
// All three share the joint trainer's epoch loop, batch order and
// augmentation stream (one shared transform per sample). Metrics rows use the
// joint CSV schema: the objective goes in seg_<m>, eval mIoU in miou_<m>, and
// absent branches are NaN. The teacher reports under the rgb columns.

training::TrainResult train_teacher(const TrainConfig& cfg, const std::vector<RGBDSample>& train_samples,
                                    const std::vector<RGBDSample>& eval_samples, const training::RunOptions& opts = {},
                                    FusionTeacher* out = nullptr);

training::TrainResult train_single_modality(const TrainConfig& cfg, const std::vector<RGBDSample>& train_samples,
                                            const std::vector<RGBDSample>& eval_samples, Modality m,
                                            const training::RunOptions& opts = {}, ModalityNet* out = nullptr);

/// Student of modality m trained with kd_loss against the frozen teacher.
training::TrainResult train_baseline_kd(const TrainConfig& cfg, FusionTeacher& teacher,
                                        const std::vector<RGBDSample>& train_samples,
                                        const std::vector<RGBDSample>& eval_samples, Modality m, double alpha,
                                        const training::RunOptions& opts = {}, ModalityNet* out = nullptr);

/// Manifest-driven variant; loads the teacher from teacher_ckpt.
training::TrainResult train_baseline_kd(const TrainConfig& cfg, const std::filesystem::path& teacher_ckpt, Modality m,
                                        double alpha, const training::RunOptions& opts = {});

}  // namespace crodino::baseline
