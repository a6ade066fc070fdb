#pragma once

// Joint training of the RGB and depth networks with the disentanglement,
// mixup, contrastive and auxiliary objectives; schedule, optimizer and
// checkpointing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "crodino/augment.hpp"
#include "crodino/core.hpp"
#include "crodino/data.hpp"
#include "crodino/metrics.hpp"
#include "crodino/model.hpp"

namespace crodino::training {

/// Linear warmup from lr_start to lr_target over warmup_epochs, then
/// lr_target * (1 - (e - warmup) / (epochs - warmup))^poly_power, reaching 0
/// at e = epochs. Throws std::out_of_range outside [0, epochs].
double lr_at(double epoch, const TrainConfig& cfg);

/// AdamW with decoupled weight decay over named parameters. Parameters whose
/// gradient is undefined are left untouched (no decay, no moment update).
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1, double beta2, double eps,
        double weight_decay);

  void zero_grad();
  void step(double lr);

  std::int64_t steps() const { return steps_; }
  const std::vector<std::pair<std::string, torch::Tensor>>& params() const { return params_; }

  void save(std::map<std::string, torch::Tensor>& out) const;
  void load(const std::map<std::string, torch::Tensor>& in);

 private:
  std::vector<std::pair<std::string, torch::Tensor>> params_;
  std::vector<torch::Tensor> exp_avg_, exp_avg_sq_;
  std::vector<std::int64_t> param_steps_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0;
  std::int64_t steps_ = 0;
};

// -- checkpoints ----------------------------------------------------------------

/// Single archive: tensors keyed `enc_rgb/...`, `enc_d/...`, `dec_rgb/...`,
/// `dec_d/...`, `dec_aux/...` (or `dec_fusion/...` for the teacher),
/// optimizer moments under `optim/...`, plus config text, kind, epoch, step.
struct Checkpoint {
  std::string kind;  // crodino | single | teacher | kd
  TrainConfig config;
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  std::map<std::string, torch::Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Seeds the global torch generator from (seed, tag) and builds the module, so
/// a network's initial weights depend only on the master seed and its role.
ModalityNet make_net(const TrainConfig& cfg, Modality m);
AuxDecoder make_aux(const TrainConfig& cfg);

// -- joint training state -------------------------------------------------------

struct TrainState {
  TrainConfig cfg;
  ModalityNet rgb{nullptr};
  ModalityNet depth{nullptr};
  AuxDecoder aux{nullptr};
  AdamW optimizer;
  std::int64_t epoch = 0;
  std::int64_t step = 0;

  ModalityNet& net(Modality m) { return m == Modality::RGB ? rgb : depth; }

  /// The five parameter groups updated by one optimizer step.
  std::vector<std::pair<std::string, torch::nn::Module*>> groups();
};

TrainState make_state(const TrainConfig& cfg);
Checkpoint to_checkpoint(TrainState& s);
TrainState from_checkpoint(const Checkpoint& ck);

/// Per-step augmentation seed; a function of the master seed and global step.
std::uint64_t augment_seed(const TrainConfig& cfg, std::int64_t step);

/// One optimizer step on one batch: augment, encode both modalities, mix the
/// invariant halves, decode, compute all enabled losses, backpropagate the
/// unweighted total and update every parameter group. Throws
/// std::runtime_error naming the first non-finite loss term.
LossReport train_step(TrainState& state, const augment::Batch& batch);

/// Forward-only loss evaluation of a batch (no augmentation, no update).
LossReport compute_losses(TrainState& state, const augment::AugmentedBatch& views, bool backward);

metrics::ConfusionMatrix evaluate(ModalityNet& net, const std::vector<RGBDSample>& samples, std::int64_t batch_size,
                                  std::int64_t ignore_index);

// -- epoch loop ------------------------------------------------------------------

struct MetricsRow {
  std::int64_t epoch;
  double lr;
  LossReport loss;
  double miou_rgb;
  double miou_d;
  double seconds;
};

constexpr const char* kMetricsHeader =
    "epoch,lr,seg_rgb,seg_d,orth_rgb,orth_d,con_rgb,con_d,aux_rgb,aux_d,total,miou_rgb,miou_d";

std::string format_metrics_row(const MetricsRow& r);

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv and checkpoints go here
  std::optional<std::filesystem::path> resume_from;
  bool log = false;                               // per-epoch line on stderr
  std::function<void(const MetricsRow&)> on_epoch;
  std::function<void(const LossReport&)> on_step;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::optional<std::filesystem::path> final_checkpoint;
};

/// Runs the remaining epochs of the joint procedure. Eval mIoU is measured on
/// eval_samples (the training samples when empty).
TrainResult train(TrainState& state, const std::vector<RGBDSample>& train_samples,
                  const std::vector<RGBDSample>& eval_samples, const RunOptions& opts = {});

/// Loads cfg.train_manifest / cfg.eval_manifest and trains from scratch, or
/// from opts.resume_from.
TrainResult train(const TrainConfig& cfg, const RunOptions& opts = {});

std::vector<RGBDSample> load_split(const std::string& manifest, const TrainConfig& cfg, data::Split split);

/// Shared epoch loop used by every trainer.
struct EpochHooks {
  std::function<LossReport(const augment::Batch&, std::uint64_t aug_seed, double lr)> step;
  std::function<std::pair<double, double>()> evaluate;  // (miou_rgb, miou_d); NaN for absent branches
  std::function<Checkpoint()> checkpoint;
};

TrainResult run_epochs(const TrainConfig& cfg, std::int64_t& epoch, std::int64_t& step,
                       const std::vector<RGBDSample>& train_samples, const EpochHooks& hooks, const RunOptions& opts);

}  // namespace crodino::training
