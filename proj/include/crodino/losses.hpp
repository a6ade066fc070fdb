#pragma once

// Training objectives. All inputs are channel-last tensors of any floating
// dtype; every function returns a 0-dim tensor that carries autograd history.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "crodino/core.hpp"

namespace crodino::losses {

/// Denominator guard for cosine similarity and L2 normalization.
constexpr double kNormEps = 1e-8;

/// lambda * other + (1 - lambda) * own. lambda weights the other modality.
torch::Tensor feature_mixup(const torch::Tensor& own_inv, const torch::Tensor& other_inv, double lambda);

/// Pixel-wise cross entropy averaged over non-ignored pixels.
/// Throws std::invalid_argument when every pixel is ignored.
torch::Tensor cross_entropy(const SegLogits& logits, const torch::Tensor& labels,
                            std::int64_t ignore_index = kDefaultIgnore);

/// Mean of the CE on the plain and the mixup-decoded logits.
torch::Tensor seg_loss(const SegLogits& logits, const SegLogits& logits_mix, const torch::Tensor& labels,
                       std::int64_t ignore_index = kDefaultIgnore);

/// (1/B) sum_b sum_{i,j} cos(inv[b,i,j,:], spc[b,i,j,:]); signed cosine.
torch::Tensor orthogonality_loss(const torch::Tensor& inv, const torch::Tensor& spc);

/// Spatial mean of each instance's half volume, L2 normalized. B x F/2.
torch::Tensor pool_normalize(const torch::Tensor& inv);

/// InfoNCE with negative Euclidean distance. Row i of `anchor` is pulled
/// towards row i of `other`; the denominator sums the j != i rows of both
/// `other` and `anchor`. include_positive adds the positive pair to the
/// denominator (canonical InfoNCE).
torch::Tensor contrastive_loss(const torch::Tensor& anchor, const torch::Tensor& other, double tau,
                               bool include_positive = false);

/// CE(inv logits) + CE(spc logits).
torch::Tensor aux_loss(const SegLogits& logits_inv, const SegLogits& logits_spc, const torch::Tensor& labels,
                       std::int64_t ignore_index = kDefaultIgnore);

/// Per-pixel KL(softmax(teacher) || softmax(student)) averaged over
/// non-ignored pixels. No gradient flows into the teacher.
torch::Tensor kl_divergence(const SegLogits& student, const SegLogits& teacher, const torch::Tensor& labels,
                            std::int64_t ignore_index = kDefaultIgnore);

/// alpha * CE(student, Y) + (1 - alpha) * KL(teacher || student).
/// alpha = 1 drops the KL term entirely, alpha = 0 drops the CE term.
torch::Tensor kd_loss(const SegLogits& student, const SegLogits& teacher, const torch::Tensor& labels, double alpha,
                      std::int64_t ignore_index = kDefaultIgnore);

struct LossToggles {
  bool use_orth = true;
  bool use_con = true;
  bool use_aux = true;
};

/// Sum over both modalities of con + seg + orth + aux; disabled terms count 0.
double total_loss(const LossReport& report, const LossToggles& toggles);

// -- verification suite ------------------------------------------------------

struct CheckResult {
  std::string name;
  double value;
  double expected;
  bool passed;
};

/// Max-norm relative error between the autograd gradient of `f` and its
/// central finite-difference estimate, over every input (float64 inputs).
double gradient_check(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                      std::vector<torch::Tensor> inputs, double step = 1e-5);

/// Identity and gradient checks for every loss. Used by `losscheck`.
std::vector<CheckResult> run_loss_checks();

}  // namespace crodino::losses
