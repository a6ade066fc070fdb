#include "crodino/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace crodino::losses {

namespace {

void check_logits(const SegLogits& logits, const torch::Tensor& labels) {
  if (logits.dim() != 4 || labels.dim() != 3 || logits.size(0) != labels.size(0) ||
      logits.size(1) != labels.size(1) || logits.size(2) != labels.size(2))
    throw ShapeError("logits must be B x H x W x C with the label map's B x H x W");
}

// sqrt that is exactly 0 with zero gradient at 0 (avoids 0 * inf = NaN).
torch::Tensor safe_sqrt(const torch::Tensor& sq) {
  auto positive = sq > 0;
  return torch::where(positive, torch::where(positive, sq, torch::ones_like(sq)).sqrt(), torch::zeros_like(sq));
}

torch::Tensor euclidean_distances(const torch::Tensor& a, const torch::Tensor& b) {
  return safe_sqrt((a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1));
}

torch::Tensor valid_mask(const torch::Tensor& labels, std::int64_t ignore_index) {
  auto valid = labels != ignore_index;
  if (!valid.any().item<bool>()) throw std::invalid_argument("no non-ignored pixels in the label map");
  return valid;
}

torch::Tensor masked_pixel_mean(const torch::Tensor& per_pixel, const torch::Tensor& valid) {
  auto w = valid.to(per_pixel.scalar_type());
  return (per_pixel * w).sum() / w.sum();
}

}  // namespace

torch::Tensor feature_mixup(const torch::Tensor& own_inv, const torch::Tensor& other_inv, double lambda) {
  if (own_inv.sizes() != other_inv.sizes()) throw ShapeError("mixup operands must have equal shapes");
  if (!(lambda >= 0 && lambda <= 1)) throw std::invalid_argument("mixup lambda must lie in [0,1]");
  return lambda * other_inv + (1.0 - lambda) * own_inv;
}

torch::Tensor cross_entropy(const SegLogits& logits, const torch::Tensor& labels, std::int64_t ignore_index) {
  check_logits(logits, labels);
  auto valid = valid_mask(labels, ignore_index);
  auto safe = torch::where(valid, labels, torch::zeros_like(labels)).unsqueeze(-1);
  auto nll = -torch::log_softmax(logits, -1).gather(-1, safe).squeeze(-1);
  return masked_pixel_mean(nll, valid);
}

torch::Tensor seg_loss(const SegLogits& logits, const SegLogits& logits_mix, const torch::Tensor& labels,
                       std::int64_t ignore_index) {
  if (logits.is_same(logits_mix)) return cross_entropy(logits, labels, ignore_index);
  return 0.5 * (cross_entropy(logits, labels, ignore_index) + cross_entropy(logits_mix, labels, ignore_index));
}

torch::Tensor orthogonality_loss(const torch::Tensor& inv, const torch::Tensor& spc) {
  if (inv.dim() != 4 || inv.sizes() != spc.sizes()) throw ShapeError("inv and spc must be equal-shape B x h x w x F/2");
  auto dot = (inv * spc).sum(-1);
  auto denom = (inv.pow(2).sum(-1) * spc.pow(2).sum(-1)).clamp_min(kNormEps * kNormEps).sqrt();
  return (dot / denom).sum({1, 2}).mean();
}

torch::Tensor pool_normalize(const torch::Tensor& inv) {
  if (inv.dim() != 4) throw ShapeError("pool_normalize expects B x h x w x F/2");
  auto rho = inv.mean({1, 2});
  auto norm = rho.pow(2).sum(-1, /*keepdim=*/true).clamp_min(kNormEps * kNormEps).sqrt();
  return rho / norm;
}

torch::Tensor contrastive_loss(const torch::Tensor& anchor, const torch::Tensor& other, double tau,
                               bool include_positive) {
  if (anchor.dim() != 2 || anchor.sizes() != other.sizes()) throw ShapeError("pooled embeddings must be equal-shape B x D");
  if (anchor.size(0) < 2) throw std::invalid_argument("contrastive loss needs at least two instances");
  if (!(tau > 0)) throw std::invalid_argument("temperature must be positive");
  const auto b = anchor.size(0);
  auto cross = -euclidean_distances(anchor, other) / tau;  // [i, j]: anchor i vs other j
  auto self = -euclidean_distances(anchor, anchor) / tau;  // [i, j]: anchor i vs anchor j
  auto diag = torch::eye(b, torch::TensorOptions().dtype(torch::kBool));
  auto positive = cross.diagonal();
  torch::Tensor neg_cross = include_positive ? cross : cross.masked_fill(diag, -std::numeric_limits<double>::infinity());
  auto neg_self = self.masked_fill(diag, -std::numeric_limits<double>::infinity());
  auto log_denom = torch::logsumexp(torch::cat(std::vector<torch::Tensor>{neg_cross, neg_self}, 1), 1);
  return -(positive - log_denom).mean();
}

torch::Tensor aux_loss(const SegLogits& logits_inv, const SegLogits& logits_spc, const torch::Tensor& labels,
                       std::int64_t ignore_index) {
  return cross_entropy(logits_inv, labels, ignore_index) + cross_entropy(logits_spc, labels, ignore_index);
}

torch::Tensor kl_divergence(const SegLogits& student, const SegLogits& teacher, const torch::Tensor& labels,
                            std::int64_t ignore_index) {
  check_logits(student, labels);
  if (student.sizes() != teacher.sizes()) throw ShapeError("student and teacher logits must have equal shapes");
  auto valid = valid_mask(labels, ignore_index);
  auto log_t = torch::log_softmax(teacher.detach(), -1);
  auto log_s = torch::log_softmax(student, -1);
  auto per_pixel = (log_t.exp() * (log_t - log_s)).sum(-1);
  return masked_pixel_mean(per_pixel, valid);
}

torch::Tensor kd_loss(const SegLogits& student, const SegLogits& teacher, const torch::Tensor& labels, double alpha,
                      std::int64_t ignore_index) {
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("kd alpha must lie in [0,1]");
  if (student.sizes() != teacher.sizes()) throw ShapeError("student and teacher logits must have equal shapes");
  if (alpha == 1) return cross_entropy(student, labels, ignore_index);
  if (alpha == 0) return kl_divergence(student, teacher, labels, ignore_index);
  return alpha * cross_entropy(student, labels, ignore_index) +
         (1 - alpha) * kl_divergence(student, teacher, labels, ignore_index);
}

double total_loss(const LossReport& r, const LossToggles& t) {
  double s = 0;
  for (int m = 0; m < 2; ++m) {
    if (t.use_con) s += r.con[m];
    s += r.seg[m];
    if (t.use_orth) s += r.orth[m];
    if (t.use_aux) s += r.aux[m];
  }
  return s;
}

}  // namespace crodino::losses
