#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "crodino/losses.hpp"

namespace crodino::losses {

double gradient_check(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                      std::vector<torch::Tensor> inputs, double step) {
  for (auto& x : inputs) x = x.detach().to(torch::kDouble).clone().set_requires_grad(true);
  auto value = f(inputs);
  auto grads = torch::autograd::grad({value}, inputs, {}, false, false, /*allow_unused=*/true);

  double diff_sq = 0, analytic_sq = 0, numeric_sq = 0;
  torch::NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto flat = inputs[k].view(-1);
    auto analytic = grads[k].defined() ? grads[k].reshape(-1) : torch::zeros_like(flat);
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + step;
      const double up = f(inputs).item<double>();
      flat[i] = orig - step;
      const double down = f(inputs).item<double>();
      flat[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[i].item<double>();
      diff_sq += (a - numeric) * (a - numeric);
      analytic_sq += a * a;
      numeric_sq += numeric * numeric;
    }
  }
  const double scale = std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-12});
  return std::sqrt(diff_sq) / scale;
}

namespace {

constexpr double kIdentityTol = 1e-6;
constexpr double kGradTol = 1e-4;

CheckResult identity(std::string name, double value, double expected) {
  return {std::move(name), value, expected, std::abs(value - expected) < kIdentityTol};
}

CheckResult gradient(std::string name, double rel_error) {
  return {std::move(name), rel_error, kGradTol, rel_error < kGradTol};
}

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kDouble); }

}  // namespace

std::vector<CheckResult> run_loss_checks() {
  std::vector<CheckResult> out;
  auto gen = at::detail::createCPUGenerator(20240917);
  auto randn = [&](std::vector<std::int64_t> shape) { return torch::randn(shape, gen, f64()); };

  // feature mixup
  {
    auto own = randn({2, 3, 3, 4}), other = randn({2, 3, 3, 4});
    out.push_back(identity("mixup_lambda0", (feature_mixup(own, other, 0.0) - own).abs().max().item<double>(), 0));
    out.push_back(identity("mixup_lambda1", (feature_mixup(own, other, 1.0) - other).abs().max().item<double>(), 0));
    auto mixed = feature_mixup(torch::zeros({2, 3, 3, 4}, f64()), torch::ones({2, 3, 3, 4}, f64()), 0.35);
    out.push_back(identity("mixup_lambda035_constant", (mixed - 0.35).abs().max().item<double>(), 0));
    auto sum = feature_mixup(own, other, 0.35) + feature_mixup(other, own, 0.35);
    out.push_back(identity("mixup_linearity", (sum - (own + other)).abs().max().item<double>(), 0));
  }

  // segmentation CE
  {
    auto labels = torch::randint(0, 4, {2, 3, 3}, gen, torch::kLong);
    auto uniform = torch::zeros({2, 3, 3, 4}, f64());
    out.push_back(identity("seg_uniform_c4", seg_loss(uniform, uniform, labels).item<double>(), std::log(4.0)));
    auto saturated = torch::one_hot(labels, 4).to(torch::kDouble) * 100.0;
    out.push_back(identity("seg_saturated", seg_loss(saturated, saturated, labels).item<double>(), 0));
    out.push_back(identity("aux_uniform_c4", aux_loss(uniform, uniform, labels).item<double>(), 2 * std::log(4.0)));
    out.push_back(identity("aux_saturated", aux_loss(saturated, saturated, labels).item<double>(), 0));
    auto logits = randn({2, 3, 3, 4});
    auto shift = randn({2, 3, 3, 1}) * 5.0;
    auto mix = randn({2, 3, 3, 4});
    out.push_back(identity("seg_shift_invariance",
                           (seg_loss(logits + shift, mix + shift, labels) - seg_loss(logits, mix, labels)).item<double>(), 0));
  }

  // orthogonality
  {
    auto inv = randn({2, 8, 8, 4}).abs() + 0.1;
    out.push_back(identity("orth_identical", orthogonality_loss(inv, inv).item<double>(), 64));
    out.push_back(identity("orth_opposite", orthogonality_loss(inv, -inv).item<double>(), -64));
    auto e0 = torch::zeros({2, 8, 8, 4}, f64()), e1 = torch::zeros({2, 8, 8, 4}, f64());
    e0.select(3, 0).fill_(1);
    e1.select(3, 1).fill_(1);
    out.push_back(identity("orth_orthogonal", orthogonality_loss(e0, e1).item<double>(), 0));
  }

  // pooling
  {
    auto map = torch::zeros({1, 2, 2, 2}, f64());
    map[0][0][0][0] = 1;
    map[0][0][1][1] = 1;
    map[0][1][0][0] = 1;
    map[0][1][1][1] = 1;
    auto p = pool_normalize(map);
    out.push_back(identity("pool_hand_2x2", p[0][0].item<double>(), std::sqrt(2.0) / 2));
    auto norms = pool_normalize(randn({3, 4, 4, 5})).norm(2, -1);
    out.push_back(identity("pool_unit_norm", (norms - 1).abs().max().item<double>(), 0));
  }

  // InfoNCE degenerate cases: every distance zero, 2(B-1) negatives of exp(0).
  for (std::int64_t b : {2, 3, 5}) {
    auto row = torch::nn::functional::normalize(randn({1, 4}), torch::nn::functional::NormalizeFuncOptions().dim(1));
    auto same = row.expand({b, 4}).contiguous();
    out.push_back(identity("con_degenerate_b" + std::to_string(b), contrastive_loss(same, same, 0.07).item<double>(),
                           std::log(2.0 * (b - 1))));
  }

  // KD
  {
    auto labels = torch::randint(0, 3, {2, 3, 3}, gen, torch::kLong);
    auto s = randn({2, 3, 3, 3}), t = randn({2, 3, 3, 3});
    out.push_back(identity("kd_alpha1_is_ce", (kd_loss(s, t, labels, 1.0) - cross_entropy(s, labels)).item<double>(), 0));
    out.push_back(identity("kd_identical_alpha0", kd_loss(s, s, labels, 0.0).item<double>(), 0));
  }

  // total loss additivity
  {
    LossReport zero;
    out.push_back(identity("total_zero", total_loss(zero, {}), 0));
    LossReport r;
    double v = 1;
    for (int m = 0; m < 2; ++m) {
      r.con[m] = v++;
      r.seg[m] = v++;
      r.orth[m] = v++;
      r.aux[m] = v++;
    }
    out.push_back(identity("total_one_to_eight", total_loss(r, {}), 36));
    out.push_back(identity("total_without_aux", total_loss(r, {true, true, false}), 36 - r.aux[0] - r.aux[1]));
  }

  // gradients: B=2, h=w=3, F/2=4, C=3
  {
    auto labels = torch::randint(0, 3, {2, 3, 3}, gen, torch::kLong);
    labels[0][1][1] = kDefaultIgnore;
    out.push_back(gradient("grad_seg_loss", gradient_check([&](const auto& x) { return seg_loss(x[0], x[1], labels); },
                                                           {randn({2, 3, 3, 3}), randn({2, 3, 3, 3})})));
    out.push_back(gradient("grad_orthogonality_loss",
                           gradient_check([](const auto& x) { return orthogonality_loss(x[0], x[1]); },
                                          {randn({2, 3, 3, 4}), randn({2, 3, 3, 4})})));
    out.push_back(gradient("grad_contrastive_loss_rgb_anchor", gradient_check(
                                                                   [](const auto& x) {
                                                                     return contrastive_loss(pool_normalize(x[0]),
                                                                                             pool_normalize(x[1]), 0.07);
                                                                   },
                                                                   {randn({2, 3, 3, 4}), randn({2, 3, 3, 4})})));
    out.push_back(gradient("grad_contrastive_loss_d_anchor", gradient_check(
                                                                 [](const auto& x) {
                                                                   return contrastive_loss(pool_normalize(x[1]),
                                                                                           pool_normalize(x[0]), 0.07);
                                                                 },
                                                                 {randn({2, 3, 3, 4}), randn({2, 3, 3, 4})})));
    out.push_back(gradient("grad_aux_loss", gradient_check([&](const auto& x) { return aux_loss(x[0], x[1], labels); },
                                                           {randn({2, 3, 3, 3}), randn({2, 3, 3, 3})})));
    // The teacher is detached, so only the student input carries a gradient.
    auto teacher = randn({2, 3, 3, 3});
    out.push_back(gradient("grad_kd_loss", gradient_check([&](const auto& x) { return kd_loss(x[0], teacher, labels, 0.5); },
                                                          {randn({2, 3, 3, 3})})));
  }
  return out;
}

}  // namespace crodino::losses
