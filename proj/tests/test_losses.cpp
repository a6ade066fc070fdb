#include <cmath>

#include "testing.hpp"

#include "crodino/losses.hpp"
#include "oracles.hpp"

using namespace crodino;
using namespace crodino::losses;
using Catch::Approx;

namespace {

torch::Tensor labels_with_ignore(std::int64_t b, std::int64_t h, std::int64_t w, std::int64_t c) {
  auto y = torch::randint(c, {b, h, w}, torch::kInt64);
  y[0][0][0] = kDefaultIgnore;
  return y;
}

}  // namespace

TEST_CASE("cross entropy matches the per-pixel oracle") {
  torch::manual_seed(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto logits = torch::randn({2, 4, 5, 3}, torch::kFloat64) * 3;
    auto y = labels_with_ignore(2, 4, 5, 3);
    CHECK(cross_entropy(logits, y).item<double>() == Approx(oracle::cross_entropy(logits, y, kDefaultIgnore)).epsilon(1e-12));
  }
}

TEST_CASE("seg loss averages plain and mixed CE, and reduces without mixup") {
  torch::manual_seed(2);
  auto s = torch::randn({2, 3, 3, 4}, torch::kFloat64);
  auto m = torch::randn({2, 3, 3, 4}, torch::kFloat64);
  auto y = labels_with_ignore(2, 3, 3, 4);
  const double expected = 0.5 * (oracle::cross_entropy(s, y, 255) + oracle::cross_entropy(m, y, 255));
  CHECK(seg_loss(s, m, y).item<double>() == Approx(expected).epsilon(1e-12));
  CHECK(seg_loss(s, s, y).item<double>() == Approx(oracle::cross_entropy(s, y, 255)).epsilon(1e-12));
}

TEST_CASE("all-ignored label maps are an error") {
  auto logits = torch::zeros({1, 2, 2, 3});
  auto y = torch::full({1, 2, 2}, kDefaultIgnore, torch::kInt64);
  CHECK_THROWS_AS(cross_entropy(logits, y), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(torch::zeros({1, 2, 3, 3}), torch::zeros({1, 2, 2}, torch::kInt64)), ShapeError);
}

TEST_CASE("orthogonality matches the cosine oracle, zero vectors are guarded") {
  torch::manual_seed(3);
  auto a = torch::randn({3, 4, 4, 6}, torch::kFloat64);
  auto b = torch::randn({3, 4, 4, 6}, torch::kFloat64);
  CHECK(orthogonality_loss(a, b).item<double>() == Approx(oracle::orthogonality(a, b)).epsilon(1e-12));

  auto z = torch::zeros({1, 2, 2, 4}, torch::kFloat64).requires_grad_();
  auto loss = orthogonality_loss(z, z);
  loss.backward();
  CHECK(loss.item<double>() == 0);
  CHECK(torch::isfinite(z.grad()).all().item<bool>());
  CHECK_THROWS_AS(orthogonality_loss(a, b.narrow(3, 0, 5)), ShapeError);
}

TEST_CASE("mixup weights the other modality by lambda") {
  auto own = torch::full({1, 1, 1, 2}, 2.0);
  auto oth = torch::full({1, 1, 1, 2}, 10.0);
  CHECK(feature_mixup(own, oth, 0.25).flatten()[0].item<double>() == Approx(4.0));
  CHECK_THROWS_AS(feature_mixup(own, oth, -0.1), std::invalid_argument);
}

TEST_CASE("contrastive loss matches the brute-force oracle, both denominators") {
  torch::manual_seed(4);
  for (int b = 2; b <= 5; ++b) {
    auto a = pool_normalize(torch::randn({b, 3, 3, 4}, torch::kFloat64));
    auto o = pool_normalize(torch::randn({b, 3, 3, 4}, torch::kFloat64));
    for (double tau : {0.07, 0.5}) {
      CHECK(contrastive_loss(a, o, tau).item<double>() ==
            Approx(oracle::infonce(oracle::to_mat(a), oracle::to_mat(o), tau)).epsilon(1e-10));
      CHECK(contrastive_loss(a, o, tau, true).item<double>() ==
            Approx(oracle::infonce(oracle::to_mat(a), oracle::to_mat(o), tau, true)).epsilon(1e-10));
    }
  }
}

TEST_CASE("contrastive gradient is finite when the positive pair coincides") {
  auto a = pool_normalize(torch::randn({3, 2, 2, 4}, torch::kFloat64)).detach().requires_grad_();
  auto loss = contrastive_loss(a, a.detach().clone(), 0.07);
  loss.backward();
  CHECK(torch::isfinite(a.grad()).all().item<bool>());
}

TEST_CASE("contrastive loss input checks") {
  auto a = torch::randn({1, 4});
  CHECK_THROWS_AS(contrastive_loss(a, a, 0.07), std::invalid_argument);
  auto b = torch::randn({3, 4});
  CHECK_THROWS_AS(contrastive_loss(b, b, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(contrastive_loss(b, torch::randn({3, 5}), 0.07), ShapeError);
}

TEST_CASE("pooling matches the oracle") {
  auto x = torch::randn({2, 3, 4, 5}, torch::kFloat64);
  auto got = oracle::to_mat(pool_normalize(x));
  auto want = oracle::pool_normalize(x);
  for (std::size_t i = 0; i < got.size(); ++i)
    for (std::size_t k = 0; k < got[i].size(); ++k) CHECK(got[i][k] == Approx(want[i][k]).epsilon(1e-12));
}

TEST_CASE("kd loss blends CE and KL, teacher gets no gradient") {
  torch::manual_seed(5);
  auto s = torch::randn({2, 3, 3, 4}, torch::kFloat64).requires_grad_();
  auto t = torch::randn({2, 3, 3, 4}, torch::kFloat64).requires_grad_();
  auto y = labels_with_ignore(2, 3, 3, 4);
  const double ce = oracle::cross_entropy(s.detach(), y, 255);
  const double kl = oracle::kl(s.detach(), t.detach(), y, 255);
  auto loss = kd_loss(s, t, y, 0.3);
  CHECK(loss.item<double>() == Approx(0.3 * ce + 0.7 * kl).epsilon(1e-12));
  loss.backward();
  CHECK_FALSE(t.grad().defined());
  CHECK(kd_loss(s, t, y, 0.0).item<double>() == Approx(kl).epsilon(1e-12));
  CHECK_THROWS_AS(kd_loss(s, t, y, 1.2), std::invalid_argument);
}

TEST_CASE("total respects the toggles") {
  LossReport r;
  r.seg[0] = 1;
  r.seg[1] = 2;
  r.orth[0] = 4;
  r.orth[1] = 8;
  r.con[0] = 16;
  r.con[1] = 32;
  r.aux[0] = 64;
  r.aux[1] = 128;
  CHECK(total_loss(r, {}) == 255);
  CHECK(total_loss(r, {false, false, false}) == 3);
  CHECK(total_loss(r, {true, false, true}) == 207);
}

TEST_CASE("the built-in verification suite passes") {
  for (const auto& c : run_loss_checks()) {
    INFO(c.name << " value " << c.value << " expected " << c.expected);
    CHECK(c.passed);
  }
}

TEST_CASE("gradient check detects a wrong gradient") {
  // A custom function whose backward is deliberately off by a factor of 2.
  auto x = torch::randn({4}, torch::kFloat64);
  auto bad = [](const std::vector<torch::Tensor>& in) {
    auto v = in[0];
    return (v.pow(2) + (v.detach() * v - v.detach() * v.detach())).sum();
  };
  auto good = [](const std::vector<torch::Tensor>& in) { return in[0].pow(3).sum(); };
  CHECK(gradient_check(good, {x}) < 1e-6);
  CHECK(gradient_check(bad, {x}) > 0.1);
}
