#include <cmath>
#include <filesystem>
#include <fstream>

#include "testing.hpp"

#include "crodino/training.hpp"
#include "oracles.hpp"

using namespace crodino;
using namespace crodino::training;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

TrainConfig small_cfg() {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.warmup_epochs = 1;
  cfg.lr_target = 1e-3;
  cfg.batch_size = 4;
  cfg.seed = 42;
  return cfg;
}

const std::vector<RGBDSample>& samples() {
  static auto s = data::generate_synthetic(9, 8, 16, 16, 4);
  return s;
}

augment::Batch first_batch() { return data::collate(samples(), {0, 1, 2, 3}); }

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("crodino_test_training_" + name);
  fs::remove_all(p);
  return p;
}

void require_same(const LossReport& a, const LossReport& b, double tol = 0) {
  for (int m = 0; m < 2; ++m) {
    CHECK(std::abs(a.seg[m] - b.seg[m]) <= tol);
    CHECK(std::abs(a.orth[m] - b.orth[m]) <= tol);
    CHECK(std::abs(a.con[m] - b.con[m]) <= tol);
    CHECK(std::abs(a.aux[m] - b.aux[m]) <= tol);
  }
  CHECK(std::abs(a.total - b.total) <= tol);
}

}  // namespace

TEST_CASE("schedule matches its definition") {
  TrainConfig cfg;
  for (double e = 0; e <= 140; e += 0.5)
    CHECK(lr_at(e, cfg) == Approx(oracle::lr(e, 1e-8, 1e-4, 10, 140, 0.9)).epsilon(1e-12));
  CHECK(lr_at(140, cfg) == 0);
  CHECK_THROWS_AS(lr_at(141, cfg), std::out_of_range);
  CHECK_THROWS_AS(lr_at(-1, cfg), std::out_of_range);
  cfg.warmup_epochs = 0;
  CHECK(lr_at(0, cfg) == 1e-4);
}

TEST_CASE("AdamW first step moves each parameter by lr against its gradient sign") {
  auto p = torch::tensor({1.0, -2.0, 3.0}, torch::kFloat64).requires_grad_();
  auto q = torch::tensor({5.0}, torch::kFloat64).requires_grad_();
  AdamW opt({{"p", p}, {"q", q}}, 0.9, 0.999, 1e-12, 0.0);
  (p * torch::tensor({2.0, -1.0, 0.5}, torch::kFloat64)).sum().backward();
  opt.step(0.1);
  CHECK(p[0].item<double>() == Approx(0.9));
  CHECK(p[1].item<double>() == Approx(-1.9));
  CHECK(p[2].item<double>() == Approx(2.9));
  // q had no gradient: untouched.
  CHECK(q.item<double>() == 5.0);
  opt.zero_grad();
  CHECK_FALSE(p.grad().defined());
}

TEST_CASE("AdamW weight decay is decoupled from the moments") {
  auto p = torch::tensor({2.0}, torch::kFloat64).requires_grad_();
  AdamW opt({{"p", p}}, 0.9, 0.999, 1e-8, 0.5);
  p.mutable_grad() = torch::zeros({1}, torch::kFloat64);
  opt.step(0.1);
  CHECK(p.item<double>() == Approx(2.0 * (1 - 0.1 * 0.5)));
}

TEST_CASE("init depends on the seed and role only") {
  auto cfg = small_cfg();
  auto a = make_state(cfg), b = make_state(cfg);
  for (const auto& [name, t] : a.optimizer.params()) {
    auto it = std::find_if(b.optimizer.params().begin(), b.optimizer.params().end(),
                           [&](const auto& kv) { return kv.first == name; });
    REQUIRE(it != b.optimizer.params().end());
    CHECK(torch::equal(t, it->second));
  }
  cfg.seed = 43;
  auto c = make_state(cfg);
  CHECK_FALSE(torch::equal(a.optimizer.params()[0].second, c.optimizer.params()[0].second));
}

TEST_CASE("same seed gives identical losses step after step") {
  auto cfg = small_cfg();
  auto a = make_state(cfg), b = make_state(cfg);
  for (int i = 0; i < 3; ++i) {
    auto ra = train_step(a, first_batch());
    auto rb = train_step(b, first_batch());
    require_same(ra, rb);
    CHECK(ra.total == Approx(ra.terms_sum()).epsilon(1e-15));
  }
}

TEST_CASE("disabled terms report zero and the aux decoder is left untouched") {
  auto cfg = small_cfg();
  cfg.use_aux = false;
  cfg.use_orth = false;
  auto s = make_state(cfg);
  std::map<std::string, torch::Tensor> before;
  collect_tensors(*s.aux->decoder, "a", before);
  auto r = train_step(s, first_batch());
  CHECK(r.aux[0] == 0);
  CHECK(r.orth[1] == 0);
  CHECK(r.con[0] > 0);
  std::map<std::string, torch::Tensor> after;
  collect_tensors(*s.aux->decoder, "a", after);
  for (const auto& [k, v] : before) CHECK(torch::equal(v, after.at(k)));
}

TEST_CASE("a contrastive batch of one is rejected") {
  auto s = make_state(small_cfg());
  CHECK_THROWS_AS(train_step(s, data::collate(samples(), {0})), std::invalid_argument);
}

TEST_CASE("checkpoints restore the full training state") {
  auto cfg = small_cfg();
  auto s = make_state(cfg);
  train_step(s, first_batch());
  train_step(s, first_batch());
  const auto path = scratch("ck") / "state.pt";
  save_checkpoint(path, to_checkpoint(s));
  auto r = from_checkpoint(load_checkpoint(path));
  CHECK(r.step == s.step);
  CHECK(r.optimizer.steps() == 2);

  s.rgb->eval();
  r.rgb->eval();
  auto x = first_batch().rgb;
  CHECK(torch::equal(predict(s.rgb, x), predict(r.rgb, x)));
  // The next step agrees too, so optimizer moments came back.
  require_same(train_step(s, first_batch()), train_step(r, first_batch()));
}

TEST_CASE("resuming mid-run reproduces an uninterrupted run") {
  auto cfg = small_cfg();
  const auto dir = scratch("resume");
  auto full = make_state(cfg);
  auto straight = train(full, samples(), samples(), {});

  cfg.checkpoint_every = 2;
  auto part = make_state(cfg);
  RunOptions o;
  o.out_dir = dir;
  train(part, samples(), samples(), o);  // writes epoch 2 and 4 checkpoints
  auto resumed = from_checkpoint(load_checkpoint(dir / "checkpoint_epoch_0002.pt"));
  CHECK(resumed.epoch == 2);
  auto tail = train(resumed, samples(), samples(), {});
  REQUIRE(tail.rows.size() == 2);
  for (int i = 0; i < 2; ++i) {
    require_same(tail.rows[i].loss, straight.rows[i + 2].loss, 1e-12);
    CHECK(tail.rows[i].miou_rgb == straight.rows[i + 2].miou_rgb);
  }
}

TEST_CASE("epoch loop writes the CSV and checkpoints") {
  auto cfg = small_cfg();
  cfg.epochs = 2;
  const auto dir = scratch("csv");
  RunOptions o;
  o.out_dir = dir;
  int epochs_seen = 0;
  o.on_epoch = [&](const MetricsRow&) { ++epochs_seen; };
  auto s = make_state(cfg);
  auto res = train(s, samples(), {}, o);
  CHECK(epochs_seen == 2);
  REQUIRE(res.final_checkpoint);
  CHECK(fs::exists(*res.final_checkpoint));
  std::ifstream csv(dir / "metrics.csv");
  std::string header, line;
  std::getline(csv, header);
  CHECK(header == kMetricsHeader);
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "metrics.csv"), DataError);
}

TEST_CASE("kind mismatch and too-small training sets are errors") {
  Checkpoint ck{"teacher", small_cfg(), 0, 0, {}};
  CHECK_THROWS_AS(from_checkpoint(ck), DataError);
  auto cfg = small_cfg();
  cfg.batch_size = 16;
  auto s = make_state(cfg);
  CHECK_THROWS_AS(train(s, samples(), {}, {}), std::runtime_error);
}

TEST_CASE("lambda = 0 trains exactly like mixup off") {
  auto a = small_cfg(), b = small_cfg();
  a.mixup_lambda = 0;
  b.use_mixup = false;
  auto sa = make_state(a), sb = make_state(b);
  for (int i = 0; i < 4; ++i) require_same(train_step(sa, first_batch()), train_step(sb, first_batch()));
}
