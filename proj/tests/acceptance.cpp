// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Expected values come from closed forms and the oracles in
// oracles.hpp, never from the library under test.
//
//   acceptance [--work DIR] [--crodino PATH] [--only 1,2,...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crodino/baseline.hpp"
#include "crodino/losses.hpp"
#include "crodino/metrics.hpp"
#include "crodino/training.hpp"
#include "oracles.hpp"

using namespace crodino;
namespace fs = std::filesystem;
namespace L = crodino::losses;

namespace {

// Tolerances and budgets, pinned.
constexpr double kIdentityTol = 1e-6;
constexpr double kIdentitySeconds = 10;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60;
constexpr double kInfoNceTol = 1e-6;
constexpr double kMiouTol = 1e-9;
constexpr double kOverfitMiou = 0.90;
constexpr double kOverfitSeconds = 15 * 60;
constexpr int kOverfitMaxEpochs = 200;
constexpr double kTrajectoryTol = 1e-6;
constexpr double kDeterminismTol = 1e-6;
constexpr double kNonInferiorityMargin = 0.02;

struct Outcome {
  bool passed;
  std::string detail;
};

struct Env {
  fs::path work;
  std::string crodino;
};

class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && first_failure_.empty()) first_failure_ = what;
    ok_ = ok_ && ok;
  }
  void near(double got, double want, double tol, const std::string& what) {
    const double err = std::abs(got - want);
    worst_ = std::max(worst_, err);
    std::ostringstream os;
    os << what << ": got " << got << " want " << want;
    expect(err <= tol, os.str());
  }
  bool ok() const { return ok_; }
  double worst() const { return worst_; }
  std::string summary(const std::string& pass_text) const { return ok_ ? pass_text : first_failure_; }

 private:
  bool ok_ = true;
  double worst_ = 0;
  std::string first_failure_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

torch::Tensor f64(std::initializer_list<std::int64_t> shape) { return torch::randn(shape, torch::kFloat64); }

// -- 1 ------------------------------------------------------------------------

Outcome loss_identities(const Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(101);
  Checks c;

  auto own = f64({2, 3, 3, 4}), oth = f64({2, 3, 3, 4});
  c.expect(torch::equal(L::feature_mixup(own, oth, 0.0), own), "mixup lambda=0 returns own");
  c.expect(torch::equal(L::feature_mixup(own, oth, 1.0), oth), "mixup lambda=1 returns other");
  auto k = torch::full({1, 1, 1, 4}, 3.0, torch::kFloat64);
  c.near(L::feature_mixup(k, k, 0.35).sub(k).abs().max().item<double>(), 0, kIdentityTol, "mixup of equal inputs");

  auto y = torch::randint(4, {2, 5, 5}, torch::kInt64);
  for (int classes : {2, 4, 7}) {
    auto yc = torch::randint(classes, {2, 5, 5}, torch::kInt64);
    c.near(L::cross_entropy(torch::zeros({2, 5, 5, classes}, torch::kFloat64), yc).item<double>(), std::log(classes),
           kIdentityTol, "uniform CE = ln C");
  }
  auto confident = torch::nn::functional::one_hot(y, 4).to(torch::kFloat64) * 200;
  c.near(L::cross_entropy(confident, y).item<double>(), 0, kIdentityTol, "saturated CE = 0");
  c.near(L::aux_loss(torch::zeros({2, 5, 5, 4}, torch::kFloat64), torch::zeros({2, 5, 5, 4}, torch::kFloat64), y).item<double>(), 2 * std::log(4.0),
         kIdentityTol, "uniform aux = 2 ln C");

  const std::int64_t h = 4, w = 5;
  auto v = torch::rand({3, h, w, 6}, torch::kFloat64) + 0.1;
  c.near(L::orthogonality_loss(v, v).item<double>(), h * w, kIdentityTol, "orthogonality identical = h*w");
  c.near(L::orthogonality_loss(v, -v).item<double>(), -(h * w), kIdentityTol, "orthogonality opposite = -h*w");
  auto e1 = torch::zeros({3, h, w, 6}, torch::kFloat64), e2 = torch::zeros({3, h, w, 6}, torch::kFloat64);
  e1.select(3, 0).fill_(1.7);
  e2.select(3, 1).fill_(-0.4);
  c.near(L::orthogonality_loss(e1, e2).item<double>(), 0, kIdentityTol, "orthogonality orthogonal = 0");

  for (std::int64_t b : {2, 3, 6}) {
    auto same = torch::ones({b, 5}, torch::kFloat64) / std::sqrt(5.0);
    // All 2(B-1) negatives sit at distance 0 like the positive.
    c.near(L::contrastive_loss(same, same, 0.07).item<double>(), std::log(2.0 * (b - 1)), kIdentityTol,
           "degenerate InfoNCE = ln 2(B-1)");
  }

  LossReport r;
  double expected = 0;
  for (int m = 0; m < 2; ++m) {
    r.seg[m] = 0.25 + m;
    r.orth[m] = 3.5 - m;
    r.con[m] = 1.125 * (m + 1);
    r.aux[m] = 0.75;
    expected += r.seg[m] + r.orth[m] + r.con[m] + r.aux[m];
  }
  c.near(L::total_loss(r, {}), expected, kIdentityTol, "total is the sum of the eight terms");
  c.near(L::total_loss(r, {false, false, false}), r.seg[0] + r.seg[1], kIdentityTol, "total with extras off");

  // The reported total of a real step is its terms' sum.
  TrainConfig cfg;
  cfg.batch_size = 2;
  auto st = training::make_state(cfg);
  auto samples = data::generate_synthetic(3, 2, 16, 16, 4);
  auto rep = training::train_step(st, data::collate(samples, {0, 1}));
  double sum = 0;
  for (int m = 0; m < 2; ++m) sum += rep.seg[m] + rep.orth[m] + rep.con[m] + rep.aux[m];
  c.near(rep.total, sum, kIdentityTol, "training total equals the term sum");

  const double secs = seconds_since(t0);
  c.expect(secs < kIdentitySeconds, "runtime " + fmt(secs) + " s");
  return {c.ok(), c.summary("worst abs error " + fmt(c.worst(), 3) + ", " + fmt(secs, 3) + " s")};
}

// -- 2 ------------------------------------------------------------------------

// Central differences computed here, element by element.
double fd_relative_error(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                         std::vector<torch::Tensor> inputs) {
  for (auto& t : inputs) t = t.detach().to(torch::kFloat64).clone().requires_grad_();
  auto out = f(inputs);
  auto grads = torch::autograd::grad({out}, inputs, {}, false, false, true);
  double diff2 = 0, ana2 = 0, num2 = 0;
  const double eps = 1e-6;
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto flat = inputs[i].view(-1);
    auto g = grads[i].defined() ? grads[i].reshape(-1) : torch::zeros_like(flat);
    for (std::int64_t j = 0; j < flat.numel(); ++j) {
      const double orig = flat[j].item<double>();
      flat[j] = orig + eps;
      const double up = f(inputs).item<double>();
      flat[j] = orig - eps;
      const double down = f(inputs).item<double>();
      flat[j] = orig;
      const double num = (up - down) / (2 * eps);
      const double ana = g[j].item<double>();
      diff2 += (num - ana) * (num - ana);
      ana2 += ana * ana;
      num2 += num * num;
    }
  }
  return std::sqrt(diff2) / std::max({std::sqrt(ana2), std::sqrt(num2), 1e-12});
}

Outcome gradient_checks(const Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(202);
  const std::int64_t b = 2, h = 3, w = 3, half = 4, classes = 3;
  auto y = torch::randint(classes, {b, h, w}, torch::kInt64);
  y[1][2][0] = kDefaultIgnore;
  Checks c;
  std::ostringstream detail;
  auto record = [&](const std::string& name, double err) {
    detail << name << ' ' << fmt(err, 2) << ' ';
    c.expect(err < kGradTol, name + " relative error " + fmt(err, 3));
  };
  record("seg", fd_relative_error([&](const auto& in) { return L::seg_loss(in[0], in[1], y); },
                                  {f64({b, h, w, classes}), f64({b, h, w, classes})}));
  record("orth", fd_relative_error([&](const auto& in) { return L::orthogonality_loss(in[0], in[1]); },
                                   {f64({b, h, w, half}), f64({b, h, w, half})}));
  record("con", fd_relative_error(
                    [&](const auto& in) {
                      return L::contrastive_loss(L::pool_normalize(in[0]), L::pool_normalize(in[1]), 0.5);
                    },
                    {f64({b, h, w, half}), f64({b, h, w, half})}));
  record("aux", fd_relative_error([&](const auto& in) { return L::aux_loss(in[0], in[1], y); },
                                  {f64({b, h, w, classes}), f64({b, h, w, classes})}));
  auto teacher = f64({b, h, w, classes});
  record("kd", fd_relative_error([&](const auto& in) { return L::kd_loss(in[0], teacher, y, 0.5); },
                                 {f64({b, h, w, classes})}));
  const double secs = seconds_since(t0);
  c.expect(secs < kGradSeconds, "runtime " + fmt(secs) + " s");
  return {c.ok(), c.summary(detail.str() + "(" + fmt(secs, 3) + " s)")};
}

// -- 3 ------------------------------------------------------------------------

Outcome infonce_oracle(const Env&) {
  std::mt19937 rng(303);
  torch::manual_seed(303);
  Checks c;
  for (int i = 0; i < 100; ++i) {
    const std::int64_t b = std::uniform_int_distribution<int>(2, 4)(rng);
    const std::int64_t d = std::uniform_int_distribution<int>(2, 16)(rng);
    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    // Half the instances go through pooling, half are raw rows.
    torch::Tensor a, o;
    if (i % 2 == 0) {
      a = L::pool_normalize(f64({b, 3, 3, d}));
      o = L::pool_normalize(f64({b, 3, 3, d}));
    } else {
      a = f64({b, d});
      o = f64({b, d});
    }
    const bool canonical = i % 5 == 0;
    c.near(L::contrastive_loss(a, o, tau, canonical).item<double>(),
           oracle::infonce(oracle::to_mat(a), oracle::to_mat(o), tau, canonical), kInfoNceTol,
           "instance " + std::to_string(i));
  }
  return {c.ok(), c.summary("100 instances, worst abs error " + fmt(c.worst(), 3))};
}

// -- 4 ------------------------------------------------------------------------

Outcome miou_oracle(const Env&) {
  std::mt19937 rng(404);
  Checks c;
  for (int i = 0; i < 100; ++i) {
    const int classes = std::uniform_int_distribution<int>(2, 5)(rng);
    const int h = std::uniform_int_distribution<int>(1, 16)(rng), w = std::uniform_int_distribution<int>(1, 16)(rng);
    std::vector<int> pred(h * w), gt(h * w);
    for (int p = 0; p < h * w; ++p) {
      pred[p] = std::uniform_int_distribution<int>(0, classes - 1)(rng);
      gt[p] = std::bernoulli_distribution(0.15)(rng) ? 255 : std::uniform_int_distribution<int>(0, classes - 1)(rng);
    }
    gt[0] = pred[0];  // at least one counted pixel
    metrics::ConfusionMatrix cm(classes);
    cm.accumulate(torch::tensor(std::vector<std::int64_t>(pred.begin(), pred.end())).view({h, w}),
                  torch::tensor(std::vector<std::int64_t>(gt.begin(), gt.end())).view({h, w}));
    c.near(metrics::miou(cm).mean, oracle::miou(pred, gt, classes, 255), kMiouTol, "case " + std::to_string(i));
  }
  const double worst = c.worst();
  const double hand = metrics::miou(metrics::ConfusionMatrix::from_counts({{3, 1}, {2, 4}})).mean;
  c.near(hand, (3.0 / 6.0 + 4.0 / 7.0) / 2.0, kMiouTol, "hand case");
  c.expect(std::abs(hand - 0.5357) < 5e-5, "hand case vs 0.5357");
  return {c.ok(), c.summary("100 cases, worst abs error " + fmt(worst, 3) + "; hand case " + fmt(hand, 6))};
}

// -- 5 ------------------------------------------------------------------------

Outcome lr_schedule(const Env&) {
  TrainConfig cfg;  // 140 epochs, warmup 10, 1e-8 -> 1e-4, power 0.9
  Checks c;
  c.near(training::lr_at(0, cfg), 1e-8, 1e-20, "lr(0)");
  c.near(training::lr_at(10, cfg), 1e-4, 1e-18, "lr(10)");
  c.near(training::lr_at(140, cfg), 0, 0, "lr(140)");
  double prev = training::lr_at(10, cfg);
  bool decreasing = true;
  for (int i = 1; i <= 13000; ++i) {
    const double e = 10 + i * 0.01;
    const double v = training::lr_at(e, cfg);
    decreasing = decreasing && v < prev;
    prev = v;
  }
  c.expect(decreasing, "not strictly decreasing on (10, 140]");
  double worst_gap = 0;
  for (double delta : {1e-3, 1e-6, 1e-9}) {
    const double left = training::lr_at(10 - delta, cfg), right = training::lr_at(10 + delta, cfg);
    worst_gap = std::max(worst_gap, std::abs(left - right));
    c.expect(std::abs(left - right) <= 1e-4 * delta * 10, "jump at 10 for delta " + fmt(delta));
  }
  for (double e : {0.0, 3.3, 9.99, 10.0, 57.0, 139.5})
    c.near(training::lr_at(e, cfg), oracle::lr(e, 1e-8, 1e-4, 10, 140, 0.9), 1e-18, "formula at " + fmt(e));
  return {c.ok(), c.summary("endpoints exact, strictly decreasing, gap at 10 <= " + fmt(worst_gap, 2))};
}

// -- 6 ------------------------------------------------------------------------

// The one set of training settings used by the overfit run and by the
// ablation harness. Every loss term is active.
TrainConfig overfit_config() {
  TrainConfig cfg;
  cfg.epochs = 150;
  cfg.warmup_epochs = 5;
  cfg.lr_target = 2e-3;
  cfg.batch_size = 8;
  cfg.seed = 7;
  return cfg;
}

Outcome overfit(const Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = overfit_config();
  auto samples = data::generate_synthetic(606, 32, 64, 64, 4);
  auto st = training::make_state(cfg);
  auto res = training::train(st, samples, samples, {});
  const auto& last = res.rows.back();
  const double secs = seconds_since(t0);
  Checks c;
  c.expect(cfg.epochs <= kOverfitMaxEpochs, "too many epochs");
  c.expect(cfg.use_orth && cfg.use_con && cfg.use_aux && cfg.use_mixup && cfg.use_decoupled_aug, "not full training");
  c.expect(last.miou_rgb >= kOverfitMiou, "rgb train mIoU " + fmt(last.miou_rgb));
  c.expect(last.miou_d >= kOverfitMiou, "depth train mIoU " + fmt(last.miou_d));
  c.expect(secs < kOverfitSeconds, "runtime " + fmt(secs) + " s");
  return {c.ok(), c.summary(std::to_string(cfg.epochs) + " epochs, train mIoU rgb " + fmt(last.miou_rgb) + " d " +
                            fmt(last.miou_d) + ", " + fmt(secs, 3) + " s")};
}

// -- 7 ------------------------------------------------------------------------

std::vector<LossReport> trajectory(TrainConfig cfg, const std::vector<RGBDSample>& samples) {
  std::vector<LossReport> out;
  auto st = training::make_state(cfg);
  training::RunOptions o;
  o.on_step = [&](const LossReport& r) { out.push_back(r); };
  training::train(st, samples, samples, o);
  return out;
}

double gap(double a, double b) { return std::abs(a - b); }

Outcome reductions(const Env&) {
  auto samples = data::generate_synthetic(707, 16, 32, 32, 4);
  TrainConfig base;
  base.epochs = 3;
  base.warmup_epochs = 1;
  base.lr_target = 2e-3;
  base.batch_size = 4;
  base.seed = 70;
  base.threads = 1;
  Checks c;

  auto lam0 = base;
  lam0.mixup_lambda = 0;
  auto nomix = base;
  nomix.use_mixup = false;
  auto a = trajectory(lam0, samples), b = trajectory(nomix, samples);
  c.expect(a.size() == b.size() && a.size() == 12, "trajectory length");
  double worst_a = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    for (int m = 0; m < 2; ++m)
      for (auto [x, y] : {std::pair{a[i].seg[m], b[i].seg[m]}, {a[i].orth[m], b[i].orth[m]},
                          {a[i].con[m], b[i].con[m]}, {a[i].aux[m], b[i].aux[m]}})
        worst_a = std::max(worst_a, gap(x, y));
    worst_a = std::max(worst_a, gap(a[i].total, b[i].total));
  }
  c.expect(worst_a <= kTrajectoryTol, "lambda=0 vs mixup off gap " + fmt(worst_a, 3));

  auto off = base;
  off.use_orth = off.use_con = off.use_aux = off.use_mixup = off.use_decoupled_aug = false;
  auto joint = trajectory(off, samples);
  double worst_b = 0;
  for (auto m : {Modality::RGB, Modality::Depth}) {
    std::vector<double> single;
    training::RunOptions o;
    o.on_step = [&](const LossReport& r) { single.push_back(r.seg[modality_index(m)]); };
    baseline::train_single_modality(off, samples, samples, m, o);
    c.expect(single.size() == joint.size(), "single-modality trajectory length");
    for (std::size_t i = 0; i < std::min(single.size(), joint.size()); ++i)
      worst_b = std::max(worst_b, gap(joint[i].seg[modality_index(m)], single[i]));
  }
  c.expect(worst_b <= kTrajectoryTol, "all-off vs single-modality gap " + fmt(worst_b, 3));
  return {c.ok(), c.summary("(a) worst abs gap " + fmt(worst_a, 3) + " over " + std::to_string(a.size()) +
                            " steps; (b) " + fmt(worst_b, 3) + " over " + std::to_string(joint.size()) + " steps x 2")};
}

// -- 8 ------------------------------------------------------------------------

Outcome determinism(const Env& env) {
  auto samples = data::generate_synthetic(808, 8, 32, 32, 4);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.seed = 80;
  cfg.threads = 1;
  torch::set_num_threads(1);
  auto run = [&] {
    auto st = training::make_state(cfg);
    std::vector<LossReport> out;
    for (int i = 0; i < 5; ++i) out.push_back(training::train_step(st, data::collate(samples, {0, 1, 2, 3})));
    return std::pair{std::move(out), std::move(st)};
  };
  auto [ra, sa] = run();
  auto [rb, sb] = run();
  Checks c;
  double worst = 0;
  for (int i = 0; i < 5; ++i) {
    for (int m = 0; m < 2; ++m)
      for (auto [x, y] : {std::pair{ra[i].seg[m], rb[i].seg[m]}, {ra[i].orth[m], rb[i].orth[m]},
                          {ra[i].con[m], rb[i].con[m]}, {ra[i].aux[m], rb[i].aux[m]}})
        worst = std::max(worst, std::abs(x - y));
    worst = std::max(worst, std::abs(ra[i].total - rb[i].total));
  }
  c.expect(worst <= kDeterminismTol, "repeat gap " + fmt(worst, 3));

  const auto path = env.work / "determinism" / "state.pt";
  training::save_checkpoint(path, training::to_checkpoint(sa));
  auto back = training::from_checkpoint(training::load_checkpoint(path));
  auto x = data::collate(samples, {4, 5, 6, 7});
  bool identical = true;
  for (auto m : {Modality::RGB, Modality::Depth}) {
    sa.net(m)->eval();
    back.net(m)->eval();
    torch::NoGradGuard ng;
    const auto& in = m == Modality::RGB ? x.rgb : x.depth;
    identical = identical && torch::equal(predict(sa.net(m), in), predict(back.net(m), in));
  }
  c.expect(identical, "eval logits differ after checkpoint round trip");
  return {c.ok(), c.summary("5 steps, max gap " + fmt(worst, 3) + "; restored eval logits bit-identical")};
}

// -- 9 ------------------------------------------------------------------------

TrainConfig heldout_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.warmup_epochs = 2;
  cfg.lr_target = 2e-3;
  cfg.batch_size = 8;
  cfg.seed = seed;
  return cfg;
}

Outcome non_inferiority(const Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  auto all = data::generate_synthetic(909, 250, 32, 32, 4);
  std::vector<RGBDSample> train(all.begin(), all.begin() + 200), test(all.begin() + 200, all.end());
  double joint_sum = 0, single_sum = 0, canon_sum = 0;
  std::ostringstream per_seed;
  auto joint_depth = [&](const TrainConfig& cfg) {
    auto st = training::make_state(cfg);
    training::train(st, train, test, {});
    return metrics::miou(training::evaluate(st.depth, test, cfg.batch_size, cfg.ignore_index)).mean;
  };
  for (std::uint64_t seed : {1, 2, 3}) {
    auto cfg = heldout_config(seed);
    const double joint = joint_depth(cfg);
    // Reported only: the same run with the positive pair in the InfoNCE denominator.
    auto canon = cfg;
    canon.infonce_include_positive = true;
    canon_sum += joint_depth(canon);
    ModalityNet net{nullptr};
    baseline::train_single_modality(cfg, train, test, Modality::Depth, {}, &net);
    const double single = metrics::miou(training::evaluate(net, test, cfg.batch_size, cfg.ignore_index)).mean;
    joint_sum += joint;
    single_sum += single;
    per_seed << " s" << seed << " " << fmt(joint, 3) << "/" << fmt(single, 3);
  }
  const double joint = joint_sum / 3, single = single_sum / 3;
  const bool ok = joint >= single - kNonInferiorityMargin;
  return {ok, "depth test mIoU joint " + fmt(joint) + " vs single " + fmt(single) + " (delta " + fmt(joint - single, 3) +
                  ";" + per_seed.str() + "; not gated: with positive in denominator " + fmt(canon_sum / 3, 3) + ", " +
                  fmt(seconds_since(t0), 3) + " s)"};
}

// -- 10 ------------------------------------------------------------------------

int shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

Outcome ablations(const Env& env) {
  Checks c;
  if (env.crodino.empty() || !fs::exists(env.crodino)) return {false, "crodino executable not found (--crodino)"};
  const auto root = env.work / "ablations";
  fs::remove_all(root);
  const auto data_dir = root / "data";
  c.expect(shell(quote(env.crodino) + " gen-synthetic --seed 10 --n 16 --test 8 --size 32 --out " + quote(data_dir) +
                 " > /dev/null") == 0,
           "gen-synthetic failed");

  const std::vector<std::pair<std::string, std::string>> rows = {
      {"original", ""},
      {"no_orth", "--set use_orth=false"},
      {"no_con", "--set use_con=false"},
      {"no_aux", "--set use_aux=false"},
      {"no_mixup", "--set use_mixup=false"},
      {"no_dec_aug", "--set aug.decoupled=false"},
  };
  const std::string common = " --set epochs=2 --set warmup_epochs=1 --set batch_size=4 --set train_manifest=" +
                             quote(data_dir / "train.jsonl") + " --set eval_manifest=" + quote(data_dir / "test.jsonl");
  std::string header;
  for (const auto& [name, flags] : rows) {
    const auto out = root / name;
    const int rc = shell(quote(env.crodino) + " train --out " + quote(out) + " " + flags + common + " > /dev/null 2>&1");
    c.expect(rc == 0, name + " exited " + std::to_string(rc));
    std::ifstream csv(out / "metrics.csv");
    std::string h, line;
    std::vector<std::string> lines;
    std::getline(csv, h);
    while (std::getline(csv, line)) lines.push_back(line);
    c.expect(lines.size() == 2, name + ": expected 2 metric rows");
    if (header.empty()) header = h;
    c.expect(!h.empty() && h == header, name + ": CSV header differs");
    if (lines.empty()) continue;
    // The column of a disabled term holds zero.
    std::vector<std::string> cols;
    std::stringstream ss(lines.back());
    for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
    c.expect(cols.size() == 13, name + ": expected 13 columns");
    if (cols.size() != 13) continue;
    auto val = [&](int i) { return std::stod(cols[i]); };
    if (name == "no_orth") c.expect(val(4) == 0 && val(5) == 0, "no_orth: orth columns not zero");
    if (name == "no_con") c.expect(val(6) == 0 && val(7) == 0, "no_con: con columns not zero");
    if (name == "no_aux") c.expect(val(8) == 0 && val(9) == 0, "no_aux: aux columns not zero");
    if (name == "original") c.expect(val(4) != 0 && val(6) != 0 && val(8) != 0, "original: a term column is zero");
    c.expect(std::isfinite(val(11)) && std::isfinite(val(12)), name + ": missing mIoU");
  }
  return {c.ok(), c.summary("6 configurations trained via CLI, CSVs share one schema")};
}

}  // namespace

int main(int argc, char** argv) {
  Env env{fs::temp_directory_path() / "crodino_acceptance", ""};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      env.work = argv[++i];
    } else if (a == "--crodino" && i + 1 < argc) {
      env.crodino = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string n; std::getline(ss, n, ',');) only.insert(std::stoi(n));
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--crodino PATH] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(env.work);
  torch::set_num_threads(1);

  const std::vector<std::pair<std::string, std::function<Outcome(const Env&)>>> criteria = {
      {"loss identities", loss_identities},
      {"gradient checks", gradient_checks},
      {"InfoNCE oracle", infonce_oracle},
      {"mIoU oracle", miou_oracle},
      {"LR schedule", lr_schedule},
      {"overfit", overfit},
      {"reduction equivalences", reductions},
      {"determinism and persistence", determinism},
      {"non-inferiority", non_inferiority},
      {"ablation harness", ablations},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(env);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
