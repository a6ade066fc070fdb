#include "crodino/baseline.hpp"

#include <cmath>
#include <limits>

#include "crodino/losses.hpp"

namespace crodino::baseline {

namespace {

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

torch::Tensor to_nchw(const torch::Tensor& x) { return x.permute({0, 3, 1, 2}); }

std::string net_prefix(const char* part, Modality m) { return std::string(part) + "_" + std::string(modality_name(m)); }

std::vector<std::pair<std::string, torch::nn::Module*>> net_groups(ModalityNet& net) {
  return {{net_prefix("enc", net->modality()), net->encoder.get()}, {net_prefix("dec", net->modality()), net->decoder.get()}};
}

std::vector<std::pair<std::string, torch::nn::Module*>> teacher_groups(FusionTeacher& t) {
  return {{"enc_rgb", t->enc_rgb.get()}, {"enc_d", t->enc_d.get()}, {"dec_fusion", t->decoder.get()}};
}

training::AdamW make_optimizer(const TrainConfig& cfg, const std::vector<std::pair<std::string, torch::nn::Module*>>& groups) {
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& [prefix, module] : groups)
    for (const auto& kv : module->named_parameters()) params.emplace_back(prefix + "/" + kv.key(), kv.value());
  return training::AdamW(std::move(params), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
}

training::Checkpoint pack(const std::string& kind, const TrainConfig& cfg, std::int64_t epoch, std::int64_t step,
                          const std::vector<std::pair<std::string, torch::nn::Module*>>& groups,
                          const training::AdamW* opt) {
  training::Checkpoint ck{kind, cfg, epoch, step, {}};
  for (const auto& [prefix, module] : groups) collect_tensors(*module, prefix, ck.tensors);
  if (opt) opt->save(ck.tensors);
  return ck;
}

void unpack(const training::Checkpoint& ck, const std::vector<std::pair<std::string, torch::nn::Module*>>& groups,
            training::AdamW* opt) {
  for (const auto& [prefix, module] : groups) restore_tensors(*module, prefix, ck.tensors);
  if (opt) opt->load(ck.tensors);
}

augment::AugmentedBatch shared_views(const TrainConfig& cfg, const augment::Batch& b, std::uint64_t seed) {
  return augment::augment_batch(b, seed, /*decoupled=*/false, augment::params_from(cfg));
}

const torch::Tensor& input_of(const augment::AugmentedBatch& v, Modality m) { return m == Modality::RGB ? v.rgb : v.depth; }
const torch::Tensor& labels_of(const augment::AugmentedBatch& v, Modality m) {
  return m == Modality::RGB ? v.rgb_labels : v.depth_labels;
}

// Trains one ModalityNet with `objective(logits, views) -> loss`.
training::TrainResult train_student(const TrainConfig& cfg, const std::string& kind,
                                    const std::vector<RGBDSample>& train_samples,
                                    const std::vector<RGBDSample>& eval_samples, Modality m,
                                    const std::function<torch::Tensor(const SegLogits&, const augment::AugmentedBatch&)>& objective,
                                    const training::RunOptions& opts, ModalityNet* out) {
  validate_config(cfg);
  torch::set_num_threads(static_cast<int>(cfg.threads));
  auto net = training::make_net(cfg, m);
  auto groups = net_groups(net);
  auto opt = make_optimizer(cfg, groups);
  std::int64_t epoch = 0, step = 0;
  if (opts.resume_from) {
    auto ck = training::load_checkpoint(*opts.resume_from);
    if (ck.kind != kind) throw DataError("cannot resume a '" + kind + "' run from a '" + ck.kind + "' checkpoint");
    unpack(ck, groups, &opt);
    epoch = ck.epoch;
    step = ck.step;
  }
  const auto& eval_set = eval_samples.empty() ? train_samples : eval_samples;
  const int idx = modality_index(m);

  training::EpochHooks hooks;
  hooks.step = [&](const augment::Batch& b, std::uint64_t seed, double lr) {
    auto views = shared_views(cfg, b, seed);
    net->train();
    opt.zero_grad();
    auto logits = predict(net, input_of(views, m));
    auto loss = objective(logits, views).to(torch::kDouble);
    LossReport r;
    r.seg[idx] = r.total = loss.item<double>();
    if (!std::isfinite(r.total)) throw std::runtime_error("non-finite loss term seg_" + std::string(modality_name(m)));
    loss.backward();
    opt.step(lr);
    return r;
  };
  hooks.evaluate = [&] {
    const double v = metrics::miou(training::evaluate(net, eval_set, cfg.batch_size, cfg.ignore_index)).mean;
    return m == Modality::RGB ? std::pair{v, kAbsent} : std::pair{kAbsent, v};
  };
  hooks.checkpoint = [&] { return pack(kind, cfg, epoch, step, groups, &opt); };
  auto result = training::run_epochs(cfg, epoch, step, train_samples, hooks, opts);
  if (out) *out = net;
  return result;
}

}  // namespace

FusionTeacherImpl::FusionTeacherImpl(const BackbonePreset& preset, std::int64_t num_classes)
    : preset_(preset), num_classes_(num_classes) {
  enc_rgb = register_module("enc_rgb", make_encoder(preset, 3));
  enc_d = register_module("enc_d", make_encoder(preset, 1));
  auto fused = preset;
  fused.skip_channels *= 2;
  decoder = register_module("dec", make_decoder(fused, 2 * preset.features, num_classes, true));
}

FusionTeacher make_teacher(const TrainConfig& cfg) {
  torch::manual_seed(derive_seed(cfg.seed, "init_teacher"));
  return FusionTeacher(backbone_preset(cfg.backbone), cfg.num_classes);
}

SegLogits teacher_forward(FusionTeacher& t, const torch::Tensor& x_rgb, const torch::Tensor& x_d) {
  if (!x_rgb.defined() || !x_d.defined()) throw ShapeError("the fusion teacher requires both RGB and depth inputs");
  if (x_rgb.dim() != 4 || x_d.dim() != 4 || x_rgb.size(3) != 3 || x_d.size(3) != 1)
    throw ShapeError("teacher expects B x H x W x 3 RGB and B x H x W x 1 depth");
  if (x_rgb.size(0) != x_d.size(0) || x_rgb.size(1) != x_d.size(1) || x_rgb.size(2) != x_d.size(2))
    throw ShapeError("teacher inputs are not paired: batch or spatial sizes differ");
  auto a = t->enc_rgb->forward(to_nchw(x_rgb));
  auto b = t->enc_d->forward(to_nchw(x_d));
  auto fused = torch::cat({a.features, b.features}, 1);
  torch::Tensor skip;
  if (a.skip.defined()) skip = torch::cat({a.skip, b.skip}, 1);
  return t->decoder->forward(fused, skip, {x_rgb.size(1), x_rgb.size(2)}).permute({0, 2, 3, 1});
}

metrics::ConfusionMatrix evaluate_teacher(FusionTeacher& t, const std::vector<RGBDSample>& samples,
                                          std::int64_t batch_size, std::int64_t ignore_index) {
  metrics::ConfusionMatrix cm(t->num_classes(), ignore_index);
  const bool was_training = t->is_training();
  t->eval();
  torch::NoGradGuard guard;
  data::BatchStream stream(samples, batch_size, 0, 0, data::Split::Test, false);
  while (auto b = stream.next()) cm.accumulate(teacher_forward(t, b->rgb, b->depth).argmax(-1), b->labels);
  t->train(was_training);
  return cm;
}

training::Checkpoint teacher_checkpoint(FusionTeacher& t, const TrainConfig& cfg, std::int64_t epoch, std::int64_t step) {
  return pack("teacher", cfg, epoch, step, teacher_groups(t), nullptr);
}

FusionTeacher teacher_from_checkpoint(const training::Checkpoint& ck) {
  if (ck.kind != "teacher") throw DataError("checkpoint holds a '" + ck.kind + "' model, not a fusion teacher");
  auto t = make_teacher(ck.config);
  unpack(ck, teacher_groups(t), nullptr);
  return t;
}

bool has_net(const training::Checkpoint& ck, Modality m) {
  if (ck.kind == "teacher") return false;
  const auto prefix = net_prefix("enc", m) + "/";
  return std::any_of(ck.tensors.begin(), ck.tensors.end(), [&](const auto& kv) { return kv.first.rfind(prefix, 0) == 0; });
}

ModalityNet net_from_checkpoint(const training::Checkpoint& ck, Modality m) {
  if (!has_net(ck, m))
    throw DataError("checkpoint has no " + std::string(modality_name(m)) + " network");
  auto net = training::make_net(ck.config, m);
  unpack(ck, net_groups(net), nullptr);
  return net;
}

training::TrainResult train_teacher(const TrainConfig& cfg, const std::vector<RGBDSample>& train_samples,
                                    const std::vector<RGBDSample>& eval_samples, const training::RunOptions& opts,
                                    FusionTeacher* out) {
  validate_config(cfg);
  torch::set_num_threads(static_cast<int>(cfg.threads));
  auto teacher = make_teacher(cfg);
  auto groups = teacher_groups(teacher);
  auto opt = make_optimizer(cfg, groups);
  std::int64_t epoch = 0, step = 0;
  if (opts.resume_from) {
    auto ck = training::load_checkpoint(*opts.resume_from);
    if (ck.kind != "teacher") throw DataError("cannot resume teacher training from a '" + ck.kind + "' checkpoint");
    unpack(ck, groups, &opt);
    epoch = ck.epoch;
    step = ck.step;
  }
  const auto& eval_set = eval_samples.empty() ? train_samples : eval_samples;

  training::EpochHooks hooks;
  hooks.step = [&](const augment::Batch& b, std::uint64_t seed, double lr) {
    auto views = shared_views(cfg, b, seed);
    teacher->train();
    opt.zero_grad();
    auto logits = teacher_forward(teacher, views.rgb, views.depth);
    auto loss = losses::seg_loss(logits, logits, views.rgb_labels, cfg.ignore_index).to(torch::kDouble);
    LossReport r;
    r.seg[0] = r.total = loss.item<double>();
    if (!std::isfinite(r.total)) throw std::runtime_error("non-finite loss term seg_teacher");
    loss.backward();
    opt.step(lr);
    return r;
  };
  hooks.evaluate = [&] {
    return std::pair{metrics::miou(evaluate_teacher(teacher, eval_set, cfg.batch_size, cfg.ignore_index)).mean, kAbsent};
  };
  hooks.checkpoint = [&] { return pack("teacher", cfg, epoch, step, groups, &opt); };
  auto result = training::run_epochs(cfg, epoch, step, train_samples, hooks, opts);
  if (out) *out = teacher;
  return result;
}

training::TrainResult train_single_modality(const TrainConfig& cfg, const std::vector<RGBDSample>& train_samples,
                                            const std::vector<RGBDSample>& eval_samples, Modality m,
                                            const training::RunOptions& opts, ModalityNet* out) {
  auto objective = [&](const SegLogits& logits, const augment::AugmentedBatch& v) {
    return losses::seg_loss(logits, logits, labels_of(v, m), cfg.ignore_index);
  };
  return train_student(cfg, "single", train_samples, eval_samples, m, objective, opts, out);
}

training::TrainResult train_baseline_kd(const TrainConfig& cfg, FusionTeacher& teacher,
                                        const std::vector<RGBDSample>& train_samples,
                                        const std::vector<RGBDSample>& eval_samples, Modality m, double alpha,
                                        const training::RunOptions& opts, ModalityNet* out) {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("kd_alpha out of range");
  if (teacher->num_classes() != cfg.num_classes)
    throw ShapeError("teacher predicts " + std::to_string(teacher->num_classes()) + " classes, student config has " +
                     std::to_string(cfg.num_classes));
  if (teacher->preset().name != cfg.backbone)
    throw ShapeError("teacher backbone '" + teacher->preset().name + "' differs from student backbone '" + cfg.backbone + "'");
  for (auto& p : teacher->parameters()) p.set_requires_grad(false);
  teacher->eval();
  auto objective = [&](const SegLogits& logits, const augment::AugmentedBatch& v) {
    const auto& labels = labels_of(v, m);
    if (alpha == 1) return losses::kd_loss(logits, logits, labels, 1.0, cfg.ignore_index);
    torch::Tensor soft;
    {
      torch::NoGradGuard guard;
      soft = teacher_forward(teacher, v.rgb, v.depth);
    }
    return losses::kd_loss(logits, soft, labels, alpha, cfg.ignore_index);
  };
  return train_student(cfg, "kd", train_samples, eval_samples, m, objective, opts, out);
}

training::TrainResult train_baseline_kd(const TrainConfig& cfg, const std::filesystem::path& teacher_ckpt, Modality m,
                                        double alpha, const training::RunOptions& opts) {
  auto teacher = teacher_from_checkpoint(training::load_checkpoint(teacher_ckpt));
  auto train_samples = training::load_split(cfg.train_manifest, cfg, data::Split::Train);
  auto eval_samples = training::load_split(cfg.eval_manifest, cfg, data::Split::Test);
  return train_baseline_kd(cfg, teacher, train_samples, eval_samples, m, alpha, opts);
}

}  // namespace crodino::baseline
