#include "crodino/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <torch/csrc/jit/serialization/pickle.h>

#include "crodino/losses.hpp"

namespace crodino::training {

namespace fs = std::filesystem;

double lr_at(double epoch, const TrainConfig& cfg) {
  if (!(epoch >= 0 && epoch <= static_cast<double>(cfg.epochs)))
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  const auto warmup = static_cast<double>(cfg.warmup_epochs);
  if (epoch < warmup) return cfg.lr_start + (cfg.lr_target - cfg.lr_start) * epoch / warmup;
  if (cfg.epochs == cfg.warmup_epochs) return cfg.lr_target;
  const double progress = (epoch - warmup) / (static_cast<double>(cfg.epochs) - warmup);
  return cfg.lr_target * std::pow(1.0 - progress, cfg.poly_power);
}

// -- AdamW ------------------------------------------------------------------------

AdamW::AdamW(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& [name, p] : params_) {
    exp_avg_.push_back(torch::zeros_like(p));
    exp_avg_sq_.push_back(torch::zeros_like(p));
    param_steps_.push_back(0);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.mutable_grad() = torch::Tensor();
}

void AdamW::step(double lr) {
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    const auto& g = p.grad();
    if (!g.defined()) continue;
    const auto t = ++param_steps_[i];
    p.mul_(1.0 - lr * weight_decay_);
    exp_avg_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    exp_avg_sq_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    auto denom = (exp_avg_sq_[i].sqrt() / std::sqrt(bc2)).add_(eps_);
    p.addcdiv_(exp_avg_[i], denom, -lr / bc1);
  }
  ++steps_;
}

void AdamW::save(std::map<std::string, torch::Tensor>& out) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out["optim/exp_avg/" + params_[i].first] = exp_avg_[i].clone();
    out["optim/exp_avg_sq/" + params_[i].first] = exp_avg_sq_[i].clone();
    out["optim/step/" + params_[i].first] = torch::tensor(param_steps_[i], torch::kLong);
  }
  out["optim/steps"] = torch::tensor(steps_, torch::kLong);
}

void AdamW::load(const std::map<std::string, torch::Tensor>& in) {
  auto get = [&](const std::string& key) -> const torch::Tensor& {
    auto it = in.find(key);
    if (it == in.end()) throw DataError("checkpoint is missing optimizer entry '" + key + "'");
    return it->second;
  };
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    exp_avg_[i].copy_(get("optim/exp_avg/" + params_[i].first));
    exp_avg_sq_[i].copy_(get("optim/exp_avg_sq/" + params_[i].first));
    param_steps_[i] = get("optim/step/" + params_[i].first).item<std::int64_t>();
  }
  steps_ = get("optim/steps").item<std::int64_t>();
}

// -- checkpoints --------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  c10::Dict<std::string, torch::Tensor> dict;
  for (const auto& [k, v] : ck.tensors) dict.insert(k, v.contiguous());
  auto tuple = c10::ivalue::Tuple::create(
      {c10::IValue(ck.kind), c10::IValue(format_config(ck.config)), c10::IValue(ck.epoch), c10::IValue(ck.step),
       c10::IValue(dict)});
  const auto bytes = torch::jit::pickle_save(c10::IValue(tuple));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  try {
    auto tuple = torch::jit::pickle_load(bytes).toTuple();
    const auto& el = tuple->elements();
    ck.kind = el.at(0).toStringRef();
    std::istringstream cfg_text(el.at(1).toStringRef());
    ck.config = parse_config(cfg_text);
    ck.epoch = el.at(2).toInt();
    ck.step = el.at(3).toInt();
    for (const auto& kv : el.at(4).toGenericDict()) ck.tensors[kv.key().toStringRef()] = kv.value().toTensor();
  } catch (const c10::Error& e) {
    throw DataError("'" + path.string() + "' is not a valid checkpoint: " + e.what_without_backtrace());
  }
  return ck;
}

// -- state ---------------------------------------------------------------------------

ModalityNet make_net(const TrainConfig& cfg, Modality m) {
  torch::manual_seed(derive_seed(cfg.seed, std::string("init_net_") + std::string(modality_name(m))));
  return ModalityNet(m, backbone_preset(cfg.backbone), cfg.num_classes);
}

AuxDecoder make_aux(const TrainConfig& cfg) {
  torch::manual_seed(derive_seed(cfg.seed, "init_aux"));
  return AuxDecoder(backbone_preset(cfg.backbone), cfg.num_classes);
}

std::vector<std::pair<std::string, torch::nn::Module*>> TrainState::groups() {
  return {{"enc_rgb", rgb->encoder.get()},
          {"dec_rgb", rgb->decoder.get()},
          {"enc_d", depth->encoder.get()},
          {"dec_d", depth->decoder.get()},
          {"dec_aux", aux->decoder.get()}};
}

namespace {

std::vector<std::pair<std::string, torch::Tensor>> named_params(
    const std::vector<std::pair<std::string, torch::nn::Module*>>& groups) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& [prefix, module] : groups)
    for (const auto& kv : module->named_parameters()) out.emplace_back(prefix + "/" + kv.key(), kv.value());
  return out;
}

}  // namespace

TrainState make_state(const TrainConfig& cfg) {
  validate_config(cfg);
  TrainState s;
  s.cfg = cfg;
  s.rgb = make_net(cfg, Modality::RGB);
  s.depth = make_net(cfg, Modality::Depth);
  s.aux = make_aux(cfg);
  s.optimizer = AdamW(named_params(s.groups()), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  return s;
}

Checkpoint to_checkpoint(TrainState& s) {
  Checkpoint ck{"crodino", s.cfg, s.epoch, s.step, {}};
  for (const auto& [prefix, module] : s.groups()) collect_tensors(*module, prefix, ck.tensors);
  s.optimizer.save(ck.tensors);
  return ck;
}

TrainState from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "crodino") throw DataError("checkpoint holds a '" + ck.kind + "' model, not a joint training state");
  auto s = make_state(ck.config);
  for (const auto& [prefix, module] : s.groups()) restore_tensors(*module, prefix, ck.tensors);
  s.optimizer.load(ck.tensors);
  s.epoch = ck.epoch;
  s.step = ck.step;
  return s;
}

std::uint64_t augment_seed(const TrainConfig& cfg, std::int64_t step) {
  return derive_seed(cfg.seed, "augment", static_cast<std::uint64_t>(step));
}

// -- losses and steps ------------------------------------------------------------------

LossReport compute_losses(TrainState& s, const augment::AugmentedBatch& v, bool backward) {
  namespace L = losses;
  const auto& cfg = s.cfg;
  if (cfg.use_con && v.rgb.size(0) < 2) throw std::invalid_argument("contrastive loss needs a batch of at least 2");

  const FeatureVolume z[2] = {encode(s.rgb, v.rgb), encode(s.depth, v.depth)};
  const torch::Tensor* labels[2] = {&v.rgb_labels, &v.depth_labels};
  const std::pair<std::int64_t, std::int64_t> hw[2] = {{v.rgb.size(1), v.rgb.size(2)}, {v.depth.size(1), v.depth.size(2)}};

  torch::Tensor pooled[2];
  if (cfg.use_con) {
    pooled[0] = L::pool_normalize(z[0].inv);
    pooled[1] = L::pool_normalize(z[1].inv);
  }

  struct Terms {
    torch::Tensor seg, orth, con, aux;
  } terms[2];
  for (int m = 0; m < 2; ++m) {
    auto& net = m == 0 ? s.rgb : s.depth;
    const auto& own = z[m];
    const auto& oth = z[1 - m];
    auto logits = decode_main(net, own.inv, own.spc, own.skip, hw[m]);
    // At lambda = 0 the mixed half is the plain half, so S~ is S as a function
    // of the parameters; one decode keeps the graph identical to mixup off.
    const bool mix = cfg.use_mixup && cfg.mixup_lambda > 0;
    auto logits_mix = mix ? decode_main(net, L::feature_mixup(own.inv, oth.inv, cfg.mixup_lambda), own.spc, own.skip, hw[m])
          : logits;
    terms[m].seg = L::seg_loss(logits, logits_mix, *labels[m], cfg.ignore_index);
    if (cfg.use_aux)
      terms[m].aux = L::aux_loss(decode_aux(s.aux, own.inv, hw[m]), decode_aux(s.aux, own.spc, hw[m]), *labels[m],
                                 cfg.ignore_index);
    if (cfg.use_orth) terms[m].orth = L::orthogonality_loss(own.inv, own.spc);
    if (cfg.use_con) terms[m].con = L::contrastive_loss(pooled[m], pooled[1 - m], cfg.tau, cfg.infonce_include_positive);
  }

  LossReport r;
  auto zero = torch::zeros({}, torch::kDouble);
  auto total = zero;
  for (int m = 0; m < 2; ++m) {
    const std::string suffix = m == 0 ? "_rgb" : "_d";
    auto as_double = [&](const torch::Tensor& t, const char* name, double& slot) {
      if (!t.defined()) return zero;
      auto d = t.to(torch::kDouble);
      slot = d.item<double>();
      if (!std::isfinite(slot)) throw std::runtime_error("non-finite loss term " + std::string(name) + suffix);
      return d;
    };
    auto con = as_double(terms[m].con, "con", r.con[m]);
    auto seg = as_double(terms[m].seg, "seg", r.seg[m]);
    auto orth = as_double(terms[m].orth, "orth", r.orth[m]);
    auto aux = as_double(terms[m].aux, "aux", r.aux[m]);
    total = total + (con + seg + orth + aux);
  }
  r.total = total.item<double>();
  if (backward) total.backward();
  return r;
}

namespace {

LossReport joint_step(TrainState& s, const augment::Batch& batch, std::uint64_t aug_seed, double lr) {
  auto views = augment::augment_batch(batch, aug_seed, s.cfg.use_decoupled_aug, augment::params_from(s.cfg));
  s.rgb->train();
  s.depth->train();
  s.aux->train();
  s.optimizer.zero_grad();
  auto report = compute_losses(s, views, /*backward=*/true);
  s.optimizer.step(lr);
  return report;
}

}  // namespace

LossReport train_step(TrainState& state, const augment::Batch& batch) {
  auto r = joint_step(state, batch, augment_seed(state.cfg, state.step), lr_at(static_cast<double>(state.epoch), state.cfg));
  ++state.step;
  return r;
}

metrics::ConfusionMatrix evaluate(ModalityNet& net, const std::vector<RGBDSample>& samples, std::int64_t batch_size,
                                  std::int64_t ignore_index) {
  metrics::ConfusionMatrix cm(net->num_classes(), ignore_index);
  const bool was_training = net->is_training();
  net->eval();
  torch::NoGradGuard guard;
  data::BatchStream stream(samples, batch_size, 0, 0, data::Split::Test, false);
  while (auto b = stream.next()) {
    auto x = net->modality() == Modality::RGB ? b->rgb : b->depth;
    cm.accumulate(predict(net, x).argmax(-1), b->labels);
  }
  net->train(was_training);
  return cm;
}

// -- epoch loop --------------------------------------------------------------------------

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os.precision(9);
  const auto& l = r.loss;
  os << r.epoch << ',' << r.lr << ',' << l.seg[0] << ',' << l.seg[1] << ',' << l.orth[0] << ',' << l.orth[1] << ','
     << l.con[0] << ',' << l.con[1] << ',' << l.aux[0] << ',' << l.aux[1] << ',' << l.total << ',' << r.miou_rgb << ','
     << r.miou_d;
  return os.str();
}

TrainResult run_epochs(const TrainConfig& cfg, std::int64_t& epoch, std::int64_t& step,
                       const std::vector<RGBDSample>& train_samples, const EpochHooks& hooks, const RunOptions& opts) {
  TrainResult result;
  std::ofstream csv;
  if (opts.out_dir) {
    fs::create_directories(*opts.out_dir);
    const auto path = *opts.out_dir / "metrics.csv";
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    csv.open(path, std::ios::app);
    if (!csv) throw DataError("cannot write '" + path.string() + "'");
    if (fresh) csv << kMetricsHeader << '\n';
  }

  for (; epoch < cfg.epochs;) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_at(static_cast<double>(epoch), cfg);
    data::BatchStream stream(train_samples, cfg.batch_size, cfg.seed, epoch, data::Split::Train, true);
    LossReport sum;
    std::int64_t batches = 0;
    while (auto batch = stream.next()) {
      auto r = hooks.step(*batch, augment_seed(cfg, step), lr);
      ++step;
      ++batches;
      sum += r;
      if (opts.on_step) opts.on_step(r);
    }
    if (batches == 0) throw std::runtime_error("training set holds fewer samples than one batch");
    const auto [miou_rgb, miou_d] = hooks.evaluate();
    MetricsRow row{epoch, lr, sum.scaled(1.0 / static_cast<double>(batches)), miou_rgb, miou_d,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
    ++epoch;

    if (csv.is_open()) csv << format_metrics_row(row) << std::endl;
    if (opts.log)
      std::cerr << "epoch " << row.epoch << " lr " << row.lr << " total " << row.loss.total << " miou_rgb " << row.miou_rgb
                << " miou_d " << row.miou_d << " (" << row.seconds << " s)\n";
    if (opts.on_epoch) opts.on_epoch(row);
    result.rows.push_back(row);

    const bool last = epoch == cfg.epochs;
    if (opts.out_dir && (epoch % cfg.checkpoint_every == 0 || last)) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%04lld.pt", static_cast<long long>(epoch));
      auto ck = hooks.checkpoint();
      save_checkpoint(*opts.out_dir / name, ck);
      if (last) {
        save_checkpoint(*opts.out_dir / "final.pt", ck);
        result.final_checkpoint = *opts.out_dir / "final.pt";
      }
    }
  }
  return result;
}

TrainResult train(TrainState& s, const std::vector<RGBDSample>& train_samples, const std::vector<RGBDSample>& eval_samples,
                  const RunOptions& opts) {
  validate_config(s.cfg);
  torch::set_num_threads(static_cast<int>(s.cfg.threads));
  const auto& eval_set = eval_samples.empty() ? train_samples : eval_samples;
  EpochHooks hooks;
  hooks.step = [&](const augment::Batch& b, std::uint64_t seed, double lr) { return joint_step(s, b, seed, lr); };
  hooks.evaluate = [&] {
    return std::pair{metrics::miou(evaluate(s.rgb, eval_set, s.cfg.batch_size, s.cfg.ignore_index)).mean,
                     metrics::miou(evaluate(s.depth, eval_set, s.cfg.batch_size, s.cfg.ignore_index)).mean};
  };
  hooks.checkpoint = [&] { return to_checkpoint(s); };
  return run_epochs(s.cfg, s.epoch, s.step, train_samples, hooks, opts);
}

std::vector<RGBDSample> load_split(const std::string& manifest, const TrainConfig& cfg, data::Split split) {
  if (manifest.empty()) return {};
  auto m = data::load_manifest(manifest, split);
  if (m.num_classes != cfg.num_classes)
    throw ConfigError("manifest '" + manifest + "' declares " + std::to_string(m.num_classes) +
                      " classes but num_classes = " + std::to_string(cfg.num_classes));
  return data::load_samples(m, cfg.depth_norm, cfg.ignore_index);
}

TrainResult train(const TrainConfig& cfg, const RunOptions& opts) {
  validate_config(cfg);
  if (cfg.train_manifest.empty()) throw ConfigError("train_manifest is not set");
  auto train_samples = load_split(cfg.train_manifest, cfg, data::Split::Train);
  auto eval_samples = load_split(cfg.eval_manifest, cfg, data::Split::Test);
  TrainState state;
  if (opts.resume_from) {
    state = from_checkpoint(load_checkpoint(*opts.resume_from));
    state.cfg = cfg;
  } else {
    state = make_state(cfg);
  }
  return train(state, train_samples, eval_samples, opts);
}

}  // namespace crodino::training
