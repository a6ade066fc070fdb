#include "crodino/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crodino/baseline.hpp"
#include "crodino/data.hpp"
#include "crodino/losses.hpp"
#include "crodino/training.hpp"

namespace crodino::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::string resume;
};

void add_common(CLI::App* cmd, Common& c, bool with_resume = true) {
  cmd->add_option("--config", c.config_path, "key = value config file");
  cmd->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("--out", c.out_dir, "directory for checkpoints, CSV and reports");
  if (with_resume) cmd->add_option("--resume", c.resume, "checkpoint to resume from");
}

TrainConfig resolve_config(const Common& c) {
  TrainConfig cfg = c.config_path.empty() ? TrainConfig{} : load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  return validate_config(cfg);
}

training::RunOptions run_options(const Common& c, const TrainConfig& cfg) {
  training::RunOptions opts;
  opts.out_dir = fs::path(c.out_dir);
  if (!c.resume.empty()) opts.resume_from = fs::path(c.resume);
  opts.log = true;
  fs::create_directories(c.out_dir);
  std::ofstream(fs::path(c.out_dir) / "config.cfg") << format_config(cfg);
  return opts;
}

void print_miou(std::ostream& out, const std::string& branch, const metrics::MiouResult& r, nlohmann::json& report) {
  out << "branch " << branch << '\n' << std::left << std::setw(8) << "class" << "IoU\n";
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    out << std::left << std::setw(8) << k;
    if (r.per_class[k]) {
      out << std::fixed << std::setprecision(4) << *r.per_class[k] << '\n';
      per_class.push_back(*r.per_class[k]);
    } else {
      out << "n/a\n";
      per_class.push_back(nullptr);
    }
  }
  out << std::left << std::setw(8) << "mIoU" << std::fixed << std::setprecision(4) << r.mean << '\n';
  out.unsetf(std::ios::floatfield);
  report[branch] = {{"miou", r.mean}, {"per_class_iou", per_class}};
}

int do_eval(const Common& c, const std::string& checkpoint, std::string manifest, std::ostream& out) {
  auto ck = training::load_checkpoint(checkpoint);
  TrainConfig cfg = c.config_path.empty() ? ck.config : load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  validate_config(cfg);
  if (manifest.empty()) manifest = cfg.eval_manifest.empty() ? cfg.train_manifest : cfg.eval_manifest;
  if (manifest.empty()) throw ConfigError("no manifest to evaluate: pass --manifest or set eval_manifest");
  torch::set_num_threads(static_cast<int>(cfg.threads));
  auto samples = training::load_split(manifest, cfg, data::Split::Test);

  nlohmann::json report = {{"checkpoint", checkpoint}, {"manifest", manifest}, {"kind", ck.kind}};
  if (ck.kind == "teacher") {
    auto t = baseline::teacher_from_checkpoint(ck);
    print_miou(out, "teacher", metrics::miou(baseline::evaluate_teacher(t, samples, cfg.batch_size, cfg.ignore_index)),
               report);
  } else {
    for (auto m : {Modality::RGB, Modality::Depth}) {
      if (!baseline::has_net(ck, m)) continue;
      auto net = baseline::net_from_checkpoint(ck, m);
      print_miou(out, std::string(modality_name(m)),
                 metrics::miou(training::evaluate(net, samples, cfg.batch_size, cfg.ignore_index)), report);
    }
  }
  fs::create_directories(c.out_dir);
  std::ofstream(fs::path(c.out_dir) / "eval_report.json") << report.dump(2) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal distillation for RGBD segmentation", "crodino"};
  app.require_subcommand(1);

  Common train_c, teacher_c, single_c, kd_c, eval_c;
  auto* train = app.add_subcommand("train", "joint RGB + depth training");
  add_common(train, train_c);

  auto* teacher = app.add_subcommand("train-teacher", "train the RGBD fusion teacher");
  add_common(teacher, teacher_c);

  std::string single_modality = "rgb";
  auto* single = app.add_subcommand("train-single", "train one single-modality network with CE only");
  add_common(single, single_c);
  single->add_option("--modality", single_modality, "rgb or d");

  std::string kd_teacher, kd_modality;
  std::optional<double> kd_alpha;
  auto* kd = app.add_subcommand("train-kd-baseline", "distil a frozen fusion teacher into one modality");
  add_common(kd, kd_c);
  kd->add_option("--teacher", kd_teacher, "teacher checkpoint (default: teacher_checkpoint key)");
  kd->add_option("--modality", kd_modality, "student modality (default: kd_modality key)");
  kd->add_option("--alpha", kd_alpha, "CE weight; 0 = KDv1, 0.5 = KDv2 (default: kd_alpha key)");

  std::string eval_ckpt, eval_manifest;
  auto* eval = app.add_subcommand("eval", "per-class IoU and mIoU of a checkpoint");
  add_common(eval, eval_c, false);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--manifest", eval_manifest, "manifest to evaluate on (default: eval_manifest)");

  auto* losscheck = app.add_subcommand("losscheck", "run the loss identity and gradient suite");

  std::uint64_t gen_seed = 0;
  std::int64_t gen_n = 32, gen_test = 0, gen_classes = 4, gen_size = 64;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic RGBD dataset and manifests");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--n", gen_n, "training images");
  gen->add_option("--test", gen_test, "additional held-out images");
  gen->add_option("--classes", gen_classes);
  gen->add_option("--size", gen_size, "image side length");
  gen->add_option("--out", gen_out);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*train) {
      auto cfg = resolve_config(train_c);
      auto r = training::train(cfg, run_options(train_c, cfg));
      out << "trained " << r.rows.size() << " epochs; metrics in " << (fs::path(train_c.out_dir) / "metrics.csv").string()
          << '\n';
    } else if (*teacher) {
      auto cfg = resolve_config(teacher_c);
      auto tr = training::load_split(cfg.train_manifest, cfg, data::Split::Train);
      auto ev = training::load_split(cfg.eval_manifest, cfg, data::Split::Test);
      baseline::train_teacher(cfg, tr, ev, run_options(teacher_c, cfg));
    } else if (*single) {
      auto cfg = resolve_config(single_c);
      auto tr = training::load_split(cfg.train_manifest, cfg, data::Split::Train);
      auto ev = training::load_split(cfg.eval_manifest, cfg, data::Split::Test);
      baseline::train_single_modality(cfg, tr, ev, parse_modality(single_modality), run_options(single_c, cfg));
    } else if (*kd) {
      auto cfg = resolve_config(kd_c);
      const auto teacher_path = kd_teacher.empty() ? cfg.teacher_checkpoint : kd_teacher;
      if (teacher_path.empty()) throw ConfigError("no teacher checkpoint: pass --teacher or set teacher_checkpoint");
      const auto m = parse_modality(kd_modality.empty() ? cfg.kd_modality : kd_modality);
      const double alpha = kd_alpha.value_or(cfg.kd_alpha);
      if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("kd_alpha out of range");
      baseline::train_baseline_kd(cfg, teacher_path, m, alpha, run_options(kd_c, cfg));
    } else if (*eval) {
      return do_eval(eval_c, eval_ckpt, eval_manifest, out);
    } else if (*losscheck) {
      bool ok = true;
      for (const auto& r : losses::run_loss_checks()) {
        out << r.name << ' ' << std::setprecision(10) << r.value << ' ' << r.expected << ' '
            << (r.passed ? "PASS" : "FAIL") << '\n';
        ok = ok && r.passed;
      }
      if (!ok) {
        err << "losscheck: at least one check failed\n";
        return kRuntime;
      }
    } else if (*gen) {
      if (gen_n < 0 || gen_test < 0 || gen_classes < 2 || gen_size < augment::kMinImageSide || gen_classes > 255)
        throw ConfigError("gen-synthetic: need n, test >= 0, 2 <= classes <= 255, size >= 8");
      auto all = data::generate_synthetic(gen_seed, gen_n + gen_test, gen_size, gen_size, gen_classes);
      std::vector<RGBDSample> tr(all.begin(), all.begin() + gen_n), te(all.begin() + gen_n, all.end());
      auto path = data::write_dataset(gen_out, "train", tr, gen_classes);
      out << "wrote " << path.string() << '\n';
      if (gen_test > 0) out << "wrote " << data::write_dataset(gen_out, "test", te, gen_classes).string() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}

}  // namespace crodino::cli
