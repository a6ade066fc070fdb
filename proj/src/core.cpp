#include "crodino/core.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>

namespace crodino {

std::string_view modality_name(Modality m) { return m == Modality::RGB ? "rgb" : "d"; }

Modality parse_modality(std::string_view name) {
  if (name == "rgb" || name == "RGB") return Modality::RGB;
  if (name == "d" || name == "D" || name == "depth") return Modality::Depth;
  throw ConfigError("unknown modality '" + std::string(name) + "' (expected rgb or d)");
}

void validate_sample(const RGBDSample& s, std::int64_t num_classes, std::int64_t ignore_index) {
  if (s.rgb.dim() != 3 || s.rgb.size(2) != 3) throw DataError("rgb must be H x W x 3");
  if (s.depth.dim() != 3 || s.depth.size(2) != 1) throw DataError("depth must be H x W x 1");
  if (s.labels.dim() != 2) throw DataError("labels must be H x W");
  const auto h = s.labels.size(0), w = s.labels.size(1);
  if (s.rgb.size(0) != h || s.rgb.size(1) != w || s.depth.size(0) != h || s.depth.size(1) != w)
    throw DataError("rgb, depth and labels must share spatial dims");
  auto valid = (s.labels >= 0).logical_and(s.labels < num_classes).logical_or(s.labels == ignore_index);
  if (!valid.all().item<bool>()) throw DataError("label value outside {0..C-1} and not ignore");
}

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_bool(std::string_view key, std::string_view v) {
  std::string s = trim(v);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(std::string(key) + ": expected a boolean, got '" + std::string(v) + "'");
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  auto s = trim(v);
  const char* first = s.data();
  const char* last = s.data() + s.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(first, last, out, std::chars_format::general);
  } else {
    r = std::from_chars(first, last, out);
  }
  if (r.ec != std::errc() || r.ptr != last || s.empty())
    throw ConfigError(std::string(key) + ": cannot parse '" + std::string(v) + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, std::string_view)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field field(std::string key, T TrainConfig::*member) {
  Field f;
  f.key = key;
  f.set = [key, member](TrainConfig& c, std::string_view v) {
    if constexpr (std::is_same_v<T, bool>) {
      c.*member = parse_bool(key, v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      c.*member = trim(v);
    } else {
      c.*member = parse_number<T>(key, v);
    }
  };
  f.get = [member](const TrainConfig& c) -> std::string {
    if constexpr (std::is_same_v<T, bool>) {
      return (c.*member) ? "true" : "false";
    } else if constexpr (std::is_same_v<T, std::string>) {
      return c.*member;
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(c.*member);
    } else {
      return std::to_string(c.*member);
    }
  };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("num_classes", &TrainConfig::num_classes),
      field("epochs", &TrainConfig::epochs),
      field("batch_size", &TrainConfig::batch_size),
      field("lr_start", &TrainConfig::lr_start),
      field("lr_target", &TrainConfig::lr_target),
      field("warmup_epochs", &TrainConfig::warmup_epochs),
      field("poly_power", &TrainConfig::poly_power),
      field("tau", &TrainConfig::tau),
      field("mixup_lambda", &TrainConfig::mixup_lambda),
      field("use_orth", &TrainConfig::use_orth),
      field("use_con", &TrainConfig::use_con),
      field("use_aux", &TrainConfig::use_aux),
      field("use_mixup", &TrainConfig::use_mixup),
      field("use_decoupled_aug", &TrainConfig::use_decoupled_aug),
      field("seed", &TrainConfig::seed),
      field("backbone", &TrainConfig::backbone),
      field("ignore_index", &TrainConfig::ignore_index),
      field("weight_decay", &TrainConfig::weight_decay),
      field("beta1", &TrainConfig::beta1),
      field("beta2", &TrainConfig::beta2),
      field("adam_eps", &TrainConfig::adam_eps),
      field("aug.enabled", &TrainConfig::augment),
      field("aug.scale_min", &TrainConfig::scale_min),
      field("aug.scale_max", &TrainConfig::scale_max),
      field("aug.jitter", &TrainConfig::jitter),
      field("aug.decoupled", &TrainConfig::use_decoupled_aug),
      field("image_height", &TrainConfig::image_height),
      field("image_width", &TrainConfig::image_width),
      field("train_manifest", &TrainConfig::train_manifest),
      field("eval_manifest", &TrainConfig::eval_manifest),
      field("depth_norm", &TrainConfig::depth_norm),
      field("infonce_include_positive", &TrainConfig::infonce_include_positive),
      field("kd_alpha", &TrainConfig::kd_alpha),
      field("kd_modality", &TrainConfig::kd_modality),
      field("teacher_checkpoint", &TrainConfig::teacher_checkpoint),
      field("checkpoint_every", &TrainConfig::checkpoint_every),
      field("threads", &TrainConfig::threads),
  };
  return table;
}

const Field& find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

const TrainConfig& validate_config(const TrainConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (cfg.epochs < 1) throw ConfigError("epochs must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(cfg.lr_start >= 0) || !(cfg.lr_target > 0)) throw ConfigError("learning rates must be non-negative");
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs > cfg.epochs)
    throw ConfigError("warmup_epochs must lie in [0, epochs]");
  if (!(cfg.poly_power > 0)) throw ConfigError("poly_power must be positive");
  if (!(cfg.tau > 0)) throw ConfigError("temperature must be positive");
  if (!(cfg.mixup_lambda >= 0 && cfg.mixup_lambda <= 1)) throw ConfigError("mixup_lambda out of range");
  if (cfg.backbone != "tiny" && cfg.backbone != "resnet50-dilated")
    throw ConfigError("unknown backbone '" + cfg.backbone + "'");
  if (cfg.ignore_index >= 0 && cfg.ignore_index < cfg.num_classes)
    throw ConfigError("ignore_index collides with a class id");
  if (!(cfg.weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1) || !(cfg.beta2 >= 0 && cfg.beta2 < 1))
    throw ConfigError("adam betas must lie in [0,1)");
  if (!(cfg.adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (!(cfg.scale_min > 0 && cfg.scale_min <= cfg.scale_max)) throw ConfigError("aug scale range is empty");
  if (!(cfg.jitter >= 0 && cfg.jitter < 1)) throw ConfigError("aug.jitter out of range");
  if (cfg.image_height < 0 || cfg.image_width < 0) throw ConfigError("image size must be non-negative");
  if (cfg.depth_norm != "divisor" && cfg.depth_norm != "image_minmax" && cfg.depth_norm != "dataset_minmax")
    throw ConfigError("unknown depth_norm '" + cfg.depth_norm + "'");
  if (!(cfg.kd_alpha >= 0 && cfg.kd_alpha <= 1)) throw ConfigError("kd_alpha out of range");
  parse_modality(cfg.kd_modality);
  if (cfg.checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  if (cfg.threads < 1) throw ConfigError("threads must be positive");
  return cfg;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value) {
  find_field(trim(key)).set(cfg, value);
}

std::string get_config_value(const TrainConfig& cfg, std::string_view key) {
  return find_field(key).get(cfg);
}

TrainConfig parse_config(std::istream& in, TrainConfig base) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto body = trim(line);
    if (body.empty()) continue;
    auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set_config_value(base, trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

std::string format_config(const TrainConfig& cfg) {
  std::ostringstream os;
  // aug.decoupled aliases use_decoupled_aug; write it once.
  for (const auto& f : fields()) {
    if (f.key == "aug.decoupled") continue;
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

void apply_override(TrainConfig& cfg, std::string_view assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  set_config_value(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

double LossReport::terms_sum() const {
  double s = 0;
  for (int m = 0; m < 2; ++m) s += con[m] + seg[m] + orth[m] + aux[m];
  return s;
}

LossReport& LossReport::operator+=(const LossReport& o) {
  for (int m = 0; m < 2; ++m) {
    seg[m] += o.seg[m];
    orth[m] += o.orth[m];
    con[m] += o.con[m];
    aux[m] += o.aux[m];
  }
  total += o.total;
  return *this;
}

LossReport LossReport::scaled(double f) const {
  LossReport r = *this;
  for (int m = 0; m < 2; ++m) {
    r.seg[m] *= f;
    r.orth[m] *= f;
    r.con[m] *= f;
    r.aux[m] *= f;
  }
  r.total *= f;
  return r;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(master);
  for (unsigned char c : tag) h = mix(h ^ c);
  return mix(h ^ mix(index));
}

}  // namespace crodino
