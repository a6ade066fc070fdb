#include "crodino/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace crodino::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::array<float, 3> hsv(float h, float s, float v) {
  const float i = std::floor(h * 6), f = h * 6 - i;
  const float p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

std::vector<ClassAppearance> class_palette(std::int64_t num_classes) {
  std::vector<ClassAppearance> pal(num_classes);
  pal[0] = {{0.50f, 0.40f, 0.30f}, 0.15f};
  pal[1] = {{0.58f, 0.40f, 0.30f}, 0.85f};
  for (std::int64_t k = 2; k < num_classes; ++k) {
    const float hue = 0.3f + 0.6f * static_cast<float>(k - 2) / static_cast<float>(std::max<std::int64_t>(1, num_classes - 2));
    pal[k].color = hsv(hue, 0.8f, 0.8f);
    pal[k].depth = 0.30f + 0.40f * static_cast<float>(k - 2) / static_cast<float>(std::max<std::int64_t>(1, num_classes - 2));
  }
  if (num_classes >= 4) {
    pal[2].depth = 0.50f;
    pal[3].depth = 0.54f;
  }
  return pal;
}

std::vector<RGBDSample> generate_synthetic(std::uint64_t seed, std::int64_t n, std::int64_t height, std::int64_t width,
                                           std::int64_t num_classes) {
  if (num_classes < 2) throw std::invalid_argument("synthetic scenes need at least two classes");
  const auto pal = class_palette(num_classes);
  std::vector<RGBDSample> out;
  out.reserve(n);
  for (std::int64_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, "synthetic", static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::normal_distribution<float> color_noise(0.0f, kColorNoise), depth_noise(0.0f, kDepthNoise);

    std::vector<std::array<float, 2>> sites(num_classes);
    for (auto& s : sites) s = {unit(rng) * height, unit(rng) * width};
    std::vector<std::int64_t> cls(num_classes);
    std::iota(cls.begin(), cls.end(), 0);
    std::shuffle(cls.begin(), cls.end(), rng);
    const float tilt_y = (unit(rng) * 2 - 1) * kDepthTilt, tilt_x = (unit(rng) * 2 - 1) * kDepthTilt;

    auto rgb = torch::empty({height, width, 3}, torch::kFloat);
    auto depth = torch::empty({height, width, 1}, torch::kFloat);
    auto labels = torch::empty({height, width}, torch::kLong);
    auto r = rgb.accessor<float, 3>();
    auto d = depth.accessor<float, 3>();
    auto l = labels.accessor<std::int64_t, 2>();
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        std::int64_t best = 0;
        float best_d = std::numeric_limits<float>::max();
        for (std::int64_t s = 0; s < num_classes; ++s) {
          const float dy = y + 0.5f - sites[s][0], dx = x + 0.5f - sites[s][1];
          if (const float dist = dy * dy + dx * dx; dist < best_d) {
            best_d = dist;
            best = s;
          }
        }
        const auto k = cls[best];
        l[y][x] = k;
        for (int c = 0; c < 3; ++c) r[y][x][c] = std::clamp(pal[k].color[c] + color_noise(rng), 0.0f, 1.0f);
        const float plane = pal[k].depth + tilt_y * ((y + 0.5f) / height - 0.5f) + tilt_x * ((x + 0.5f) / width - 0.5f);
        d[y][x][0] = std::clamp(plane + depth_noise(rng), 0.0f, 1.0f);
      }
    }
    out.push_back({rgb, depth, labels});
  }
  return out;
}

// -- netpbm -------------------------------------------------------------------

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

void write_header(std::ofstream& out, const char* magic, std::int64_t w, std::int64_t h, int maxval) {
  out << magic << '\n' << w << ' ' << h << '\n' << maxval << '\n';
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace

torch::Tensor read_netpbm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  const auto magic = next_token(in);
  if (magic != "P5" && magic != "P6") throw DataError("'" + path.string() + "' is not a binary PGM/PPM file");
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(next_token(in));
    h = std::stoll(next_token(in));
    maxval = std::stoll(next_token(in));
  } catch (const std::exception&) {
    throw DataError("'" + path.string() + "' has a malformed header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw DataError("'" + path.string() + "' has a malformed header");
  const std::int64_t channels = magic == "P6" ? 3 : 1;
  const std::int64_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * channels * bytes));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("'" + path.string() + "' is truncated");
  auto out = torch::empty({h, w, channels}, torch::kFloat);
  auto* dst = out.data_ptr<float>();
  for (std::int64_t i = 0; i < w * h * channels; ++i)
    dst[i] = bytes == 2 ? static_cast<float>((raw[2 * i] << 8) | raw[2 * i + 1]) : static_cast<float>(raw[i]);
  return out;
}

void write_ppm8(const fs::path& path, const torch::Tensor& rgb01) {
  auto img = (rgb01.clamp(0, 1) * 255).round().to(torch::kUInt8).contiguous();
  auto out = open_out(path);
  write_header(out, "P6", img.size(1), img.size(0), 255);
  out.write(reinterpret_cast<const char*>(img.data_ptr<std::uint8_t>()), img.numel());
}

void write_pgm16(const fs::path& path, const torch::Tensor& depth01) {
  auto img = (depth01.clamp(0, 1) * 65535).round().to(torch::kInt32).contiguous();
  auto out = open_out(path);
  write_header(out, "P5", img.size(1), img.size(0), 65535);
  const auto* v = img.data_ptr<std::int32_t>();
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const char be[2] = {static_cast<char>((v[i] >> 8) & 0xff), static_cast<char>(v[i] & 0xff)};
    out.write(be, 2);
  }
}

void write_pgm8_labels(const fs::path& path, const torch::Tensor& labels) {
  auto img = labels.to(torch::kUInt8).contiguous();
  auto out = open_out(path);
  write_header(out, "P5", img.size(1), img.size(0), 255);
  out.write(reinterpret_cast<const char*>(img.data_ptr<std::uint8_t>()), img.numel());
}

// -- manifest -------------------------------------------------------------------

DatasetManifest load_manifest(const fs::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.split = split;
  m.base_dir = path.parent_path();
  std::string line;
  bool have_header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      if (obj.contains("num_classes")) {
        m.num_classes = obj.at("num_classes").get<std::int64_t>();
        m.depth_divisor = obj.value("depth_divisor", 65535.0);
        have_header = true;
      } else {
        m.entries.push_back({obj.at("rgb").get<std::string>(), obj.at("depth").get<std::string>(),
                             obj.at("label").get<std::string>()});
      }
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError("manifest '" + path.string() + "' has no header object");
  if (m.num_classes < 2) throw DataError("manifest '" + path.string() + "' declares fewer than two classes");
  if (!(m.depth_divisor > 0)) throw DataError("manifest '" + path.string() + "' has a non-positive depth_divisor");
  return m;
}

std::vector<RGBDSample> load_samples(const DatasetManifest& m, const std::string& depth_norm, std::int64_t ignore_index) {
  if (depth_norm != "divisor" && depth_norm != "image_minmax" && depth_norm != "dataset_minmax")
    throw std::invalid_argument("unknown depth normalization '" + depth_norm + "'");
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : m.base_dir / p; };
  std::vector<RGBDSample> out;
  for (const auto& e : m.entries) {
    const auto rgb_path = resolve(e.rgb), depth_path = resolve(e.depth), label_path = resolve(e.label);
    auto rgb = read_netpbm(rgb_path);
    auto depth = read_netpbm(depth_path);
    auto labels = read_netpbm(label_path);
    if (rgb.size(2) != 3) throw DataError("'" + rgb_path.string() + "' is not an RGB image");
    if (depth.size(2) != 1) throw DataError("'" + depth_path.string() + "' is not a single-channel depth map");
    if (labels.size(2) != 1) throw DataError("'" + label_path.string() + "' is not a single-channel label map");
    if (depth.sizes() != labels.sizes() || rgb.size(0) != labels.size(0) || rgb.size(1) != labels.size(1))
      throw DataError("'" + depth_path.string() + "' does not match the shape of its RGB/label pair");
    RGBDSample s{rgb / 255.0f, depth, labels.squeeze(2).to(torch::kLong)};
    if (depth_norm == "divisor") {
      s.depth = (depth / static_cast<float>(m.depth_divisor)).clamp(0, 1);
    } else if (depth_norm == "image_minmax") {
      const auto lo = depth.min(), hi = depth.max();
      s.depth = (hi > lo).item<bool>() ? (depth - lo) / (hi - lo) : torch::zeros_like(depth);
    }
    try {
      validate_sample(s, m.num_classes, ignore_index);
    } catch (const DataError& err) {
      throw DataError("'" + label_path.string() + "': " + err.what());
    }
    out.push_back(std::move(s));
  }
  if (depth_norm == "dataset_minmax" && !out.empty()) {
    float lo = std::numeric_limits<float>::max(), hi = std::numeric_limits<float>::lowest();
    for (const auto& s : out) {
      lo = std::min(lo, s.depth.min().item<float>());
      hi = std::max(hi, s.depth.max().item<float>());
    }
    for (auto& s : out) s.depth = hi > lo ? (s.depth - lo) / (hi - lo) : torch::zeros_like(s.depth);
  }
  return out;
}

fs::path write_dataset(const fs::path& dir, const std::string& name, const std::vector<RGBDSample>& samples,
                       std::int64_t num_classes) {
  fs::create_directories(dir / name);
  const auto manifest = dir / (name + ".jsonl");
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write '" + manifest.string() + "'");
  out << json{{"num_classes", num_classes}, {"depth_divisor", 65535.0}}.dump() << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const std::string rgb = name + "/rgb_" + stem + ".ppm";
    const std::string depth = name + "/depth_" + stem + ".pgm";
    const std::string label = name + "/label_" + stem + ".pgm";
    write_ppm8(dir / rgb, samples[i].rgb);
    write_pgm16(dir / depth, samples[i].depth.squeeze(2));
    write_pgm8_labels(dir / label, samples[i].labels);
    out << json{{"rgb", rgb}, {"depth", depth}, {"label", label}}.dump() << '\n';
  }
  return manifest;
}

// -- batching -------------------------------------------------------------------

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::int64_t batch_size, std::uint64_t seed,
                                                    std::int64_t epoch, Split split, bool shuffle) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(derive_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
  }
  const auto b = static_cast<std::size_t>(batch_size);
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t start = 0; start < n; start += b) {
    const auto end = std::min(n, start + b);
    if (split == Split::Train && end - start < b) break;
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return plan;
}

augment::Batch collate(const std::vector<RGBDSample>& samples, const std::vector<std::size_t>& indices) {
  std::vector<torch::Tensor> rgb, depth, labels;
  for (auto i : indices) {
    rgb.push_back(samples.at(i).rgb);
    depth.push_back(samples.at(i).depth);
    labels.push_back(samples.at(i).labels);
  }
  return {torch::stack(rgb), torch::stack(depth), torch::stack(labels)};
}

BatchStream::BatchStream(const std::vector<RGBDSample>& samples, std::int64_t batch_size, std::uint64_t seed,
                         std::int64_t epoch, Split split, bool shuffle)
    : samples_(samples), plan_(batch_indices(samples.size(), batch_size, seed, epoch, split, shuffle)) {}

std::optional<augment::Batch> BatchStream::next() {
  if (cursor_ >= plan_.size()) return std::nullopt;
  return collate(samples_, plan_[cursor_++]);
}

}  // namespace crodino::data
