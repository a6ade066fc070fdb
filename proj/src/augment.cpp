#include "crodino/augment.hpp"

#include <algorithm>
#include <cmath>

namespace crodino::augment {

AugmentParams params_from(const TrainConfig& cfg) {
  return {cfg.augment, cfg.scale_min, cfg.scale_max, cfg.jitter, cfg.image_height, cfg.image_width};
}

std::pair<std::int64_t, std::int64_t> crop_size(std::int64_t in_h, std::int64_t in_w, double scale,
                                                std::int64_t out_h, std::int64_t out_w) {
  const auto scaled_h = std::max<std::int64_t>(1, std::llround(in_h * scale));
  const auto scaled_w = std::max<std::int64_t>(1, std::llround(in_w * scale));
  return {std::min(out_h, scaled_h), std::min(out_w, scaled_w)};
}

GeoTransform sample_transform(RngStream& rng, std::int64_t height, std::int64_t width, const AugmentParams& p) {
  if (height < kMinImageSide || width < kMinImageSide)
    throw ShapeError("image of " + std::to_string(height) + "x" + std::to_string(width) + " is below the minimum crop side " +
                     std::to_string(kMinImageSide));
  const auto out_h = p.out_height > 0 ? p.out_height : height;
  const auto out_w = p.out_width > 0 ? p.out_width : width;

  GeoTransform t;
  t.flip_h = std::bernoulli_distribution(0.5)(rng);
  t.scale = std::uniform_real_distribution<double>(p.scale_min, p.scale_max)(rng);
  t.scale = std::clamp(t.scale, p.scale_min, p.scale_max);
  const auto [ch, cw] = crop_size(height, width, t.scale, out_h, out_w);
  const auto scaled_h = std::llround(height * t.scale), scaled_w = std::llround(width * t.scale);
  t.crop_row = std::uniform_int_distribution<std::int64_t>(0, std::max<std::int64_t>(0, scaled_h - ch))(rng);
  t.crop_col = std::uniform_int_distribution<std::int64_t>(0, std::max<std::int64_t>(0, scaled_w - cw))(rng);
  return t;
}

std::pair<torch::Tensor, torch::Tensor> apply_geo(const torch::Tensor& image, const torch::Tensor& labels,
                                                  const GeoTransform& t, std::pair<std::int64_t, std::int64_t> out_hw) {
  if (image.dim() != 3 || labels.dim() != 2 || image.size(0) != labels.size(0) || image.size(1) != labels.size(1))
    throw ShapeError("image and labels must be spatially aligned");
  const auto h = image.size(0), w = image.size(1), c = image.size(2);
  const auto oh = out_hw.first > 0 ? out_hw.first : h;
  const auto ow = out_hw.second > 0 ? out_hw.second : w;
  const auto [ch, cw] = crop_size(h, w, t.scale, oh, ow);

  auto src = image.to(torch::kFloat).contiguous();
  auto src_lab = labels.to(torch::kLong).contiguous();
  auto dst = torch::empty({oh, ow, c}, torch::kFloat);
  auto dst_lab = torch::empty({oh, ow}, torch::kLong);
  auto s = src.accessor<float, 3>();
  auto sl = src_lab.accessor<std::int64_t, 2>();
  auto d = dst.accessor<float, 3>();
  auto dl = dst_lab.accessor<std::int64_t, 2>();

  // output pixel -> crop -> scaled image -> source, pixel-centre aligned.
  auto source_coord = [&](std::int64_t i, std::int64_t out_n, std::int64_t crop_n, std::int64_t origin) {
    const double in_crop = (i + 0.5) * static_cast<double>(crop_n) / static_cast<double>(out_n) - 0.5;
    return (in_crop + origin + 0.5) / t.scale - 0.5;
  };

  for (std::int64_t r = 0; r < oh; ++r) {
    const double y = std::clamp(source_coord(r, oh, ch, t.crop_row), 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::int64_t>(std::floor(y));
    const auto y1 = std::min(y0 + 1, h - 1);
    const double fy = y - y0;
    const auto yn = std::clamp<std::int64_t>(std::llround(y), 0, h - 1);
    for (std::int64_t col = 0; col < ow; ++col) {
      double x = std::clamp(source_coord(col, ow, cw, t.crop_col), 0.0, static_cast<double>(w - 1));
      if (t.flip_h) x = static_cast<double>(w - 1) - x;
      const auto x0 = static_cast<std::int64_t>(std::floor(x));
      const auto x1 = std::min(x0 + 1, w - 1);
      const double fx = x - x0;
      for (std::int64_t k = 0; k < c; ++k) {
        const double top = s[y0][x0][k] * (1 - fx) + s[y0][x1][k] * fx;
        const double bottom = s[y1][x0][k] * (1 - fx) + s[y1][x1][k] * fx;
        d[r][col][k] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
      dl[r][col] = sl[yn][std::clamp<std::int64_t>(std::llround(x), 0, w - 1)];
    }
  }
  return {dst, dst_lab};
}

torch::Tensor color_jitter(const torch::Tensor& rgb, RngStream& rng, double strength) {
  if (rgb.dim() != 3 || rgb.size(2) != 3) throw ShapeError("color jitter applies to 3-channel RGB images only");
  if (strength == 0) return rgb.clone();
  std::uniform_real_distribution<double> factor(1 - strength, 1 + strength);
  const double brightness = factor(rng), contrast = factor(rng), saturation = factor(rng);
  auto luma = [](const torch::Tensor& x) {
    return (0.299 * x.select(2, 0) + 0.587 * x.select(2, 1) + 0.114 * x.select(2, 2)).unsqueeze(2);
  };
  auto x = (rgb * brightness).clamp(0, 1);
  auto mean = luma(x).mean();
  x = ((x - mean) * contrast + mean).clamp(0, 1);
  auto gray = luma(x);
  return ((x - gray) * saturation + gray).clamp(0, 1);
}

AugmentedBatch apply_views(const Batch& batch, const std::vector<GeoTransform>& rgb_t,
                           const std::vector<GeoTransform>& depth_t, std::pair<std::int64_t, std::int64_t> out_hw) {
  const auto n = batch.size();
  if (static_cast<std::int64_t>(rgb_t.size()) != n || static_cast<std::int64_t>(depth_t.size()) != n)
    throw ShapeError("one transform per sample is required");
  std::vector<torch::Tensor> rgb, rgb_lab, dep, dep_lab;
  for (std::int64_t i = 0; i < n; ++i) {
    auto [x, y] = apply_geo(batch.rgb[i], batch.labels[i], rgb_t[i], out_hw);
    auto [xd, yd] = apply_geo(batch.depth[i], batch.labels[i], depth_t[i], out_hw);
    rgb.push_back(x);
    rgb_lab.push_back(y);
    dep.push_back(xd);
    dep_lab.push_back(yd);
  }
  return {torch::stack(rgb), torch::stack(rgb_lab), torch::stack(dep), torch::stack(dep_lab)};
}

AugmentedBatch augment_batch(const Batch& batch, std::uint64_t master_seed, bool decoupled, const AugmentParams& p) {
  const bool resize = p.out_height > 0 || p.out_width > 0;
  if (!p.enabled && !resize) return {batch.rgb, batch.labels, batch.depth, batch.labels};

  const auto n = batch.size();
  const auto h = batch.labels.size(1), w = batch.labels.size(2);
  std::vector<GeoTransform> rgb_t(n), depth_t(n);
  if (p.enabled) {
    RngStream shared(derive_seed(master_seed, "geo_shared"));
    RngStream rgb_stream(derive_seed(master_seed, "geo_rgb"));
    RngStream depth_stream(derive_seed(master_seed, "geo_d"));
    for (std::int64_t i = 0; i < n; ++i) {
      if (decoupled) {
        rgb_t[i] = sample_transform(rgb_stream, h, w, p);
        depth_t[i] = sample_transform(depth_stream, h, w, p);
      } else {
        rgb_t[i] = depth_t[i] = sample_transform(shared, h, w, p);
      }
    }
  }
  auto out = apply_views(batch, rgb_t, depth_t, {p.out_height, p.out_width});
  if (!decoupled) out.depth_labels = out.rgb_labels;
  if (p.enabled && p.jitter > 0) {
    RngStream jitter_stream(derive_seed(master_seed, "jitter"));
    std::vector<torch::Tensor> jittered;
    for (std::int64_t i = 0; i < n; ++i) jittered.push_back(color_jitter(out.rgb[i], jitter_stream, p.jitter));
    out.rgb = torch::stack(jittered);
  }
  return out;
}

}  // namespace crodino::augment
