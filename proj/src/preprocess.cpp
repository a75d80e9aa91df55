#include "stagekit/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace stagekit {

namespace {

Shape3 resampled_shape(Shape3 s, Spacing3 sp, double target) {
  if (!(target > 0)) throw ValidationError("resample target spacing must be positive");
  if (!sp.valid()) throw ValidationError("resample input spacing must be positive");
  Shape3 out{std::llround(s.z * sp.z / target), std::llround(s.y * sp.y / target), std::llround(s.x * sp.x / target)};
  if (out.z <= 0 || out.y <= 0 || out.x <= 0)
    throw ShapeError("resampling produces a degenerate shape (" + std::to_string(out.z) + "," + std::to_string(out.y) +
                     "," + std::to_string(out.x) + ")");
  return out;
}

bool already_at(Spacing3 sp, double target) { return sp.z == target && sp.y == target && sp.x == target; }

// Voxel-centre alignment: output voxel i covers the same physical interval
// fraction as the input, so its centre maps to (i + 0.5) * target / sp - 0.5.
double source_coord(std::int64_t i, double sp, double target) { return (static_cast<double>(i) + 0.5) * target / sp - 0.5; }

}  // namespace

ImageVolume resample_isotropic(const ImageVolume& vol, double target_mm) {
  const Shape3 out_shape = resampled_shape(vol.shape, vol.spacing_mm, target_mm);
  if (already_at(vol.spacing_mm, target_mm)) return vol;
  ImageVolume out(out_shape, {target_mm, target_mm, target_mm});

  struct Tap {
    std::int64_t lo, hi;
    double w;
  };
  auto taps = [&](std::int64_t n_out, std::int64_t n_in, double sp) {
    std::vector<Tap> t(static_cast<std::size_t>(n_out));
    for (std::int64_t i = 0; i < n_out; ++i) {
      double c = std::clamp(source_coord(i, sp, target_mm), 0.0, static_cast<double>(n_in - 1));
      auto lo = static_cast<std::int64_t>(std::floor(c));
      auto hi = std::min(lo + 1, n_in - 1);
      t[static_cast<std::size_t>(i)] = {lo, hi, c - static_cast<double>(lo)};
    }
    return t;
  };
  const auto tz = taps(out_shape.z, vol.shape.z, vol.spacing_mm.z);
  const auto ty = taps(out_shape.y, vol.shape.y, vol.spacing_mm.y);
  const auto tx = taps(out_shape.x, vol.shape.x, vol.spacing_mm.x);

  for (std::int64_t z = 0; z < out_shape.z; ++z) {
    const auto& a = tz[static_cast<std::size_t>(z)];
    for (std::int64_t y = 0; y < out_shape.y; ++y) {
      const auto& b = ty[static_cast<std::size_t>(y)];
      for (std::int64_t x = 0; x < out_shape.x; ++x) {
        const auto& c = tx[static_cast<std::size_t>(x)];
        auto v = [&](std::int64_t zz, std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(vol.at(zz, yy, xx));
        };
        const double c00 = v(a.lo, b.lo, c.lo) * (1 - c.w) + v(a.lo, b.lo, c.hi) * c.w;
        const double c01 = v(a.lo, b.hi, c.lo) * (1 - c.w) + v(a.lo, b.hi, c.hi) * c.w;
        const double c10 = v(a.hi, b.lo, c.lo) * (1 - c.w) + v(a.hi, b.lo, c.hi) * c.w;
        const double c11 = v(a.hi, b.hi, c.lo) * (1 - c.w) + v(a.hi, b.hi, c.hi) * c.w;
        const double c0 = c00 * (1 - b.w) + c01 * b.w;
        const double c1 = c10 * (1 - b.w) + c11 * b.w;
        out.at(z, y, x) = static_cast<float>(c0 * (1 - a.w) + c1 * a.w);
      }
    }
  }
  return out;
}

LabelVolume resample_isotropic(const LabelVolume& vol, double target_mm) {
  const Shape3 out_shape = resampled_shape(vol.shape, vol.spacing_mm, target_mm);
  if (already_at(vol.spacing_mm, target_mm)) return vol;
  LabelVolume out(out_shape, {target_mm, target_mm, target_mm});
  auto nearest = [&](std::int64_t i, std::int64_t n_in, double sp) {
    return std::clamp<std::int64_t>(std::llround(source_coord(i, sp, target_mm)), 0, n_in - 1);
  };
  for (std::int64_t z = 0; z < out_shape.z; ++z) {
    const auto sz = nearest(z, vol.shape.z, vol.spacing_mm.z);
    for (std::int64_t y = 0; y < out_shape.y; ++y) {
      const auto sy = nearest(y, vol.shape.y, vol.spacing_mm.y);
      for (std::int64_t x = 0; x < out_shape.x; ++x)
        out.at(z, y, x) = vol.at(sz, sy, nearest(x, vol.shape.x, vol.spacing_mm.x));
    }
  }
  return out;
}

std::array<double, 3> centroid(const Mask& mask) {
  double sz = 0, sy = 0, sx = 0;
  std::size_t n = 0;
  for (std::int64_t z = 0; z < mask.shape.z; ++z)
    for (std::int64_t y = 0; y < mask.shape.y; ++y)
      for (std::int64_t x = 0; x < mask.shape.x; ++x)
        if (mask.at(z, y, x)) {
          sz += static_cast<double>(z);
          sy += static_cast<double>(y);
          sx += static_cast<double>(x);
          ++n;
        }
  if (n == 0) throw ValidationError("centroid of an empty mask");
  const double inv = 1.0 / static_cast<double>(n);
  return {sz * inv, sy * inv, sx * inv};
}

std::array<double, 3> volume_center(Shape3 s) {
  return {(static_cast<double>(s.z) - 1) / 2, (static_cast<double>(s.y) - 1) / 2, (static_cast<double>(s.x) - 1) / 2};
}

Case crop_at(const Case& c, const std::array<double, 3>& center, Shape3 window) {
  if (window.z <= 0 || window.y <= 0 || window.x <= 0) throw ShapeError("crop window must be positive");
  const std::int64_t start[3] = {std::llround(center[0]) - window.z / 2, std::llround(center[1]) - window.y / 2,
                                 std::llround(center[2]) - window.x / 2};
  Case out;
  out.id = c.id;
  out.stage = c.stage;
  out.role = c.role;
  out.image = ImageVolume(window, c.image.spacing_mm, 0.0f);
  if (c.labels) out.labels = LabelVolume(window, c.labels->spacing_mm, 0);
  for (std::int64_t z = 0; z < window.z; ++z) {
    const auto sz = start[0] + z;
    for (std::int64_t y = 0; y < window.y; ++y) {
      const auto sy = start[1] + y;
      for (std::int64_t x = 0; x < window.x; ++x) {
        const auto sx = start[2] + x;
        if (!c.image.shape.contains(sz, sy, sx)) continue;
        out.image.at(z, y, x) = c.image.at(sz, sy, sx);
        if (c.labels) out.labels->at(z, y, x) = c.labels->at(sz, sy, sx);
      }
    }
  }
  return out;
}

Case crop_around_label(const Case& c, Phase phase, const CropConfig& cfg) {
  if (!c.labels) throw ValidationError("crop_around_label: case " + c.id + " has no labels; centre on the rectum centroid instead");
  const Mask cancer = extract_bit(*c.labels, LabelBit::Cancer);
  if (count_nonzero(cancer) == 0)
    throw ValidationError("crop_around_label: case " + c.id +
                          " has an empty cancer label; centre on the rectum centroid instead (crop_at)");
  return crop_at(c, centroid(cancer), cfg.for_phase(phase));
}

double percentile(std::vector<float> values, double pct) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return static_cast<double>(values[lo]) * (1 - f) + static_cast<double>(values[hi]) * f;
}

ImageVolume percentile_normalize(const ImageVolume& img, double p_low, double p_high) {
  if (!(p_low < p_high)) throw ValidationError("percentile_normalize requires p_low < p_high");
  ImageVolume out(img.shape, img.spacing_mm, 0.0f);
  if (img.data.empty()) return out;
  const auto [mn, mx] = std::minmax_element(img.data.begin(), img.data.end());
  if (*mn == *mx) return out;

  std::vector<float> sorted = img.data;
  std::sort(sorted.begin(), sorted.end());
  // Nearest rank, so the anchors are sample values and survive clamping on a second pass.
  auto pick = [&](double pct) {
    const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    return static_cast<double>(sorted[static_cast<std::size_t>(std::llround(pos))]);
  };
  const double lo = pick(std::clamp(p_low, 0.0, 100.0));
  const double hi = pick(std::clamp(p_high, 0.0, 100.0));
  if (!(hi > lo)) return out;
  const double scale = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < img.size(); ++i)
    out.data[i] = static_cast<float>(std::clamp((static_cast<double>(img.data[i]) - lo) * scale, 0.0, 1.0));
  return out;
}

}  // namespace stagekit
