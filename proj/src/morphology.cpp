#include "stagekit/morphology.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stagekit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher lower envelope of parabolas; f holds squared
// distances along one line with sample spacing h.
void edt_1d(std::vector<double>& f, double h, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  d.resize(f.size());
  v.resize(f.size());
  z.resize(f.size() + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = q * h;
    while (true) {
      if (k < 0) {
        v[++k] = q;
        z[k] = -kInf;
        z[k + 1] = kInf;
        break;
      }
      const double xv = v[k] * h;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2 * (xq - xv));
      if (s <= z[k]) {
        --k;
        continue;
      }
      v[++k] = q;
      z[k] = s;
      z[k + 1] = kInf;
      break;
    }
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
  } else {
    int j = 0;
    for (int q = 0; q < n; ++q) {
      const double xq = q * h;
      while (z[j + 1] < xq) ++j;
      const double dx = xq - v[j] * h;
      d[q] = dx * dx + f[v[j]];
    }
  }
  f.swap(d);
}

}  // namespace

std::vector<double> distance_to_mask(const Mask& mask) {
  const Shape3 s = mask.shape;
  std::vector<double> sq(s.voxels());
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = mask.data[i] ? 0.0 : kInf;

  std::vector<double> line, tmp, z;
  std::vector<int> v;
  // x lines
  line.resize(static_cast<std::size_t>(s.x));
  for (std::int64_t zz = 0; zz < s.z; ++zz)
    for (std::int64_t y = 0; y < s.y; ++y) {
      const std::size_t base = s.index(zz, y, 0);
      std::copy_n(sq.begin() + static_cast<std::ptrdiff_t>(base), s.x, line.begin());
      edt_1d(line, mask.spacing_mm.x, tmp, v, z);
      std::copy(line.begin(), line.end(), sq.begin() + static_cast<std::ptrdiff_t>(base));
      line.resize(static_cast<std::size_t>(s.x));
    }
  // y lines
  line.assign(static_cast<std::size_t>(s.y), 0);
  for (std::int64_t zz = 0; zz < s.z; ++zz)
    for (std::int64_t x = 0; x < s.x; ++x) {
      line.resize(static_cast<std::size_t>(s.y));
      for (std::int64_t y = 0; y < s.y; ++y) line[static_cast<std::size_t>(y)] = sq[s.index(zz, y, x)];
      edt_1d(line, mask.spacing_mm.y, tmp, v, z);
      for (std::int64_t y = 0; y < s.y; ++y) sq[s.index(zz, y, x)] = line[static_cast<std::size_t>(y)];
    }
  // z lines
  for (std::int64_t y = 0; y < s.y; ++y)
    for (std::int64_t x = 0; x < s.x; ++x) {
      line.resize(static_cast<std::size_t>(s.z));
      for (std::int64_t zz = 0; zz < s.z; ++zz) line[static_cast<std::size_t>(zz)] = sq[s.index(zz, y, x)];
      edt_1d(line, mask.spacing_mm.z, tmp, v, z);
      for (std::int64_t zz = 0; zz < s.z; ++zz) sq[s.index(zz, y, x)] = line[static_cast<std::size_t>(zz)];
    }
  for (auto& d : sq) d = std::sqrt(d);
  return sq;
}

std::vector<double> signed_distance(const Mask& mask) {
  Mask inverse(mask.shape, mask.spacing_mm);
  for (std::size_t i = 0; i < mask.size(); ++i) inverse.data[i] = mask.data[i] ? 0 : 1;
  const auto outside = distance_to_mask(mask);
  const auto inside = distance_to_mask(inverse);
  const double half = 0.5 * std::min({mask.spacing_mm.z, mask.spacing_mm.y, mask.spacing_mm.x});
  std::vector<double> sdf(mask.size());
  for (std::size_t i = 0; i < sdf.size(); ++i) sdf[i] = mask.data[i] ? -(inside[i] - half) : (outside[i] - half);
  return sdf;
}

Components connected_components(const Mask& mask, Connectivity conn) {
  const Shape3 s = mask.shape;
  Components out;
  out.label.assign(s.voxels(), 0);
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manhattan == 0) continue;
        if (conn == Connectivity::Face6 && manhattan != 1) continue;
        offsets.push_back({dz, dy, dx});
      }
  std::vector<std::array<std::int64_t, 3>> stack;
  for (std::int64_t z = 0; z < s.z; ++z)
    for (std::int64_t y = 0; y < s.y; ++y)
      for (std::int64_t x = 0; x < s.x; ++x) {
        const std::size_t i = s.index(z, y, x);
        if (!mask.data[i] || out.label[i]) continue;
        const int id = ++out.count;
        std::size_t size = 0;
        out.label[i] = id;
        stack.push_back({z, y, x});
        while (!stack.empty()) {
          const auto [cz, cy, cx] = stack.back();
          stack.pop_back();
          ++size;
          for (const auto& o : offsets) {
            const std::int64_t nz = cz + o[0], ny = cy + o[1], nx = cx + o[2];
            if (!s.contains(nz, ny, nx)) continue;
            const std::size_t j = s.index(nz, ny, nx);
            if (mask.data[j] && !out.label[j]) {
              out.label[j] = id;
              stack.push_back({nz, ny, nx});
            }
          }
        }
        out.sizes.push_back(size);
      }
  return out;
}

std::vector<double> gaussian_blur(const Mask& mask, double sigma) {
  const Shape3 s = mask.shape;
  std::vector<double> a(mask.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = mask.data[i] ? 1.0 : 0.0;
  if (sigma <= 0) return a;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& w : k) w /= ks;

  std::vector<double> b(a.size());
  auto pass = [&](int axis) {
    const std::int64_t n = s[axis];
    for (std::int64_t z = 0; z < s.z; ++z)
      for (std::int64_t y = 0; y < s.y; ++y)
        for (std::int64_t x = 0; x < s.x; ++x) {
          const std::int64_t pos = axis == 0 ? z : (axis == 1 ? y : x);
          double acc = 0;
          for (int t = -r; t <= r; ++t) {
            const std::int64_t q = pos + t;
            if (q < 0 || q >= n) continue;  // zero outside the grid
            const std::size_t j = axis == 0 ? s.index(q, y, x) : (axis == 1 ? s.index(z, q, x) : s.index(z, y, q));
            acc += k[static_cast<std::size_t>(t + r)] * a[j];
          }
          b[s.index(z, y, x)] = acc;
        }
    a.swap(b);
  };
  pass(2);
  pass(1);
  pass(0);
  return a;
}

}  // namespace stagekit
