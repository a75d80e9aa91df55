#include "stagekit/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "stagekit/morphology.hpp"
#include "stagekit/staging.hpp"
#include "stagekit/volume_pack.hpp"

namespace stagekit {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 over the combined state
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void PhantomConfig::validate() const {
  if (shape.z <= 0 || shape.y <= 0 || shape.x <= 0) throw ValidationError("phantom shape must be positive");
  if (!(spacing_mm > 0)) throw ValidationError("phantom spacing must be positive");
  auto ordered = [](Range r, const char* what) {
    if (!(r.lo > 0) || r.hi < r.lo) throw ValidationError(std::string("phantom range ") + what + " must be positive and ordered");
  };
  ordered(rectum_radius_mm, "rectum_radius_mm");
  ordered(rectum_length_mm, "rectum_length_mm");
  ordered(mesorectum_margin_mm, "mesorectum_margin_mm");
  ordered(cancer_radius_mm, "cancer_radius_mm");
  ordered(t2_wall_gap_mm, "t2_wall_gap_mm");
  ordered(invasion_depth_mm, "invasion_depth_mm");
  if (mesorectum_margin_mm.lo < invasion_depth_mm.hi + 2.0)
    throw ValidationError("mesorectum margin must exceed the maximum invasion depth by at least 2 mm");
  if (cancer_radius_mm.hi * 1.15 >= rectum_radius_mm.lo)
    throw ValidationError("cancer radius must stay below the rectum radius");
}

namespace {

using Vec3 = std::array<double, 3>;  // z, y, x in mm

struct Ellipsoid {
  Vec3 center{};
  Vec3 radii{};
  bool contains(const Vec3& p) const {
    double s = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / radii[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

struct Wave {
  Vec3 k;
  double phase;
};

class PhantomBuilder {
 public:
  PhantomBuilder(std::uint64_t seed, const PhantomConfig& cfg) : cfg_(cfg), rng_(seed) {}

  Case build(StageLabel stage, std::uint64_t seed) {
    const double sp = cfg_.spacing_mm;
    const Vec3 fov_center{(static_cast<double>(cfg_.shape.z) - 1) * sp / 2, (static_cast<double>(cfg_.shape.y) - 1) * sp / 2,
                          (static_cast<double>(cfg_.shape.x) - 1) * sp / 2};
    const Vec3 center{fov_center[0] + uniform(-1, 1), fov_center[1] + uniform(-1, 1), fov_center[2] + uniform(-1, 1)};

    rectum_.center = center;
    rectum_.radii = {draw(cfg_.rectum_length_mm), draw(cfg_.rectum_radius_mm), draw(cfg_.rectum_radius_mm)};
    const double margin = draw(cfg_.mesorectum_margin_mm);
    meso_.center = center;
    meso_.radii = {rectum_.radii[0] + margin, rectum_.radii[1] + margin, rectum_.radii[2] + margin};

    const double r0 = draw(cfg_.cancer_radius_mm);
    cancer_.radii = {r0 * uniform(0.9, 1.1), r0 * uniform(0.9, 1.1), r0 * uniform(0.9, 1.1)};
    const double theta = uniform(0, 2 * std::numbers::pi);
    dir_ = {0.0, std::sin(theta), std::cos(theta)};
    dz_ = uniform(-2, 2);

    const double r_along = 1.0 / std::sqrt(sq(dir_[1] / cancer_.radii[1]) + sq(dir_[2] / cancer_.radii[2]));
    const double wall = wall_distance();

    LabelVolume labels;
    if (stage == StageLabel::UnderT2) {
      double s = wall - draw(cfg_.t2_wall_gap_mm) - r_along;
      for (int attempt = 0;; ++attempt) {
        labels = rasterize(s);
        if (classify_stage(labels) == StageLabel::UnderT2) break;
        if (attempt >= 40) throw std::logic_error("phantom generator could not place an UNDER_T2 cancer");
        s -= 0.25;
      }
    } else {
      const double lo = cfg_.invasion_depth_mm.lo, hi = cfg_.invasion_depth_mm.hi;
      const double target = lo + (hi - lo) * uniform(0.2, 0.8);
      double s = wall + target - r_along;
      bool ok = false;
      for (int attempt = 0; attempt < 12 && !ok; ++attempt) {
        labels = rasterize(s);
        const double depth = invasion_depth_mm(labels);
        if (depth >= lo && depth <= hi && classify_stage(labels) == StageLabel::OverT3) ok = true;
        else s += target - (std::isfinite(depth) ? depth : 0.0);
      }
      if (!ok) throw std::logic_error("phantom generator could not reach the requested invasion depth");
    }

    const Mask meso = extract_bit(labels, LabelBit::Mesorectum);
    const Mask rect = extract_bit(labels, LabelBit::Rectum);
    const Mask canc = extract_bit(labels, LabelBit::Cancer);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (rect.data[i] && !meso.data[i]) throw std::logic_error("phantom rectum escapes the mesorectum");
      if (canc.data[i] && !(rect.data[i] || meso.data[i])) throw std::logic_error("phantom cancer escapes the mesorectum");
    }
    if (classify_stage(labels) != stage) throw std::logic_error("phantom stage does not match the requested stage");

    Case c;
    c.id = "phantom";
    c.stage = stage;
    c.role = CaseRole::TrainLabeled;
    c.image = render(labels, seed);
    c.labels = std::move(labels);
    return c;
  }

 private:
  static double sq(double v) { return v * v; }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double draw(Range r) { return r.hi > r.lo ? uniform(r.lo, r.hi) : r.lo; }

  // Distance from the rectum axis to its surface along dir_ at height dz_.
  double wall_distance() const {
    const double shrink = std::sqrt(std::max(0.0, 1.0 - sq(dz_ / rectum_.radii[0])));
    return shrink / std::sqrt(sq(dir_[1] / rectum_.radii[1]) + sq(dir_[2] / rectum_.radii[2]));
  }

  LabelVolume rasterize(double radial_offset) {
    const double sp = cfg_.spacing_mm;
    cancer_.center = {rectum_.center[0] + dz_, rectum_.center[1] + radial_offset * dir_[1],
                      rectum_.center[2] + radial_offset * dir_[2]};
    const Vec3 c = meso_.center;
    const Ellipsoid bladder{{c[0] + 2, c[1] - meso_.radii[1] - 5, c[2]}, {9, 6, 10}};
    const Ellipsoid prostate{{c[0] - 7, c[1] - meso_.radii[1] - 2.5, c[2]}, {3.5, 3, 4}};
    const Ellipsoid pelvis_l{{c[0], c[1] - 2, c[2] - meso_.radii[2] - 3.5}, {11, 6, 2}};
    const Ellipsoid pelvis_r{{c[0], c[1] - 2, c[2] + meso_.radii[2] + 3.5}, {11, 6, 2}};

    LabelVolume labels(cfg_.shape, {sp, sp, sp}, 0);
    for (std::int64_t z = 0; z < cfg_.shape.z; ++z)
      for (std::int64_t y = 0; y < cfg_.shape.y; ++y)
        for (std::int64_t x = 0; x < cfg_.shape.x; ++x) {
          const Vec3 p{static_cast<double>(z) * sp, static_cast<double>(y) * sp, static_cast<double>(x) * sp};
          std::uint8_t v = 0;
          const bool in_meso = meso_.contains(p);
          if (in_meso) v |= bit_value(LabelBit::Mesorectum);
          if (rectum_.contains(p)) v |= bit_value(LabelBit::Rectum);
          if (cancer_.contains(p)) v |= bit_value(LabelBit::Cancer);
          if (!in_meso) {
            if (bladder.contains(p)) v |= bit_value(LabelBit::Bladder);
            else if (prostate.contains(p)) v |= bit_value(LabelBit::Prostate);
            else if (pelvis_l.contains(p) || pelvis_r.contains(p)) v |= bit_value(LabelBit::Pelvis);
          }
          labels.at(z, y, x) = v;
        }
    return labels;
  }

  ImageVolume render(const LabelVolume& labels, std::uint64_t seed) {
    std::mt19937_64 tex_rng(derive_seed(seed, 0x7e57));
    std::uniform_real_distribution<double> freq(0.3, 0.9), phase(0, 2 * std::numbers::pi), unit(-1, 1);
    // Three plane waves per tissue class give band-limited texture.
    std::array<std::array<Wave, 3>, kLabelBitCount + 1> waves;
    for (auto& cls : waves)
      for (auto& w : cls) {
        Vec3 k{unit(tex_rng), unit(tex_rng), unit(tex_rng)};
        const double n = std::sqrt(k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) + 1e-12;
        const double f = freq(tex_rng);
        w = {{k[0] / n * f, k[1] / n * f, k[2] / n * f}, phase(tex_rng)};
      }
    std::normal_distribution<double> noise(0.0, cfg_.noise_sigma);

    const double sp = cfg_.spacing_mm;
    ImageVolume img(cfg_.shape, {sp, sp, sp}, 0.0f);
    for (std::int64_t z = 0; z < cfg_.shape.z; ++z)
      for (std::int64_t y = 0; y < cfg_.shape.y; ++y)
        for (std::int64_t x = 0; x < cfg_.shape.x; ++x) {
          const std::uint8_t v = labels.at(z, y, x);
          int cls;
          double base;
          if (v & bit_value(LabelBit::Cancer)) cls = 2, base = cfg_.intensity_cancer;
          else if (v & bit_value(LabelBit::Rectum)) cls = 1, base = cfg_.intensity_rectum;
          else if (v & bit_value(LabelBit::Mesorectum)) cls = 0, base = cfg_.intensity_mesorectum;
          else if (v & bit_value(LabelBit::Bladder)) cls = 3, base = cfg_.intensity_bladder;
          else if (v & bit_value(LabelBit::Prostate)) cls = 4, base = cfg_.intensity_prostate;
          else if (v & bit_value(LabelBit::Pelvis)) cls = 5, base = cfg_.intensity_pelvis;
          else cls = kLabelBitCount, base = cfg_.intensity_background;
          const Vec3 p{static_cast<double>(z) * sp, static_cast<double>(y) * sp, static_cast<double>(x) * sp};
          double tex = 0;
          for (const auto& w : waves[static_cast<std::size_t>(cls)])
            tex += std::sin(w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase);
          img.at(z, y, x) = static_cast<float>(base + cfg_.texture_amplitude * tex / 3.0 + noise(rng_));
        }
    return img;
  }

  const PhantomConfig& cfg_;
  std::mt19937_64 rng_;
  Ellipsoid rectum_, meso_, cancer_;
  Vec3 dir_{};
  double dz_ = 0;
};

}  // namespace

double invasion_depth_mm(const LabelVolume& labels) {
  const Mask rect = extract_bit(labels, LabelBit::Rectum);
  const auto dist = distance_to_mask(rect);
  double depth = 0;
  const std::uint8_t c = bit_value(LabelBit::Cancer);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels.data[i] & c) depth = std::max(depth, dist[i]);
  return depth;
}

Case generate_phantom(std::uint64_t seed, StageLabel stage, const PhantomConfig& cfg) {
  cfg.validate();
  PhantomBuilder builder(seed, cfg);
  return builder.build(stage, seed);
}

std::map<std::string, PoolRequest> parse_pool_counts(const std::string& spec) {
  std::map<std::string, PoolRequest> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('='), colon = item.find(':'), slash = item.find('/');
    if (eq == std::string::npos || colon == std::string::npos || slash == std::string::npos || !(eq < colon && colon < slash))
      throw ValidationError("bad pool count '" + item + "', expected NAME=N:T2/T3");
    PoolRequest r;
    try {
      r.count = std::stoi(item.substr(eq + 1, colon - eq - 1));
      r.t2 = std::stoi(item.substr(colon + 1, slash - colon - 1));
      r.t3 = std::stoi(item.substr(slash + 1));
    } catch (const std::exception&) {
      throw ValidationError("bad pool count '" + item + "'");
    }
    if (r.count <= 0 || r.t2 < 0 || r.t3 < 0 || r.t2 + r.t3 != r.count)
      throw ValidationError("pool '" + item + "': T2 + T3 must equal a positive count");
    out[item.substr(0, eq)] = r;
  }
  return out;
}

namespace {

CaseRole role_for_pool(const std::string& pool) {
  if (pool == "A") return CaseRole::TrainLabeled;
  if (pool == "B") return CaseRole::Eval;
  if (pool == "C") return CaseRole::StageOnly;
  if (pool == "D") return CaseRole::Generated;
  throw ValidationError("unknown pool '" + pool + "' (expected A, B, C or D)");
}

}  // namespace

Manifest generate_dataset(const fs::path& out_dir, const std::map<std::string, PoolRequest>& pools, std::uint64_t seed,
                          const PhantomConfig& cfg) {
  cfg.validate();
  Manifest m;
  m.root = out_dir;
  for (const char* p : {"A", "B", "C", "D"}) m.pools[p] = {};
  std::uint64_t pool_index = 0;
  for (const auto& [pool, req] : pools) {
    const CaseRole role = role_for_pool(pool);
    if (role == CaseRole::Generated) throw ValidationError("pool D is filled by progression simulation, not the phantom generator");
    std::vector<StageLabel> stages(static_cast<std::size_t>(req.t2), StageLabel::UnderT2);
    stages.insert(stages.end(), static_cast<std::size_t>(req.t3), StageLabel::OverT3);
    std::mt19937_64 order(derive_seed(seed, 1000 + pool_index));
    std::shuffle(stages.begin(), stages.end(), order);
    for (std::size_t i = 0; i < stages.size(); ++i) {
      Case c = generate_phantom(derive_seed(seed, pool_index * 100000 + i), stages[i], cfg);
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03zu", pool.c_str(), i);
      c.id = id;
      c.role = role;
      const fs::path rel = fs::path(pool) / c.id;
      if (role == CaseRole::StageOnly) {
        Case hidden = c;
        const fs::path hidden_rel = fs::path("hidden_oracle") / pool / c.id;
        save_volume_pack(hidden, out_dir / hidden_rel);
        m.hidden_oracle[pool].push_back(hidden_rel);
        c.labels.reset();
      }
      save_volume_pack(c, out_dir / rel);
      m.pools[pool].push_back(rel);
    }
    ++pool_index;
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (!j.contains("pools") || !j["pools"].is_object()) throw FormatError("manifest lacks a 'pools' object");
  Manifest m;
  m.root = path.parent_path();
  for (const auto& [pool, list] : j["pools"].items()) {
    auto& dst = m.pools[pool];
    for (const auto& p : list) dst.push_back(p.get<std::string>());
  }
  if (j.contains("hidden_oracle"))
    for (const auto& [pool, list] : j["hidden_oracle"].items())
      for (const auto& p : list) m.hidden_oracle[pool].push_back(p.get<std::string>());
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  json j;
  j["pools"] = json::object();
  for (const auto& [pool, list] : m.pools) {
    json arr = json::array();
    for (const auto& p : list) arr.push_back(p.generic_string());
    j["pools"][pool] = arr;
  }
  if (!m.hidden_oracle.empty()) {
    j["hidden_oracle"] = json::object();
    for (const auto& [pool, list] : m.hidden_oracle) {
      json arr = json::array();
      for (const auto& p : list) arr.push_back(p.generic_string());
      j["hidden_oracle"][pool] = arr;
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace stagekit
