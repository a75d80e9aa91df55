#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "stagekit/morphology.hpp"
#include "stagekit/preprocess.hpp"
#include "stagekit/volume_pack.hpp"
#include "test_util.hpp"

using namespace stagekit;
using stagekit::testing::TempDir;

namespace {

Case random_case(Shape3 s, std::uint64_t seed, bool with_labels, std::optional<StageLabel> stage, CaseRole role) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.f, 100.f);
  Case c;
  c.id = "case_" + std::to_string(seed);
  c.image = ImageVolume(s, {0.5, 0.75, 1.25});
  for (auto& v : c.image.data) v = n(rng);
  if (with_labels) {
    c.labels = LabelVolume(s, c.image.spacing_mm);
    std::uniform_int_distribution<int> bits(0, kDefinedBitsMask);
    for (auto& v : c.labels->data) v = static_cast<std::uint8_t>(bits(rng));
  }
  c.stage = stage;
  c.role = role;
  return c;
}

void write_raw(const std::filesystem::path& p, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary);
  std::vector<char> zeros(bytes, 0);
  out.write(zeros.data(), static_cast<std::streamsize>(zeros.size()));
}

void write_header(const std::filesystem::path& dir, const nlohmann::json& h) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "header.json") << h.dump();
}

nlohmann::json basic_header() {
  return {{"shape", {8, 8, 8}},       {"spacing_mm", {0.5, 0.5, 0.5}}, {"byte_order", "LE"},
          {"image_dtype", "float32"}, {"label_dtype", "uint8"},        {"stage", nullptr},
          {"role", "EVAL"}};
}

}  // namespace

TEST_CASE("load_volume_pack reads a float32 image of the declared size") {
  TempDir tmp;
  write_header(tmp.path(), basic_header());
  write_raw(tmp.path() / "image.raw", 2048);
  const Case c = load_volume_pack(tmp.path());
  CHECK(c.image.size() == 512);
  CHECK(c.image.shape == Shape3{8, 8, 8});
  CHECK(c.image.spacing_mm == Spacing3{0.5, 0.5, 0.5});
  CHECK_FALSE(c.labels.has_value());
  CHECK(c.role == CaseRole::Eval);
}

TEST_CASE("load_volume_pack error paths") {
  TempDir tmp;
  SUBCASE("missing header is a format error") {
    write_raw(tmp.path() / "image.raw", 2048);
    CHECK_THROWS_AS(load_volume_pack(tmp.path()), FormatError);
  }
  SUBCASE("declared labels without labels.raw is corruption") {
    auto h = basic_header();
    h["label_bits"] = {{"mesorectum", 0}, {"rectum", 1}, {"cancer", 2}};
    write_header(tmp.path(), h);
    write_raw(tmp.path() / "image.raw", 2048);
    CHECK_THROWS_AS(load_volume_pack(tmp.path()), CorruptionError);
  }
  SUBCASE("image length mismatch is corruption") {
    write_header(tmp.path(), basic_header());
    write_raw(tmp.path() / "image.raw", 2047);
    CHECK_THROWS_AS(load_volume_pack(tmp.path()), CorruptionError);
  }
  SUBCASE("label length mismatch is corruption") {
    auto h = basic_header();
    h["label_bits"] = {{"cancer", 2}};
    write_header(tmp.path(), h);
    write_raw(tmp.path() / "image.raw", 2048);
    write_raw(tmp.path() / "labels.raw", 511);
    CHECK_THROWS_AS(load_volume_pack(tmp.path()), CorruptionError);
  }
}

TEST_CASE("save/load round trip is bit-exact for every role and optional field combination") {
  TempDir tmp;
  std::uint64_t seed = 1;
  for (CaseRole role : {CaseRole::TrainLabeled, CaseRole::Eval, CaseRole::StageOnly, CaseRole::Generated})
    for (bool labels : {false, true})
      for (std::optional<StageLabel> stage :
           {std::optional<StageLabel>{}, std::optional{StageLabel::UnderT2}, std::optional{StageLabel::OverT3}}) {
        if (role == CaseRole::Generated && !labels) continue;
        const Case c = random_case({3, 5, 7}, seed++, labels, stage, role);
        const auto dir = tmp.path() / c.id;
        save_volume_pack(c, dir);
        const Case back = load_volume_pack(dir);
        CHECK(back == c);
      }
}

TEST_CASE("save_volume_pack omits label entries when labels are absent") {
  TempDir tmp;
  const Case c = random_case({2, 2, 2}, 7, false, StageLabel::OverT3, CaseRole::StageOnly);
  save_volume_pack(c, tmp.path());
  std::ifstream in(tmp.path() / "header.json");
  const auto h = nlohmann::json::parse(in);
  CHECK_FALSE(h.contains("label_bits"));
  CHECK_FALSE(std::filesystem::exists(tmp.path() / "labels.raw"));
  CHECK(h["stage"] == "OVER_T3");
}

TEST_CASE("save_volume_pack validation and I/O errors") {
  TempDir tmp;
  Case c = random_case({2, 2, 2}, 3, true, std::nullopt, CaseRole::Eval);
  c.image.data[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(save_volume_pack(c, tmp.path() / "nan"), ValidationError);

  const Case ok = random_case({2, 2, 2}, 4, false, std::nullopt, CaseRole::Eval);
  std::ofstream(tmp.path() / "plainfile") << "x";
  CHECK_THROWS_AS(save_volume_pack(ok, tmp.path() / "plainfile" / "sub"), IoError);
}

TEST_CASE("resample_isotropic") {
  SUBCASE("factor-2 upsampling doubles the shape") {
    ImageVolume v({10, 10, 10}, {1, 1, 1}, 0.0f);
    const auto out = resample_isotropic(v, 0.5);
    CHECK(out.shape == Shape3{20, 20, 20});
    CHECK(out.spacing_mm == Spacing3{0.5, 0.5, 0.5});
  }
  SUBCASE("already at target spacing is returned unchanged") {
    ImageVolume v({4, 5, 6}, {0.5, 0.5, 0.5});
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& x : v.data) x = u(rng);
    CHECK(resample_isotropic(v, 0.5) == v);
  }
  SUBCASE("constant image stays constant") {
    ImageVolume v({7, 9, 5}, {1.3, 0.8, 1.1}, 0.37f);
    const auto out = resample_isotropic(v, 0.5);
    for (float x : out.data) CHECK(x == doctest::Approx(0.37f).epsilon(1e-6));
  }
  SUBCASE("degenerate output shape is rejected") {
    ImageVolume v({1, 4, 4}, {0.1, 1, 1});
    CHECK_THROWS_AS(resample_isotropic(v, 0.5), ShapeError);
  }
}

TEST_CASE("label resampling keeps per-bit component counts for solid spheres") {
  const Spacing3 sp{1.1, 0.8, 0.7};
  const Shape3 s{30, 40, 44};
  LabelVolume labels(s, sp, 0);
  const auto rectum = stagekit::testing::sphere_mask(s, sp, {16, 15, 15}, 6.0);
  const auto cancer_a = stagekit::testing::sphere_mask(s, sp, {16, 15, 15}, 3.5);
  const auto cancer_b = stagekit::testing::sphere_mask(s, sp, {14, 22, 22}, 4.0);
  Mask cancer(s, sp);
  for (std::size_t i = 0; i < cancer.size(); ++i) cancer.data[i] = cancer_a.data[i] | cancer_b.data[i];
  assign_bit(labels, LabelBit::Rectum, rectum);
  assign_bit(labels, LabelBit::Cancer, cancer);

  const auto out = resample_isotropic(labels, 0.5);
  for (LabelBit b : {LabelBit::Rectum, LabelBit::Cancer}) {
    const auto before = connected_components(extract_bit(labels, b));
    const auto after = connected_components(extract_bit(out, b));
    CHECK(before.count == after.count);
  }
  CHECK(connected_components(extract_bit(out, LabelBit::Cancer)).count == 2);
}

TEST_CASE("crop_around_label") {
  const Shape3 s{40, 50, 60};
  Case c;
  c.id = "crop";
  c.image = ImageVolume(s, {0.5, 0.5, 0.5}, 1.0f);
  c.labels = LabelVolume(s, c.image.spacing_mm, 0);
  const CropConfig cfg{Shape3{10, 12, 14}, Shape3{20, 24, 28}};

  SUBCASE("centred interior window has no padding") {
    c.labels->at(20, 25, 30) = bit_value(LabelBit::Cancer);
    const Case out = crop_around_label(c, Phase::Train, cfg);
    CHECK(out.image.shape == Shape3{10, 12, 14});
    for (float v : out.image.data) CHECK(v == 1.0f);
    CHECK(out.labels->at(5, 6, 7) == bit_value(LabelBit::Cancer));
  }
  SUBCASE("corner centroid pads with zeros but keeps the exact shape") {
    c.labels->at(0, 0, 0) = bit_value(LabelBit::Cancer);
    const Case out = crop_around_label(c, Phase::Eval, cfg);
    CHECK(out.image.shape == Shape3{20, 24, 28});
    CHECK(out.image.at(0, 0, 0) == 0.0f);
    CHECK(out.image.at(19, 23, 27) == 1.0f);
    CHECK(out.labels->at(10, 12, 14) == bit_value(LabelBit::Cancer));
  }
  SUBCASE("empty cancer label is rejected") { CHECK_THROWS_AS(crop_around_label(c, Phase::Train, cfg), ValidationError); }
}

TEST_CASE("crop output shape matches the phase window for arbitrary geometry") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 30);
  const CropConfig cfg = CropConfig::phantom();
  for (int trial = 0; trial < 25; ++trial) {
    const Shape3 s{dim(rng), dim(rng), dim(rng)};
    Case c;
    c.image = ImageVolume(s, {1, 1, 1}, 0.5f);
    c.labels = LabelVolume(s, {1, 1, 1}, 0);
    std::uniform_int_distribution<std::int64_t> zi(0, s.z - 1), yi(0, s.y - 1), xi(0, s.x - 1);
    c.labels->at(zi(rng), yi(rng), xi(rng)) = bit_value(LabelBit::Cancer);
    for (Phase p : {Phase::Train, Phase::Eval}) {
      const Case out = crop_around_label(c, p, cfg);
      CHECK(out.image.shape == cfg.for_phase(p));
      CHECK(out.labels->shape == cfg.for_phase(p));
      CHECK(count_nonzero(extract_bit(*out.labels, LabelBit::Cancer)) == 1);
    }
  }
}

TEST_CASE("percentile_normalize") {
  SUBCASE("uniform 0..100 with 0/100 percentiles maps 50 to 0.5") {
    ImageVolume v({1, 1, 101}, {1, 1, 1});
    for (int i = 0; i <= 100; ++i) v.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
    const auto out = percentile_normalize(v, 0, 100);
    CHECK(out.data[50] == doctest::Approx(0.5));
    CHECK(out.data[0] == 0.0f);
    CHECK(out.data[100] == 1.0f);
  }
  SUBCASE("constant image maps to zeros") {
    ImageVolume v({3, 3, 3}, {1, 1, 1}, 4.0f);
    for (float x : percentile_normalize(v).data) CHECK(x == 0.0f);
  }
  SUBCASE("output percentiles land on 0 and 1 (sort oracle)") {
    ImageVolume v({16, 16, 16}, {1, 1, 1});
    std::mt19937_64 rng(5);
    std::gamma_distribution<float> g(2.0f, 30.0f);
    for (auto& x : v.data) x = g(rng);
    const auto out = percentile_normalize(v, 1.0, 99.0);
    std::vector<double> sorted(out.data.begin(), out.data.end());
    std::sort(sorted.begin(), sorted.end());
    auto oracle = [&](double pct) {
      const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
      return sorted[static_cast<std::size_t>(std::llround(pos))];
    };
    CHECK(std::abs(oracle(1.0)) < 1e-6);
    CHECK(std::abs(oracle(99.0) - 1.0) < 1e-6);
    for (float x : out.data) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
  SUBCASE("idempotent up to clamping") {
    ImageVolume v({10, 12, 14}, {1, 1, 1});
    std::mt19937_64 rng(9);
    std::normal_distribution<float> n(300.f, 80.f);
    for (auto& x : v.data) x = n(rng);
    const auto once = percentile_normalize(v);
    const auto twice = percentile_normalize(once);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(once.data[i] - twice.data[i]) <= 1e-6);
  }
  SUBCASE("bad percentile order") {
    ImageVolume v({2, 2, 2}, {1, 1, 1}, 1.0f);
    CHECK_THROWS_AS(percentile_normalize(v, 50, 50), ValidationError);
  }
}
