#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stagekit/error.hpp"

namespace stagekit {

/// Voxel counts in (z, y, x) order; storage is z-major (x fastest).
struct Shape3 {
  std::int64_t z = 0, y = 0, x = 0;

  std::size_t voxels() const { return static_cast<std::size_t>(z * y * x); }
  std::size_t index(std::int64_t zi, std::int64_t yi, std::int64_t xi) const {
    return static_cast<std::size_t>((zi * y + yi) * x + xi);
  }
  bool contains(std::int64_t zi, std::int64_t yi, std::int64_t xi) const {
    return zi >= 0 && yi >= 0 && xi >= 0 && zi < z && yi < y && xi < x;
  }
  std::int64_t operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Physical voxel size in millimetres, (z, y, x) order.
struct Spacing3 {
  double z = 1.0, y = 1.0, x = 1.0;

  double operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
  bool valid() const { return z > 0 && y > 0 && x > 0; }
  friend bool operator==(const Spacing3&, const Spacing3&) = default;
};

template <typename T>
struct Volume {
  Shape3 shape;
  Spacing3 spacing_mm;
  std::vector<T> data;

  Volume() = default;
  Volume(Shape3 s, Spacing3 sp, T fill = T{}) : shape(s), spacing_mm(sp), data(s.voxels(), fill) {}

  T& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[shape.index(z, y, x)]; }
  const T& at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[shape.index(z, y, x)]; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Volume&, const Volume&) = default;
};

using ImageVolume = Volume<float>;
/// Per-voxel bitmask, see LabelBit. Labels may overlap.
using LabelVolume = Volume<std::uint8_t>;
/// Binary 0/1 volume.
using Mask = Volume<std::uint8_t>;

enum class LabelBit : std::uint8_t {
  Mesorectum = 0,
  Rectum = 1,
  Cancer = 2,
  Bladder = 3,
  Prostate = 4,
  Pelvis = 5,
};
inline constexpr int kLabelBitCount = 6;
inline constexpr std::uint8_t kDefinedBitsMask = 0x3F;

constexpr std::uint8_t bit_value(LabelBit b) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(b)); }
std::string_view label_bit_name(LabelBit b);

/// Extracts one bit of a label volume as a 0/1 mask.
Mask extract_bit(const LabelVolume& labels, LabelBit b);
/// Overwrites one bit of `labels` from a 0/1 mask of equal shape.
void assign_bit(LabelVolume& labels, LabelBit b, const Mask& mask);
std::size_t count_nonzero(const Mask& mask);

enum class StageLabel { UnderT2, OverT3 };

std::string_view stage_name(StageLabel s);
StageLabel parse_stage(std::string_view s);
/// g_STG: OverT3 -> 1, UnderT2 -> 0.
inline double stage_indicator(StageLabel s) { return s == StageLabel::OverT3 ? 1.0 : 0.0; }

enum class CaseRole { TrainLabeled, Eval, StageOnly, Generated };

std::string_view role_name(CaseRole r);
CaseRole parse_role(std::string_view s);

struct Case {
  std::string id;
  ImageVolume image;
  std::optional<LabelVolume> labels;
  std::optional<StageLabel> stage;
  CaseRole role = CaseRole::TrainLabeled;

  friend bool operator==(const Case&, const Case&) = default;
};

/// Throws ValidationError when a Case breaks the container invariants.
void validate_case(const Case& c);

/// Network output channels.
enum class Channel : int { Mesorectum = 0, Rectum = 1, Cancer = 2 };
inline constexpr int kOutputChannels = 3;

/// Independent per-class probabilities in [0,1] (multi-label, not softmax).
struct ProbabilityMaps {
  Shape3 shape;
  std::array<std::vector<double>, kOutputChannels> channels;

  ProbabilityMaps() = default;
  explicit ProbabilityMaps(Shape3 s, double fill = 0.0) : shape(s) {
    for (auto& ch : channels) ch.assign(s.voxels(), fill);
  }

  std::vector<double>& operator[](Channel c) { return channels[static_cast<int>(c)]; }
  const std::vector<double>& operator[](Channel c) const { return channels[static_cast<int>(c)]; }
};

/// Hard 0/1 probabilities from the mesorectum/rectum/cancer bits.
ProbabilityMaps probabilities_from_labels(const LabelVolume& labels);
/// Thresholds each channel (p > threshold) into a label bitmask.
LabelVolume labels_from_probabilities(const ProbabilityMaps& p, double threshold, Spacing3 spacing);

}  // namespace stagekit
