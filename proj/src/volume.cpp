#include "stagekit/volume.hpp"

#include <algorithm>
#include <cmath>

namespace stagekit {

std::string_view label_bit_name(LabelBit b) {
  switch (b) {
    case LabelBit::Mesorectum: return "mesorectum";
    case LabelBit::Rectum: return "rectum";
    case LabelBit::Cancer: return "cancer";
    case LabelBit::Bladder: return "bladder";
    case LabelBit::Prostate: return "prostate";
    case LabelBit::Pelvis: return "pelvis";
  }
  return "unknown";
}

Mask extract_bit(const LabelVolume& labels, LabelBit b) {
  Mask m(labels.shape, labels.spacing_mm);
  const std::uint8_t v = bit_value(b);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = (labels.data[i] & v) ? 1 : 0;
  return m;
}

void assign_bit(LabelVolume& labels, LabelBit b, const Mask& mask) {
  if (!(labels.shape == mask.shape)) throw ShapeError("assign_bit: mask shape differs from label shape");
  const std::uint8_t v = bit_value(b);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (mask.data[i])
      labels.data[i] |= v;
    else
      labels.data[i] &= static_cast<std::uint8_t>(~v);
  }
}

std::size_t count_nonzero(const Mask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.data.begin(), mask.data.end(), [](auto v) { return v != 0; }));
}

std::string_view stage_name(StageLabel s) { return s == StageLabel::OverT3 ? "OVER_T3" : "UNDER_T2"; }

StageLabel parse_stage(std::string_view s) {
  if (s == "OVER_T3") return StageLabel::OverT3;
  if (s == "UNDER_T2") return StageLabel::UnderT2;
  throw FormatError("unknown stage label '" + std::string(s) + "'");
}

std::string_view role_name(CaseRole r) {
  switch (r) {
    case CaseRole::TrainLabeled: return "TRAIN_LABELED";
    case CaseRole::Eval: return "EVAL";
    case CaseRole::StageOnly: return "STAGE_ONLY";
    case CaseRole::Generated: return "GENERATED";
  }
  return "UNKNOWN";
}

CaseRole parse_role(std::string_view s) {
  if (s == "TRAIN_LABELED") return CaseRole::TrainLabeled;
  if (s == "EVAL") return CaseRole::Eval;
  if (s == "STAGE_ONLY") return CaseRole::StageOnly;
  if (s == "GENERATED") return CaseRole::Generated;
  throw FormatError("unknown case role '" + std::string(s) + "'");
}

void validate_case(const Case& c) {
  if (!c.image.spacing_mm.valid()) throw ValidationError("case " + c.id + ": spacing must be positive");
  if (c.image.data.size() != c.image.shape.voxels())
    throw ValidationError("case " + c.id + ": image data size does not match shape");
  for (float v : c.image.data)
    if (!std::isfinite(v)) throw ValidationError("case " + c.id + ": image contains non-finite intensity");
  if (c.labels) {
    if (!(c.labels->shape == c.image.shape)) throw ValidationError("case " + c.id + ": label shape differs from image");
    if (!(c.labels->spacing_mm == c.image.spacing_mm))
      throw ValidationError("case " + c.id + ": label spacing differs from image");
    if (c.labels->data.size() != c.labels->shape.voxels())
      throw ValidationError("case " + c.id + ": label data size does not match shape");
    for (auto v : c.labels->data)
      if (v & ~kDefinedBitsMask) throw ValidationError("case " + c.id + ": undefined label bit set");
  }
  if (c.role == CaseRole::Generated && !c.labels)
    throw ValidationError("case " + c.id + ": GENERATED role requires labels");
}

ProbabilityMaps probabilities_from_labels(const LabelVolume& labels) {
  ProbabilityMaps p(labels.shape);
  const std::uint8_t bits[kOutputChannels] = {bit_value(LabelBit::Mesorectum), bit_value(LabelBit::Rectum),
                                              bit_value(LabelBit::Cancer)};
  for (int c = 0; c < kOutputChannels; ++c)
    for (std::size_t i = 0; i < labels.size(); ++i) p.channels[c][i] = (labels.data[i] & bits[c]) ? 1.0 : 0.0;
  return p;
}

LabelVolume labels_from_probabilities(const ProbabilityMaps& p, double threshold, Spacing3 spacing) {
  LabelVolume out(p.shape, spacing);
  const std::uint8_t bits[kOutputChannels] = {bit_value(LabelBit::Mesorectum), bit_value(LabelBit::Rectum),
                                              bit_value(LabelBit::Cancer)};
  for (int c = 0; c < kOutputChannels; ++c)
    for (std::size_t i = 0; i < out.size(); ++i)
      if (p.channels[c][i] > threshold) out.data[i] |= bits[c];
  return out;
}

}  // namespace stagekit
