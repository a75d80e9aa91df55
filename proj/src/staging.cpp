#include "stagekit/staging.hpp"

#include <array>

namespace stagekit {

using nlohmann::json;

Mask invasion_mask(const Mask& cancer, const Mask& rectum) {
  if (!(cancer.shape == rectum.shape)) throw ShapeError("invasion_mask: cancer and rectum shapes differ");
  Mask out(cancer.shape, cancer.spacing_mm);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (cancer.data[i] && !rectum.data[i]) ? 1 : 0;
  return out;
}

StageLabel classify_stage(const ProbabilityMaps& pred, const StagingRule& rule) {
  const auto& cancer = pred[Channel::Cancer];
  const auto& rectum = pred[Channel::Rectum];
  if (cancer.size() != rectum.size() || cancer.size() != pred.shape.voxels())
    throw ShapeError("classify_stage: channel sizes differ from shape");
  std::size_t n = 0;
  for (std::size_t i = 0; i < cancer.size(); ++i)
    if (cancer[i] > rule.threshold && !(rectum[i] > rule.threshold)) ++n;
  return n >= rule.min_invasion_voxels ? StageLabel::OverT3 : StageLabel::UnderT2;
}

StageLabel classify_stage(const LabelVolume& labels, const StagingRule& rule) {
  const std::uint8_t c = bit_value(LabelBit::Cancer), r = bit_value(LabelBit::Rectum);
  std::size_t n = 0;
  for (auto v : labels.data)
    if ((v & c) && !(v & r)) ++n;
  return n >= rule.min_invasion_voxels ? StageLabel::OverT3 : StageLabel::UnderT2;
}

double dice_score(const Mask& pred, const Mask& gt) {
  if (!(pred.shape == gt.shape)) throw ShapeError("dice_score: shapes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

Confusion staging_confusion(const std::vector<std::pair<StageLabel, StageLabel>>& pairs) {
  if (pairs.empty()) throw ValidationError("staging_confusion: empty prediction list");
  std::size_t gt_t3 = 0, ok_t3 = 0, gt_t2 = 0, ok_t2 = 0;
  for (const auto& [pred, gt] : pairs) {
    if (gt == StageLabel::OverT3) {
      ++gt_t3;
      ok_t3 += pred == StageLabel::OverT3;
    } else {
      ++gt_t2;
      ok_t2 += pred == StageLabel::UnderT2;
    }
  }
  Confusion c;
  if (gt_t3) c.sensitivity = static_cast<double>(ok_t3) / static_cast<double>(gt_t3);
  if (gt_t2) c.specificity = static_cast<double>(ok_t2) / static_cast<double>(gt_t2);
  return c;
}

namespace {

Mask binarize(const std::vector<double>& p, Shape3 shape, double threshold) {
  Mask m(shape, {});
  for (std::size_t i = 0; i < p.size(); ++i) m.data[i] = p[i] > threshold ? 1 : 0;
  return m;
}

}  // namespace

StagingReport evaluate_cases(const std::vector<ProbabilityMaps>& preds, const std::vector<Case>& refs,
                             const StagingRule& rule) {
  if (preds.size() != refs.size()) throw ValidationError("evaluate_cases: prediction and reference counts differ");
  StagingReport report;
  std::array<double, 4> dice_sum{};
  std::vector<std::pair<StageLabel, StageLabel>> pairs;

  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& ref = refs[k];
    const auto& pred = preds[k];
    if (!(pred.shape == ref.image.shape)) throw ShapeError("evaluate_cases: prediction shape differs for case " + ref.id);
    std::optional<StageLabel> gt_stage = ref.stage;
    if (ref.labels) {
      const Mask p_meso = binarize(pred[Channel::Mesorectum], pred.shape, rule.threshold);
      const Mask p_rect = binarize(pred[Channel::Rectum], pred.shape, rule.threshold);
      const Mask p_canc = binarize(pred[Channel::Cancer], pred.shape, rule.threshold);
      const Mask g_meso = extract_bit(*ref.labels, LabelBit::Mesorectum);
      const Mask g_rect = extract_bit(*ref.labels, LabelBit::Rectum);
      const Mask g_canc = extract_bit(*ref.labels, LabelBit::Cancer);
      dice_sum[0] += dice_score(p_meso, g_meso);
      dice_sum[1] += dice_score(p_rect, g_rect);
      dice_sum[2] += dice_score(p_canc, g_canc);
      dice_sum[3] += dice_score(invasion_mask(p_canc, p_rect), invasion_mask(g_canc, g_rect));
      ++report.labeled_cases;
      if (!gt_stage) gt_stage = classify_stage(*ref.labels, rule);
    }
    if (gt_stage) {
      const StageLabel predicted = classify_stage(pred, rule);
      pairs.emplace_back(predicted, *gt_stage);
      report.per_case_stages.push_back({ref.id, predicted, *gt_stage});
    }
  }
  if (report.labeled_cases == 0 && pairs.empty())
    throw ValidationError("evaluate_cases: no reference case carries labels or a stage");
  if (report.labeled_cases) {
    const double n = static_cast<double>(report.labeled_cases);
    report.dice = {dice_sum[0] / n, dice_sum[1] / n, dice_sum[2] / n, dice_sum[3] / n};
  }
  if (!pairs.empty()) {
    const auto c = staging_confusion(pairs);
    report.sensitivity = c.sensitivity;
    report.specificity = c.specificity;
  }
  return report;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

json to_json(const StagingReport& r) {
  json j;
  j["dice"] = {{"mesorectum", opt(r.dice.mesorectum)},
               {"rectum", opt(r.dice.rectum)},
               {"cancer", opt(r.dice.cancer)},
               {"invasion_area", opt(r.dice.invasion_area)}};
  j["sensitivity"] = opt(r.sensitivity);
  j["specificity"] = opt(r.specificity);
  j["labeled_cases"] = r.labeled_cases;
  j["cases"] = json::array();
  for (const auto& c : r.per_case_stages)
    j["cases"].push_back({{"id", c.id},
                          {"predicted", std::string(stage_name(c.predicted))},
                          {"ground_truth", std::string(stage_name(c.ground_truth))}});
  return j;
}

StagingReport report_from_json(const json& j) {
  StagingReport r;
  const auto& d = j.at("dice");
  r.dice = {opt_from(d, "mesorectum"), opt_from(d, "rectum"), opt_from(d, "cancer"), opt_from(d, "invasion_area")};
  r.sensitivity = opt_from(j, "sensitivity");
  r.specificity = opt_from(j, "specificity");
  r.labeled_cases = j.value("labeled_cases", std::size_t{0});
  for (const auto& c : j.at("cases"))
    r.per_case_stages.push_back({c.at("id").get<std::string>(), parse_stage(c.at("predicted").get<std::string>()),
                                 parse_stage(c.at("ground_truth").get<std::string>())});
  return r;
}

}  // namespace stagekit
