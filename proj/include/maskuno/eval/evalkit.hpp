// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskuno/core/types.hpp"
#include "maskuno/synth/shapesynth.hpp"

namespace maskuno::eval {

using core::Detection;
using synth::InstanceAnnotation;
using synth::SceneSample;

enum class IouKind { Mask, Box };

inline constexpr int kMaxDetections = 100;
inline constexpr int kRecallPoints = 101;
/// IoU thresholds .50:.05:.95.
std::array<double, 10> iou_thresholds();

/// Area range with COCO's inclusive bounds. Ground truth outside the range is ignored.
struct AreaRange {
  double lo = 0.0;
  double hi = 1e10;
  bool contains(double area) const { return area >= lo && area <= hi; }
};

/// COCO's 32^2 / 96^2 limits scaled by (image area / 640^2).
struct AreaBuckets {
  AreaRange all, small, medium, large;
};
AreaBuckets area_buckets(int image_width, int image_height);

/// Result of greedy matching on one image for one class, in the caller's detection order.
struct MatchResult {
  std::vector<int> matched_gt;       // -1 when unmatched
  std::vector<bool> ignored;         // detection does not count as TP or FP
  std::vector<bool> gt_ignored;
};

/// Greedy matching: detections in descending score order (stable, ties by index) take the unmatched
/// ground truth of highest IoU >= threshold, preferring non-ignored ground truth.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<InstanceAnnotation>& gts,
                             double iou_threshold, IouKind kind, const AreaRange& range = {});

/// IoU-matrix form of the same rule (rows = detections, already in the caller's order).
MatchResult match_by_iou(const std::vector<double>& scores, const std::vector<std::vector<double>>& iou,
                         double iou_threshold, const std::vector<bool>& gt_ignored,
                         const std::vector<bool>& det_outside_range);

struct ScoredLabel {
  double score = 0.0;
  bool true_positive = false;
};

/// 101-point interpolated AP over pooled detections; nullopt when num_gt == 0. Detections with equal
/// scores form one operating point, so the result does not depend on their order.
std::optional<double> average_precision(std::vector<ScoredLabel> labels, int num_gt);

struct ApBreakdown {
  std::optional<double> ap, ap50, ap75, aps, apm, apl;

  std::vector<std::optional<double>> values() const { return {ap, ap50, ap75, aps, apm, apl}; }
  static const std::array<const char*, 6>& names();
};

/// Predictions per image, aligned with the samples.
using Predictions = std::vector<std::vector<Detection>>;

/// Class-restricted AP breakdown over the given samples.
ApBreakdown evaluate(const std::vector<SceneSample>& samples, const Predictions& predictions, int class_id,
                     IouKind kind = IouKind::Mask);

/// Ground truth as predictions with score 1.
Predictions ground_truth_predictions(const std::vector<SceneSample>& samples);

struct ClassResult {
  int class_id = 0;
  std::string name;
  int images = 0;
  int instances = 0;
  std::string subset_digest;
  ApBreakdown breakdown;
  std::optional<std::string> warning;
};

/// One side of a before/after comparison.
struct EvalHalf {
  std::string model_tag;
  std::string checkpoint_digest;
  std::string dataset_digest;
  IouKind kind = IouKind::Mask;
  std::vector<ClassResult> classes;

  /// Mean of the per-class AP over classes where it is defined.
  std::optional<double> mean_ap() const;
};

nlohmann::json to_json(const EvalHalf& half);
EvalHalf half_from_json(const nlohmann::json& j);
void write_half(const EvalHalf& half, const std::filesystem::path& path);
EvalHalf read_half(const std::filesystem::path& path);

using Predictor = std::function<std::vector<Detection>(const SceneSample&)>;

/// Runs the predictor on every per-class validation sub-dataset.
EvalHalf evaluate_per_class(const std::vector<SceneSample>& val, int num_classes, const Predictor& predict,
                            const std::string& model_tag, const std::string& checkpoint_digest,
                            const std::string& dataset_digest, IouKind kind = IouKind::Mask);

/// Same, from precomputed predictions aligned with val.
EvalHalf evaluate_per_class(const std::vector<SceneSample>& val, int num_classes, const Predictions& predictions,
                            const std::string& model_tag, const std::string& checkpoint_digest,
                            const std::string& dataset_digest, IouKind kind = IouKind::Mask);

struct ClassDelta {
  int class_id = 0;
  std::string name;
  ApBreakdown before, after;
  std::array<std::optional<double>, 6> delta;
};

struct EvalReport {
  EvalHalf before, after;
  std::vector<ClassDelta> rows;
  std::optional<double> mean_before, mean_after, mean_delta;
};

std::optional<double> difference(const std::optional<double>& after, const std::optional<double>& before);
/// Mean of the defined values.
std::optional<double> mean_defined(const std::vector<std::optional<double>>& values);

/// Throws Incomparable when datasets, sub-datasets or class lists differ.
EvalReport compare_reports(const EvalHalf& before, const EvalHalf& after);

nlohmann::json to_json(const EvalReport& report);
std::string render_table(const EvalReport& report);
std::string render_csv(const EvalReport& report);
/// Bar chart with one before/after pair per report (mean AP) followed by per-class pairs.
std::string render_bar_chart(const std::vector<EvalReport>& reports);

struct MisroutingStats {
  int dispatched = 0;
  int matched = 0;
  int misrouted = 0;
  int background = 0;
  std::optional<double> rate() const;
};

/// One dispatched ROI: its box and the class the switch chose.
struct RoutedRoi {
  core::Box box;
  int routed_class = 0;
};

/// Each ROI is matched to the ground truth of best box IoU; below 0.5 it counts as background.
void accumulate_misrouting(const std::vector<RoutedRoi>& rois, const std::vector<InstanceAnnotation>& gts,
                           MisroutingStats& stats);

}  // namespace maskuno::eval
