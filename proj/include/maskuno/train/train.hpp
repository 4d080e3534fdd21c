// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskuno/losses/losses.hpp"
#include "maskuno/pipeline/checkpoint.hpp"
#include "maskuno/pipeline/inference.hpp"
#include "maskuno/split/switch_split.hpp"
#include "maskuno/synth/shapesynth.hpp"

namespace maskuno::train {

using core::Box;
using pipeline::FeatureMap;
using pipeline::PipelineModel;
using split::MaskUnoModel;
using synth::SceneSample;

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Learning rate is multiplied by lr_gamma once epoch >= floor(lr_step_fraction * epochs).
  double lr_step_fraction = 2.0 / 3.0;
  double lr_gamma = 0.1;
  int batch_size = 8;
  int epochs = 12;
  int head_epochs = 4;
  double plateau_delta = 0.002;
  int plateau_window = 3;
  /// Validation images used for the plateau metric; 0 uses the whole split.
  int eval_samples = 0;
  std::uint64_t seed = 1;

  int rois_per_image = 64;
  double positive_fraction = 0.25;
  double positive_iou = 0.5;
  int gt_jitter_draws = 4;
  double gt_jitter = 0.15;
  int random_rois = 16;
  int train_proposals = 32;

  int rpn_batch = 128;
  double rpn_positive_fraction = 0.5;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;

  losses::Reduction mask_reduction = losses::Reduction::Mean;
  /// Structured metric log (one JSON object per line); empty disables it.
  std::string log_path;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

double learning_rate_at(const TrainConfig& config, int epoch, int total_epochs);

/// True when max(last window) - max(everything before) < delta.
bool plateau_reached(const std::vector<double>& history, int window, double delta);

/// SGD with momentum and weight decay: v = m v + (g + wd w); w -= lr v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const std::vector<pipeline::ParamSlot>& params, double lr);

 private:
  double momentum_, weight_decay_;
  std::map<std::string, core::Tensor> velocity_;
};

/// A training ROI and the ground truth it was assigned to (-1 = background).
struct RoiTarget {
  Box box;
  int label = 0;
  int gt_index = -1;
};

/// Box-IoU assignment of candidates to ground truth, then positive/negative sampling.
std::vector<RoiTarget> assign_rois(const std::vector<Box>& candidates, const SceneSample& sample, double positive_iou);
std::vector<RoiTarget> sample_rois(std::vector<RoiTarget> assigned, int max_rois, double positive_fraction,
                                   core::Rng& rng);

struct LossBreakdown {
  double rpn_objectness = 0.0;
  double rpn_box = 0.0;
  double cls = 0.0;
  double box = 0.0;
  double mask = 0.0;
  int positives = 0;
  int rois = 0;

  double total() const { return rpn_objectness + rpn_box + cls + box + mask; }
  LossBreakdown& operator+=(const LossBreakdown& o);
};

/// Loss of one image; when backward is set, gradients scaled by grad_scale are added to the model.
/// rois == nullptr samples them from roi_candidates with rng.
LossBreakdown image_loss(PipelineModel& model, const SceneSample& sample, const std::vector<RoiTarget>* rois,
                         const TrainConfig& config, core::Rng& rng, bool backward, double grad_scale = 1.0);

/// Candidate boxes for ROI sampling: ground truth, jittered ground truth, learned proposals, random boxes.
std::vector<Box> roi_candidates(const PipelineModel& model, const FeatureMap& fm, const SceneSample& sample,
                                const TrainConfig& config, core::Rng& rng);

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  LossBreakdown mean_loss;
  std::optional<double> val_map;
};

struct BaselineResult {
  PipelineModel model;
  std::vector<EpochRecord> history;
  bool plateaued = false;
};

using EvalHook = std::function<double(const PipelineModel&)>;

/// Joint training of every sub-head; stops at the plateau rule or the epoch cap.
/// eval_hook supplies the validation metric; without it the plateau rule is not applied.
BaselineResult train_baseline(const std::vector<SceneSample>& train, const pipeline::PipelineConfig& model_config,
                              const TrainConfig& config, const EvalHook& eval_hook = {});

/// Mean mask AP over per-class validation sub-datasets.
double validation_map(const PipelineModel& model, const std::vector<SceneSample>& val, int num_classes);

pipeline::CheckpointRecord baseline_record(const BaselineResult& result, const TrainConfig& config);

/// Features and proposals of the frozen base for every training image.
struct FeatureCache {
  std::vector<FeatureMap> features;
  std::vector<std::vector<pipeline::Proposal>> proposals;
};

FeatureCache build_feature_cache(const PipelineModel& base, const std::vector<SceneSample>& samples,
                                 int proposals_per_image);

struct HeadMetrics {
  int class_id = 0;
  int epochs = 0;
  int steps = 0;
  int positives_seen = 0;
  /// Mean mask loss on a fixed probe set of positive ROIs.
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;
};

nlohmann::json to_json(const HeadMetrics& m);

/// Trains the head of one class in place, reading only the cache and the samples.
/// Only that head's parameters change.
HeadMetrics train_head(split::SingleClassMaskHead& head, const std::vector<SceneSample>& samples,
                       const FeatureCache& cache, const TrainConfig& config);

/// train_head on model.heads.at(class_id), with metadata written to the model's provenance.
HeadMetrics train_class_head(MaskUnoModel& model, int class_id, const std::vector<SceneSample>& samples,
                             const FeatureCache& cache, const TrainConfig& config);

enum class HeadMode { Sequential, Parallel };
std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& text);

/// Trains the listed classes. Parallel mode runs up to `jobs` classes at once (0 = one per class).
std::vector<HeadMetrics> train_all_heads(MaskUnoModel& model, const std::vector<int>& classes,
                                         const std::vector<SceneSample>& samples, const FeatureCache& cache,
                                         const TrainConfig& config, HeadMode mode, int jobs = 0);

/// Zeroes all gradients, runs every registry head on the ROI and back-propagates the mask loss of
/// class_id alone through the whole graph (into the base only when it is not frozen).
double backward_single_mask_loss(MaskUnoModel& model, const core::Tensor& image, const Box& roi, int class_id,
                                 const core::BinaryMask& target, losses::Reduction reduction);

/// Trains the classifier and box regressor of one extra cascade stage on boxes refined by the stages before it.
std::vector<double> train_cascade_stage(split::CascadeModel& model, int stage_number,
                                        const std::vector<SceneSample>& samples, const FeatureCache& cache,
                                        const TrainConfig& config);

}  // namespace maskuno::train
