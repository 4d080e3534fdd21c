// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskuno/pipeline/checkpoint.hpp"
#include "maskuno/pipeline/inference.hpp"
#include "maskuno/pipeline/model.hpp"

namespace maskuno::split {

using core::Box;
using core::Detection;
using core::Tensor;
using pipeline::ConstParamSlot;
using pipeline::FeatureMap;
using pipeline::InferenceOptions;
using pipeline::MaskHead;
using pipeline::ParamSlot;
using pipeline::PipelineConfig;
using pipeline::PipelineModel;
using pipeline::RoiFeature;

/// Foreground class id for a distribution, or nullopt when background wins.
/// Argmax over all N+1 entries with ties going to the lowest id.
std::optional<int> route(const core::ClassDistribution& dist);
/// Validates raw probabilities first.
std::optional<int> route(std::span<const double> probs);

/// Mask head with a single logit plane, owned by one class.
class SingleClassMaskHead {
 public:
  SingleClassMaskHead() = default;
  SingleClassMaskHead(const PipelineConfig& config, int class_id);

  Tensor forward(const RoiFeature& roi, MaskHead::Trace* trace = nullptr) const { return head.forward(roi, trace); }
  core::MaskLogits logits(const RoiFeature& roi) const;

  /// Parameter prefix inside a checkpoint, e.g. "mask_heads/3".
  std::string prefix() const;
  /// scope is prepended to the prefix (used by extra cascade stages).
  void collect(std::vector<ParamSlot>& out, const std::string& scope = "");
  std::size_t parameter_count() const;

  int class_id = 0;
  MaskHead head;
};

/// One head per foreground class 1..N.
class HeadRegistry {
 public:
  HeadRegistry() = default;

  void insert(SingleClassMaskHead head);
  bool contains(int class_id) const { return heads_.count(class_id) != 0; }
  SingleClassMaskHead& at(int class_id);
  const SingleClassMaskHead& at(int class_id) const;
  std::size_t size() const { return heads_.size(); }
  std::vector<int> classes() const;

  /// Throws unless the registry holds exactly classes 1..num_classes.
  void check_complete(int num_classes) const;

  std::vector<ParamSlot> parameters(const std::string& scope = "");
  std::vector<ParamSlot> head_parameters(int class_id, const std::string& scope = "");
  std::vector<ConstParamSlot> parameters(const std::string& scope = "") const;

  /// Digest over one head's parameters, or the whole registry.
  std::string digest(int class_id) const;
  std::string digest() const;

 private:
  std::map<int, SingleClassMaskHead> heads_;
};

enum class InitMode { Slice, Fresh };

std::string to_string(InitMode mode);
InitMode init_mode_from_string(const std::string& text);

struct Provenance {
  std::string source_digest;
  InitMode init_mode = InitMode::Slice;
  std::uint64_t init_seed = 0;
  /// Per-class training metadata keyed by class id.
  nlohmann::json heads = nlohmann::json::object();
};

/// Frozen base from a baseline plus a head registry.
class MaskUnoModel {
 public:
  MaskUnoModel() = default;

  const PipelineConfig& config() const { return base.config; }

  /// Base parameters (backbone, proposal, cls, box) followed by every registry head.
  std::vector<ParamSlot> parameters();
  std::vector<ConstParamSlot> parameters() const;
  std::vector<ParamSlot> base_parameters();
  void zero_grad();

  PipelineModel base;  // no multi-class mask head
  HeadRegistry heads;
  Provenance provenance;
  bool base_frozen = true;
};

/// Replace the baseline's multi-class mask head by one single-class head per class.
/// Slice copies the shared layers and the owning class's predictor channel; fresh draws a new init
/// from (seed, class).
MaskUnoModel surgery(const PipelineModel& baseline, InitMode init, std::uint64_t seed = 0,
                     const std::string& source_digest = "");

/// A surviving ROI and where the switch sent it.
struct DispatchRecord {
  Box proposal;
  Box refined;
  std::vector<double> distribution;
  int routed_class = 0;
};

struct DispatchLog {
  std::vector<DispatchRecord> records;
  std::map<int, int> head_calls;
};

/// Same boxes and labels as the baseline path; masks come from the routed single-class head.
std::vector<Detection> maskuno_inference(const MaskUnoModel& model, const Tensor& image,
                                         const InferenceOptions& options = {}, DispatchLog* log = nullptr);

/// Mask for one already-decided ROI.
core::MaskLogits dispatch_mask(const HeadRegistry& heads, const FeatureMap& fm, const Box& refined, int routed_class,
                               int mask_roi_resolution);

pipeline::CheckpointRecord to_record(const MaskUnoModel& model, const nlohmann::json& classes);
MaskUnoModel maskuno_from_record(const pipeline::CheckpointRecord& record);

// ---------------------------------------------------------------- cascade

/// One extra refinement stage: its own classifier, box regressor and registry.
struct CascadeStage {
  pipeline::ClsHead cls;
  pipeline::BoxHead box;
  HeadRegistry heads;
  double iou_threshold = 0.6;

  /// Scope of the stage's tensors, e.g. "stage2/".
  static std::string scope(int stage_number);
  std::vector<ParamSlot> parameters(int stage_number);
};

/// Stage 1 is the MaskUno model itself; extra stages follow in order.
class CascadeModel {
 public:
  int num_stages() const { return 1 + int(stages.size()); }

  MaskUnoModel first;
  double first_iou_threshold = 0.5;
  std::vector<CascadeStage> stages;
};

/// New stage cloned from the current last stage.
CascadeStage clone_last_stage(const CascadeModel& model, double iou_threshold);

struct CascadeTrace {
  /// Refined boxes of every surviving detection, one row per stage.
  std::vector<std::vector<Box>> stage_boxes;
};

/// Proposals pass through every stage; the final class is the argmax of the averaged stage distributions,
/// boxes and masks come from the last stage.
std::vector<Detection> cascade_forward(const CascadeModel& model, const Tensor& image,
                                       const InferenceOptions& options = {}, CascadeTrace* trace = nullptr);

/// Arithmetic mean of the distributions, renormalized.
core::ClassDistribution ensemble(const std::vector<core::ClassDistribution>& dists);

pipeline::CheckpointRecord to_record(const CascadeModel& model, const nlohmann::json& classes);
CascadeModel cascade_from_record(const pipeline::CheckpointRecord& record);

}  // namespace maskuno::split
