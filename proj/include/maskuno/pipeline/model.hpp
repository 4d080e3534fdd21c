// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "maskuno/core/geometry.hpp"
#include "maskuno/core/types.hpp"
#include "maskuno/pipeline/layers.hpp"
#include "maskuno/pipeline/roi_align.hpp"

namespace maskuno::pipeline {

using core::Box;
using core::BoxDelta;

struct PipelineConfig {
  int num_classes = 5;
  int image_size = 128;
  int stride = 4;
  int stem_channels = 8;
  int feature_channels = 16;
  std::vector<double> anchor_sizes{8.0, 16.0, 32.0};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  int rpn_channels = 16;
  int head_hidden = 64;
  int mask_channels = 16;
  int box_roi_resolution = 7;
  int mask_roi_resolution = 14;
  int mask_resolution = core::kMaskResolution;
  /// Regression targets are encoded deltas multiplied by these weights.
  std::array<double, 4> box_delta_weights{10.0, 10.0, 5.0, 5.0};

  int anchors_per_cell() const { return int(anchor_sizes.size() * anchor_ratios.size()); }
  int feature_size() const { return image_size / stride; }
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);
PipelineConfig config_from_json(const nlohmann::json& j);

/// Three 3x3 convolutions, overall stride 4, ReLU after each.
class Backbone {
 public:
  struct Trace {
    Tensor input, a1, a2, a3;
  };

  Backbone() = default;
  explicit Backbone(const PipelineConfig& config);

  FeatureMap forward(const Tensor& image, Trace* trace = nullptr) const;
  void backward(const Trace& trace, const Tensor& grad_features);

  void init(core::Rng& rng);
  void collect(std::vector<ParamSlot>& out);

  Conv2d conv1, conv2, conv3;
  int image_size = 0;
  int stride = 4;
};

/// Single-level anchor head: objectness logit and four deltas per anchor.
class RpnHead {
 public:
  struct Output {
    Tensor hidden;      // (R, h, w) post-ReLU
    Tensor objectness;  // (A, h, w)
    Tensor deltas;      // (4A, h, w)
  };

  RpnHead() = default;
  explicit RpnHead(const PipelineConfig& config);

  Output forward(const FeatureMap& fm) const;
  /// grad tensors have the shapes of Output::objectness / deltas; returns grad w.r.t. features.
  Tensor backward(const FeatureMap& fm, const Output& out, const Tensor& grad_objectness, const Tensor& grad_deltas,
                  bool want_input_grad);

  void init(core::Rng& rng);
  void collect(std::vector<ParamSlot>& out);

  Conv2d conv, objectness, deltas;
  int anchors_per_cell = 0;
};

/// Anchor index = (y * w + x) * A + a.
std::vector<Box> make_anchors(const PipelineConfig& config);

/// Two fully connected layers over a flattened 7x7 ROI feature.
class FcHead {
 public:
  struct Trace {
    Tensor input, hidden, output;
  };

  FcHead() = default;
  FcHead(int in_features, int hidden, int outputs);

  Tensor forward(const Tensor& roi, Trace* trace = nullptr) const;
  Tensor backward(const Trace& trace, const Tensor& grad_output, bool want_input_grad);

  void init(core::Rng& rng, double output_stddev);
  void collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix);

  Linear fc1, fc2;
};

/// Classifier over background + N classes.
class ClsHead : public FcHead {
 public:
  ClsHead() = default;
  explicit ClsHead(const PipelineConfig& config);
  core::ClassDistribution distribution(const RoiFeature& roi) const;
  void check_input(const RoiFeature& roi) const;
  int box_resolution = 7;
};

/// Per-class box regression: 4N outputs.
class BoxHead : public FcHead {
 public:
  BoxHead() = default;
  explicit BoxHead(const PipelineConfig& config);
  /// Decoded-space deltas, one per foreground class (index 0 = class 1).
  std::vector<BoxDelta> deltas(const RoiFeature& roi) const;
  void check_input(const RoiFeature& roi) const;
  int box_resolution = 7;
  std::array<double, 4> weights{10.0, 10.0, 5.0, 5.0};
};

/// 14x14 ROI feature -> two 3x3 convs -> 2x upsample -> 1x1 conv to K logit planes at 28x28.
class MaskHead {
 public:
  struct Trace {
    Tensor input, a1, a2, a3, logits;
  };

  MaskHead() = default;
  MaskHead(const PipelineConfig& config, int outputs);

  Tensor forward(const RoiFeature& roi, Trace* trace = nullptr) const;
  Tensor backward(const Trace& trace, const Tensor& grad_logits, bool want_input_grad);

  int outputs() const { return predictor.out_channels; }
  core::MaskLogits channel(const Tensor& logits, int k) const;

  void init(core::Rng& rng);
  void collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix);

  Conv2d conv1, conv2;
  Upsample2x upsample;
  Conv2d predictor;
  int roi_resolution = 14;
};

/// Backbone, proposal head, classifier, box head and (for the baseline) the shared N-channel mask head.
class PipelineModel {
 public:
  PipelineModel() = default;
  explicit PipelineModel(PipelineConfig config, bool with_mask_head = true);

  void init(std::uint64_t seed);

  std::vector<ParamSlot> parameters();
  std::vector<ConstParamSlot> parameters() const;
  void zero_grad();

  const std::vector<Box>& anchors() const { return anchors_; }

  PipelineConfig config;
  Backbone backbone;
  RpnHead rpn;
  ClsHead cls;
  BoxHead box;
  std::optional<MaskHead> mask;

 private:
  std::vector<Box> anchors_;
};

std::vector<ConstParamSlot> const_slots(const std::vector<ParamSlot>& slots);

}  // namespace maskuno::pipeline
