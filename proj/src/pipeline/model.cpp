// SPDX-License-Identifier: Apache-2.0

#include "maskuno/pipeline/model.hpp"

#include <cmath>
#include <sstream>

#include "maskuno/core/error.hpp"

namespace maskuno::pipeline {

void PipelineConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::InvalidArgument, "PipelineConfig: " + m); };
  if (num_classes < 1) bad("num_classes must be >= 1");
  if (stride != 4) bad("backbone has a fixed stride of 4");
  if (image_size % stride != 0 || image_size < 4 * stride) bad("image_size must be a multiple of the stride");
  if (anchor_sizes.empty() || anchor_ratios.empty()) bad("need at least one anchor size and ratio");
  if (stem_channels < 1 || feature_channels < 1 || rpn_channels < 1 || head_hidden < 1 || mask_channels < 1)
    bad("layer widths must be positive");
  if (mask_resolution != 2 * mask_roi_resolution) bad("mask head upsamples its ROI by exactly 2");
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"num_classes", c.num_classes},
          {"image_size", c.image_size},
          {"stride", c.stride},
          {"stem_channels", c.stem_channels},
          {"feature_channels", c.feature_channels},
          {"anchor_sizes", c.anchor_sizes},
          {"anchor_ratios", c.anchor_ratios},
          {"rpn_channels", c.rpn_channels},
          {"head_hidden", c.head_hidden},
          {"mask_channels", c.mask_channels},
          {"box_roi_resolution", c.box_roi_resolution},
          {"mask_roi_resolution", c.mask_roi_resolution},
          {"mask_resolution", c.mask_resolution},
          {"box_delta_weights", c.box_delta_weights}};
}

PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    c.num_classes = j.at("num_classes");
    c.image_size = j.at("image_size");
    c.stride = j.at("stride");
    c.stem_channels = j.at("stem_channels");
    c.feature_channels = j.at("feature_channels");
    c.anchor_sizes = j.at("anchor_sizes").get<std::vector<double>>();
    c.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
    c.rpn_channels = j.at("rpn_channels");
    c.head_hidden = j.at("head_hidden");
    c.mask_channels = j.at("mask_channels");
    c.box_roi_resolution = j.at("box_roi_resolution");
    c.mask_roi_resolution = j.at("mask_roi_resolution");
    c.mask_resolution = j.at("mask_resolution");
    c.box_delta_weights = j.at("box_delta_weights").get<std::array<double, 4>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- Backbone

Backbone::Backbone(const PipelineConfig& c)
    : conv1(3, c.stem_channels, 3, 2, 1), conv2(c.stem_channels, c.feature_channels, 3, 2, 1),
      conv3(c.feature_channels, c.feature_channels, 3, 1, 1), image_size(c.image_size), stride(c.stride) {}

FeatureMap Backbone::forward(const Tensor& image, Trace* trace) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image_size || image.dim(2) != image_size) {
    fail(ErrorKind::InvalidArgument, "backbone: expected image [3," + std::to_string(image_size) + "," +
                                         std::to_string(image_size) + "], got " + image.shape_string());
  }
  Tensor a1 = conv1.forward(image);
  relu_inplace(a1);
  Tensor a2 = conv2.forward(a1);
  relu_inplace(a2);
  Tensor a3 = conv3.forward(a2);
  relu_inplace(a3);
  if (trace != nullptr) *trace = Trace{image, a1, a2, a3};
  return FeatureMap{std::move(a3), stride};
}

void Backbone::backward(const Trace& t, const Tensor& grad_features) {
  Tensor g = grad_features;
  relu_backward_inplace(g, t.a3);
  g = conv3.backward(t.a2, g, true);
  relu_backward_inplace(g, t.a2);
  g = conv2.backward(t.a1, g, true);
  relu_backward_inplace(g, t.a1);
  conv1.backward(t.input, g, false);
}

void Backbone::init(core::Rng& rng) {
  conv1.init_he(rng);
  conv2.init_he(rng);
  conv3.init_he(rng);
}

void Backbone::collect(std::vector<ParamSlot>& out) {
  conv1.collect(out, SubHead::Backbone, "backbone/conv1");
  conv2.collect(out, SubHead::Backbone, "backbone/conv2");
  conv3.collect(out, SubHead::Backbone, "backbone/conv3");
}

// ---------------------------------------------------------------- RPN

RpnHead::RpnHead(const PipelineConfig& c)
    : conv(c.feature_channels, c.rpn_channels, 3, 1, 1),
      objectness(c.rpn_channels, c.anchors_per_cell(), 1, 1, 0),
      deltas(c.rpn_channels, 4 * c.anchors_per_cell(), 1, 1, 0),
      anchors_per_cell(c.anchors_per_cell()) {}

RpnHead::Output RpnHead::forward(const FeatureMap& fm) const {
  Output out;
  out.hidden = conv.forward(fm.data);
  relu_inplace(out.hidden);
  out.objectness = objectness.forward(out.hidden);
  out.deltas = deltas.forward(out.hidden);
  return out;
}

Tensor RpnHead::backward(const FeatureMap& fm, const Output& out, const Tensor& grad_objectness,
                         const Tensor& grad_deltas, bool want_input_grad) {
  Tensor g = objectness.backward(out.hidden, grad_objectness, true);
  const Tensor gd = deltas.backward(out.hidden, grad_deltas, true);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += gd[i];
  relu_backward_inplace(g, out.hidden);
  return conv.backward(fm.data, g, want_input_grad);
}

void RpnHead::init(core::Rng& rng) {
  conv.init_he(rng);
  objectness.init_normal(rng, 0.01);
  deltas.init_normal(rng, 0.01);
}

void RpnHead::collect(std::vector<ParamSlot>& out) {
  conv.collect(out, SubHead::Proposal, "proposal/conv");
  objectness.collect(out, SubHead::Proposal, "proposal/objectness");
  deltas.collect(out, SubHead::Proposal, "proposal/deltas");
}

std::vector<Box> make_anchors(const PipelineConfig& c) {
  const int n = c.feature_size();
  std::vector<Box> anchors;
  anchors.reserve(std::size_t(n) * n * c.anchors_per_cell());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double cx = (x + 0.5) * c.stride, cy = (y + 0.5) * c.stride;
      for (double size : c.anchor_sizes) {
        for (double ratio : c.anchor_ratios) {
          // ratio = h / w at constant area
          const double w = size / std::sqrt(ratio), h = size * std::sqrt(ratio);
          anchors.push_back(Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return anchors;
}

// ---------------------------------------------------------------- FC heads

FcHead::FcHead(int in, int hidden, int outputs) : fc1(in, hidden), fc2(hidden, outputs) {}

Tensor FcHead::forward(const Tensor& roi, Trace* trace) const {
  Tensor flat({int(roi.size())});
  std::copy(roi.data(), roi.data() + roi.size(), flat.data());
  Tensor hidden = fc1.forward(flat);
  relu_inplace(hidden);
  Tensor out = fc2.forward(hidden);
  if (trace != nullptr) *trace = Trace{std::move(flat), hidden, out};
  return out;
}

Tensor FcHead::backward(const Trace& t, const Tensor& grad_output, bool want_input_grad) {
  Tensor g = fc2.backward(t.hidden, grad_output, true);
  relu_backward_inplace(g, t.hidden);
  return fc1.backward(t.input, g, want_input_grad);
}

void FcHead::init(core::Rng& rng, double output_stddev) {
  fc1.init_he(rng);
  fc2.init_normal(rng, output_stddev);
}

void FcHead::collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix) {
  fc1.collect(out, owner, prefix + "/fc1");
  fc2.collect(out, owner, prefix + "/fc2");
}

namespace {

void check_resolution(const RoiFeature& roi, int expected, int channels, const char* who) {
  if (roi.data.rank() != 3 || roi.data.dim(0) != channels || roi.data.dim(1) != expected || roi.data.dim(2) != expected) {
    std::ostringstream os;
    os << who << ": expected ROI feature [" << channels << "," << expected << "," << expected << "], got "
       << roi.data.shape_string();
    fail(ErrorKind::InvalidArgument, os.str());
  }
}

}  // namespace

ClsHead::ClsHead(const PipelineConfig& c)
    : FcHead(c.feature_channels * c.box_roi_resolution * c.box_roi_resolution, c.head_hidden, c.num_classes + 1),
      box_resolution(c.box_roi_resolution) {}

void ClsHead::check_input(const RoiFeature& roi) const {
  check_resolution(roi, box_resolution, fc1.in_features / (box_resolution * box_resolution), "cls_head");
}

core::ClassDistribution ClsHead::distribution(const RoiFeature& roi) const {
  check_input(roi);
  const Tensor logits = forward(roi.data);
  return core::ClassDistribution::from_logits(logits.values());
}

BoxHead::BoxHead(const PipelineConfig& c)
    : FcHead(c.feature_channels * c.box_roi_resolution * c.box_roi_resolution, c.head_hidden, 4 * c.num_classes),
      box_resolution(c.box_roi_resolution), weights(c.box_delta_weights) {}

void BoxHead::check_input(const RoiFeature& roi) const {
  check_resolution(roi, box_resolution, fc1.in_features / (box_resolution * box_resolution), "box_head");
}

std::vector<BoxDelta> BoxHead::deltas(const RoiFeature& roi) const {
  check_input(roi);
  const Tensor raw = forward(roi.data);
  std::vector<BoxDelta> out(raw.size() / 4);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = BoxDelta{raw[4 * k] / weights[0], raw[4 * k + 1] / weights[1], raw[4 * k + 2] / weights[2],
                      raw[4 * k + 3] / weights[3]};
  }
  return out;
}

// ---------------------------------------------------------------- Mask head

MaskHead::MaskHead(const PipelineConfig& c, int outputs)
    : conv1(c.feature_channels, c.mask_channels, 3, 1, 1), conv2(c.mask_channels, c.mask_channels, 3, 1, 1),
      upsample(c.mask_channels, c.mask_channels), predictor(c.mask_channels, outputs, 1, 1, 0),
      roi_resolution(c.mask_roi_resolution) {}

Tensor MaskHead::forward(const RoiFeature& roi, Trace* trace) const {
  check_resolution(roi, roi_resolution, conv1.in_channels, "mask_head");
  Tensor a1 = conv1.forward(roi.data);
  relu_inplace(a1);
  Tensor a2 = conv2.forward(a1);
  relu_inplace(a2);
  Tensor a3 = upsample.forward(a2);
  relu_inplace(a3);
  Tensor logits = predictor.forward(a3);
  if (trace != nullptr) *trace = Trace{roi.data, a1, a2, a3, logits};
  return logits;
}

Tensor MaskHead::backward(const Trace& t, const Tensor& grad_logits, bool want_input_grad) {
  Tensor g = predictor.backward(t.a3, grad_logits, true);
  relu_backward_inplace(g, t.a3);
  g = upsample.backward(t.a2, g, true);
  relu_backward_inplace(g, t.a2);
  g = conv2.backward(t.a1, g, true);
  relu_backward_inplace(g, t.a1);
  return conv1.backward(t.input, g, want_input_grad);
}

core::MaskLogits MaskHead::channel(const Tensor& logits, int k) const {
  const int m = logits.dim(1);
  core::MaskLogits out(m);
  const float* src = logits.data() + std::size_t(k) * m * m;
  std::copy(src, src + std::size_t(m) * m, out.values.begin());
  return out;
}

void MaskHead::init(core::Rng& rng) {
  conv1.init_he(rng);
  conv2.init_he(rng);
  upsample.init_he(rng);
  predictor.init_normal(rng, 0.001);
}

void MaskHead::collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix) {
  conv1.collect(out, owner, prefix + "/conv1");
  conv2.collect(out, owner, prefix + "/conv2");
  upsample.collect(out, owner, prefix + "/upsample");
  predictor.collect(out, owner, prefix + "/predictor");
}

// ---------------------------------------------------------------- PipelineModel

PipelineModel::PipelineModel(PipelineConfig c, bool with_mask_head)
    : config(std::move(c)), backbone(config), rpn(config), cls(config), box(config), anchors_(make_anchors(config)) {
  config.validate();
  if (with_mask_head) mask.emplace(config, config.num_classes);
}

void PipelineModel::init(std::uint64_t seed) {
  auto r0 = core::make_rng(seed, {0});
  auto r1 = core::make_rng(seed, {1});
  auto r2 = core::make_rng(seed, {2});
  auto r3 = core::make_rng(seed, {3});
  auto r4 = core::make_rng(seed, {4});
  backbone.init(r0);
  rpn.init(r1);
  cls.init(r2, 0.01);
  box.init(r3, 0.001);
  if (mask) mask->init(r4);
}

std::vector<ParamSlot> PipelineModel::parameters() {
  std::vector<ParamSlot> out;
  backbone.collect(out);
  rpn.collect(out);
  cls.collect(out, SubHead::Cls, "cls");
  box.collect(out, SubHead::Box, "box");
  if (mask) mask->collect(out, SubHead::Mask, "mask");
  return out;
}

std::vector<ConstParamSlot> PipelineModel::parameters() const {
  return const_slots(const_cast<PipelineModel*>(this)->parameters());
}

std::vector<ConstParamSlot> const_slots(const std::vector<ParamSlot>& slots) {
  std::vector<ConstParamSlot> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.push_back({s.owner, s.name, s.value});
  return out;
}

void PipelineModel::zero_grad() {
  for (auto& p : parameters()) p.grad->fill(0.0f);
}

}  // namespace maskuno::pipeline
