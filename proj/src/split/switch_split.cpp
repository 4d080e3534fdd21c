// SPDX-License-Identifier: Apache-2.0

#include "maskuno/split/switch_split.hpp"

#include <algorithm>

#include "maskuno/core/digest.hpp"
#include "maskuno/core/error.hpp"

namespace maskuno::split {

using nlohmann::json;
using pipeline::CheckpointRecord;
using pipeline::RoiDecision;

std::optional<int> route(const core::ClassDistribution& dist) {
  const int k = dist.argmax();
  if (k == 0) return std::nullopt;
  return k;
}

std::optional<int> route(std::span<const double> probs) {
  return route(core::ClassDistribution(std::vector<double>(probs.begin(), probs.end())));
}

// ---------------------------------------------------------------- heads

SingleClassMaskHead::SingleClassMaskHead(const PipelineConfig& config, int id) : class_id(id), head(config, 1) {
  if (id < 1) fail(ErrorKind::InvalidArgument, "single-class head needs a foreground class id");
}

core::MaskLogits SingleClassMaskHead::logits(const RoiFeature& roi) const { return head.channel(forward(roi), 0); }

std::string SingleClassMaskHead::prefix() const { return "mask_heads/" + std::to_string(class_id); }

void SingleClassMaskHead::collect(std::vector<ParamSlot>& out, const std::string& scope) {
  head.collect(out, pipeline::SubHead::Mask, scope + prefix());
}

std::size_t SingleClassMaskHead::parameter_count() const {
  std::vector<ParamSlot> slots;
  const_cast<SingleClassMaskHead*>(this)->collect(slots);
  std::size_t n = 0;
  for (const auto& s : slots) n += s.value->size();
  return n;
}

void HeadRegistry::insert(SingleClassMaskHead head) {
  const int id = head.class_id;
  if (!heads_.emplace(id, std::move(head)).second)
    fail(ErrorKind::Model, "head registry already holds class " + std::to_string(id));
}

SingleClassMaskHead& HeadRegistry::at(int class_id) {
  const auto it = heads_.find(class_id);
  if (it == heads_.end()) fail(ErrorKind::Model, "head registry has no head for class " + std::to_string(class_id));
  return it->second;
}

const SingleClassMaskHead& HeadRegistry::at(int class_id) const {
  return const_cast<HeadRegistry*>(this)->at(class_id);
}

std::vector<int> HeadRegistry::classes() const {
  std::vector<int> out;
  for (const auto& [id, _] : heads_) out.push_back(id);
  return out;
}

void HeadRegistry::check_complete(int num_classes) const {
  if (int(heads_.size()) != num_classes)
    fail(ErrorKind::Model, "head registry holds " + std::to_string(heads_.size()) + " heads for " +
                               std::to_string(num_classes) + " classes");
  for (int c = 1; c <= num_classes; ++c)
    if (!contains(c)) fail(ErrorKind::Model, "head registry is missing class " + std::to_string(c));
}

std::vector<ParamSlot> HeadRegistry::parameters(const std::string& scope) {
  std::vector<ParamSlot> out;
  for (auto& [_, h] : heads_) h.collect(out, scope);
  return out;
}

std::vector<ParamSlot> HeadRegistry::head_parameters(int class_id, const std::string& scope) {
  std::vector<ParamSlot> out;
  at(class_id).collect(out, scope);
  return out;
}

std::vector<ConstParamSlot> HeadRegistry::parameters(const std::string& scope) const {
  return pipeline::const_slots(const_cast<HeadRegistry*>(this)->parameters(scope));
}

std::string HeadRegistry::digest(int class_id) const {
  auto* self = const_cast<HeadRegistry*>(this);
  return pipeline::payload_digest(pipeline::snapshot(pipeline::const_slots(self->head_parameters(class_id))));
}

std::string HeadRegistry::digest() const { return pipeline::payload_digest(pipeline::snapshot(parameters())); }

// ---------------------------------------------------------------- model

std::string to_string(InitMode mode) { return mode == InitMode::Slice ? "slice" : "fresh"; }

InitMode init_mode_from_string(const std::string& text) {
  if (text == "slice") return InitMode::Slice;
  if (text == "fresh") return InitMode::Fresh;
  fail(ErrorKind::InvalidArgument, "unknown init mode '" + text + "' (expected slice or fresh)");
}

std::vector<ParamSlot> MaskUnoModel::base_parameters() { return base.parameters(); }

std::vector<ParamSlot> MaskUnoModel::parameters() {
  auto out = base.parameters();
  for (auto& p : heads.parameters()) out.push_back(p);
  return out;
}

std::vector<ConstParamSlot> MaskUnoModel::parameters() const {
  return pipeline::const_slots(const_cast<MaskUnoModel*>(this)->parameters());
}

void MaskUnoModel::zero_grad() {
  for (auto& p : parameters()) p.grad->fill(0.0f);
}

namespace {

void copy_conv(const pipeline::Conv2d& src, pipeline::Conv2d& dst) {
  dst.weight = src.weight;
  dst.bias = src.bias;
}

void slice_predictor(const pipeline::Conv2d& src, int channel, pipeline::Conv2d& dst) {
  const std::size_t per_out = std::size_t(src.in_channels) * src.kernel * src.kernel;
  std::copy_n(src.weight.data() + std::size_t(channel) * per_out, per_out, dst.weight.data());
  dst.bias[0] = src.bias[std::size_t(channel)];
}

}  // namespace

MaskUnoModel surgery(const PipelineModel& baseline, InitMode init, std::uint64_t seed,
                     const std::string& source_digest) {
  if (!baseline.mask) fail(ErrorKind::Model, "surgery: baseline has no multi-class mask head");
  const int n = baseline.config.num_classes;
  if (baseline.mask->outputs() != n)
    fail(ErrorKind::Model, "surgery: mask head has " + std::to_string(baseline.mask->outputs()) +
                               " channels but the catalog has " + std::to_string(n) + " classes");
  MaskUnoModel m;
  m.base = baseline;
  m.base.mask.reset();
  m.base.zero_grad();
  for (int c = 1; c <= n; ++c) {
    SingleClassMaskHead h(baseline.config, c);
    if (init == InitMode::Slice) {
      copy_conv(baseline.mask->conv1, h.head.conv1);
      copy_conv(baseline.mask->conv2, h.head.conv2);
      h.head.upsample.weight = baseline.mask->upsample.weight;
      h.head.upsample.bias = baseline.mask->upsample.bias;
      slice_predictor(baseline.mask->predictor, c - 1, h.head.predictor);
    } else {
      auto rng = core::make_rng(seed, {0x5eed, std::uint64_t(c)});
      h.head.init(rng);
    }
    m.heads.insert(std::move(h));
  }
  m.provenance.source_digest = source_digest;
  m.provenance.init_mode = init;
  m.provenance.init_seed = seed;
  return m;
}

// ---------------------------------------------------------------- inference

core::MaskLogits dispatch_mask(const HeadRegistry& heads, const FeatureMap& fm, const Box& refined, int routed_class,
                               int mask_roi_resolution) {
  const RoiFeature roi = pipeline::roi_align(fm, refined, mask_roi_resolution);
  return heads.at(routed_class).logits(roi);
}

namespace {

std::vector<Detection> emit(const HeadRegistry& heads, const FeatureMap& fm, const std::vector<RoiDecision>& decisions,
                            const PipelineConfig& config, const InferenceOptions& options, DispatchLog* log) {
  std::vector<Detection> out;
  for (const auto& d : decisions) {
    const auto routed = route(d.distribution);
    if (!routed) continue;
    if (log != nullptr) {
      log->records.push_back({d.proposal, d.refined, d.distribution.probs(), *routed});
      ++log->head_calls[*routed];
    }
    Detection det;
    det.box = d.refined;
    det.label = core::ClassLabel{*routed};
    det.score = d.score;
    det.head_logits = dispatch_mask(heads, fm, d.refined, *routed, config.mask_roi_resolution);
    det.mask = pipeline::paste_mask(det.head_logits, d.refined, fm.image_width(), fm.image_height(),
                                    options.mask_threshold);
    out.push_back(std::move(det));
  }
  return out;
}

}  // namespace

std::vector<Detection> maskuno_inference(const MaskUnoModel& model, const Tensor& image,
                                         const InferenceOptions& options, DispatchLog* log) {
  model.heads.check_complete(model.config().num_classes);
  const FeatureMap fm = model.base.backbone.forward(image);
  const auto decisions =
      pipeline::classify_and_refine(model.base, fm, pipeline::inference_proposals(model.base, fm, options), options);
  return emit(model.heads, fm, decisions, model.config(), options, log);
}

// ---------------------------------------------------------------- checkpoint

namespace {

json registry_json(const HeadRegistry& heads) {
  json r = json::object();
  for (int c : heads.classes()) r[std::to_string(c)] = heads.at(c).prefix();
  return r;
}

void fill_registry(HeadRegistry& heads, const json& registry, const PipelineConfig& config,
                   const CheckpointRecord& record, const std::string& scope) {
  for (const auto& [key, prefix] : registry.items()) {
    SingleClassMaskHead h(config, std::stoi(key));
    if (h.prefix() != prefix.get<std::string>())
      fail(ErrorKind::Parse, "registry entry for class " + key + " points at " + prefix.dump());
    heads.insert(std::move(h));
  }
  heads.check_complete(config.num_classes);
  pipeline::restore(record.tensors, heads.parameters(scope));
}

json provenance_json(const Provenance& p) {
  return {{"source_digest", p.source_digest},
          {"init_mode", to_string(p.init_mode)},
          {"init_seed", p.init_seed},
          {"heads", p.heads}};
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.source_digest = j.value("source_digest", "");
  p.init_mode = init_mode_from_string(j.value("init_mode", "slice"));
  p.init_seed = j.value("init_seed", std::uint64_t{0});
  p.heads = j.value("heads", json::object());
  return p;
}

MaskUnoModel maskuno_from_parts(const CheckpointRecord& record) {
  MaskUnoModel m;
  m.base = PipelineModel(pipeline::config_from_json(record.config), false);
  pipeline::restore(record.tensors, m.base.parameters());
  fill_registry(m.heads, record.registry, m.base.config, record, "");
  m.provenance = provenance_from_json(record.provenance);
  return m;
}

}  // namespace

CheckpointRecord to_record(const MaskUnoModel& model, const json& classes) {
  CheckpointRecord r;
  r.kind = "maskuno";
  r.config = pipeline::to_json(model.config());
  r.classes = classes;
  r.tensors = pipeline::snapshot(model.parameters());
  r.registry = registry_json(model.heads);
  r.provenance = provenance_json(model.provenance);
  r.digest = pipeline::payload_digest(r.tensors);
  return r;
}

MaskUnoModel maskuno_from_record(const CheckpointRecord& record) {
  if (record.kind != "maskuno")
    fail(ErrorKind::Model, "expected a maskuno checkpoint, found kind '" + record.kind + "'");
  return maskuno_from_parts(record);
}

// ---------------------------------------------------------------- cascade

std::string CascadeStage::scope(int stage_number) { return "stage" + std::to_string(stage_number) + "/"; }

std::vector<ParamSlot> CascadeStage::parameters(int stage_number) {
  std::vector<ParamSlot> out;
  const std::string s = scope(stage_number);
  cls.collect(out, pipeline::SubHead::Cls, s + "cls");
  box.collect(out, pipeline::SubHead::Box, s + "box");
  for (auto& p : heads.parameters(s)) out.push_back(p);
  return out;
}

CascadeStage clone_last_stage(const CascadeModel& model, double iou_threshold) {
  CascadeStage s;
  if (model.stages.empty()) {
    s.cls = model.first.base.cls;
    s.box = model.first.base.box;
    s.heads = model.first.heads;
  } else {
    s = model.stages.back();
  }
  s.iou_threshold = iou_threshold;
  return s;
}

core::ClassDistribution ensemble(const std::vector<core::ClassDistribution>& dists) {
  if (dists.empty()) fail(ErrorKind::InvalidArgument, "ensemble: no distributions");
  std::vector<double> mean(dists.front().size(), 0.0);
  for (const auto& d : dists) {
    if (d.size() != mean.size()) fail(ErrorKind::InvalidArgument, "ensemble: distribution sizes differ");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += d[i];
  }
  double total = 0.0;
  for (double& v : mean) total += (v /= double(dists.size()));
  for (double& v : mean) v /= total;
  return core::ClassDistribution(std::move(mean));
}

std::vector<Detection> cascade_forward(const CascadeModel& model, const Tensor& image,
                                       const InferenceOptions& options, CascadeTrace* trace) {
  if (model.num_stages() < 2) fail(ErrorKind::InvalidArgument, "cascade_forward needs at least 2 stages");
  const auto& base = model.first.base;
  const auto& config = base.config;
  const FeatureMap fm = base.backbone.forward(image);
  const auto proposals = pipeline::inference_proposals(base, fm, options);
  const int img_w = fm.image_width(), img_h = fm.image_height();

  std::vector<RoiDecision> candidates;
  std::vector<std::vector<Box>> boxes_per_candidate;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    Box box = proposals[i].box;
    std::vector<core::ClassDistribution> dists;
    std::vector<Box> stage_boxes;
    bool alive = true;
    for (int s = 0; s < model.num_stages() && alive; ++s) {
      const auto& cls = s == 0 ? base.cls : model.stages[std::size_t(s - 1)].cls;
      const auto& reg = s == 0 ? base.box : model.stages[std::size_t(s - 1)].box;
      const RoiFeature roi = pipeline::roi_align(fm, box, config.box_roi_resolution);
      auto dist = cls.distribution(roi);
      const auto& p = dist.probs();
      const int fg = int(std::max_element(p.begin() + 1, p.end()) - p.begin());
      box = pipeline::refine_box(box, reg.deltas(roi)[std::size_t(fg - 1)], img_w, img_h);
      alive = box.valid();
      dists.push_back(std::move(dist));
      stage_boxes.push_back(box);
    }
    if (!alive) continue;
    auto final_dist = ensemble(dists);
    const int label = pipeline::predicted_class(final_dist);
    if (label == 0) continue;
    const double score = final_dist[std::size_t(label)];
    if (score < options.score_threshold) continue;
    candidates.push_back({proposals[i].box, std::move(final_dist), label, score, box, boxes_per_candidate.size()});
    boxes_per_candidate.push_back(std::move(stage_boxes));
  }
  const auto decisions = pipeline::select_detections(std::move(candidates), options);
  if (trace != nullptr) {
    trace->stage_boxes.assign(std::size_t(model.num_stages()), {});
    for (const auto& d : decisions)
      for (int s = 0; s < model.num_stages(); ++s)
        trace->stage_boxes[std::size_t(s)].push_back(boxes_per_candidate[d.source_index][std::size_t(s)]);
  }
  const HeadRegistry& last = model.stages.back().heads;
  last.check_complete(config.num_classes);
  return emit(last, fm, decisions, config, options, nullptr);
}

CheckpointRecord to_record(const CascadeModel& model, const json& classes) {
  CheckpointRecord r = to_record(model.first, classes);
  r.kind = "cascade";
  json thresholds = json::array({model.first_iou_threshold});
  auto& m = const_cast<CascadeModel&>(model);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    thresholds.push_back(m.stages[s].iou_threshold);
    for (const auto& t : pipeline::snapshot(pipeline::const_slots(m.stages[s].parameters(int(s) + 2))))
      r.tensors.push_back(t);
  }
  r.config["cascade_iou_thresholds"] = thresholds;
  r.digest = pipeline::payload_digest(r.tensors);
  return r;
}

CascadeModel cascade_from_record(const CheckpointRecord& record) {
  if (record.kind != "cascade")
    fail(ErrorKind::Model, "expected a cascade checkpoint, found kind '" + record.kind + "'");
  CascadeModel m;
  m.first = maskuno_from_parts(record);
  const auto thresholds = record.config.at("cascade_iou_thresholds").get<std::vector<double>>();
  if (thresholds.size() < 2) fail(ErrorKind::Parse, "cascade checkpoint lists fewer than 2 stages");
  m.first_iou_threshold = thresholds[0];
  for (std::size_t s = 1; s < thresholds.size(); ++s) {
    CascadeStage stage = clone_last_stage(m, thresholds[s]);
    pipeline::restore(record.tensors, stage.parameters(int(s) + 1));
    m.stages.push_back(std::move(stage));
  }
  return m;
}

}  // namespace maskuno::split
