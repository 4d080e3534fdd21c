// SPDX-License-Identifier: Apache-2.0

#include "maskuno/pipeline/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "maskuno/core/error.hpp"

namespace maskuno::pipeline {

namespace {

const double kMaxLogSize = std::log(1000.0 / 16.0);

std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold) {
  const auto order = score_order(scores);
  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t a = order[i];
    if (suppressed[a]) continue;
    keep.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t b = order[j];
      if (!suppressed[b] && core::box_iou(boxes[a], boxes[b]) > iou_threshold) suppressed[b] = true;
    }
  }
  return keep;
}

std::vector<Proposal> propose_learned(const PipelineModel& model, const FeatureMap& fm, int k,
                                      const ProposalOptions& options) {
  if (k < 1) fail(ErrorKind::InvalidArgument, "propose_regions: k must be >= 1");
  const auto out = model.rpn.forward(fm);
  const auto& anchors = model.anchors();
  const int h = fm.height(), w = fm.width(), a_per = model.rpn.anchors_per_cell;
  const int img_w = fm.image_width(), img_h = fm.image_height();
  if (std::size_t(h) * w * a_per != anchors.size())
    fail(ErrorKind::Model, "propose_regions: feature map does not match the anchor grid");

  std::vector<std::size_t> candidates;
  std::vector<double> all_scores(anchors.size(), 0.0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box& a = anchors[i];
    if (a.width() > img_w || a.height() > img_h) continue;
    const int cell = int(i) / a_per, ai = int(i) % a_per;
    all_scores[i] = core::sigmoid(out.objectness[std::size_t(ai) * h * w + std::size_t(cell)]);
    candidates.push_back(i);
  }
  if (candidates.empty()) fail(ErrorKind::Geometry, "propose_regions: no anchors fit the image");

  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return all_scores[a] > all_scores[b]; });
  if (int(candidates.size()) > options.pre_nms_top_n) candidates.resize(std::size_t(options.pre_nms_top_n));

  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t i : candidates) {
    const int cell = int(i) / a_per, ai = int(i) % a_per;
    const std::size_t plane = std::size_t(h) * w;
    BoxDelta d{out.deltas[(4 * std::size_t(ai) + 0) * plane + std::size_t(cell)],
               out.deltas[(4 * std::size_t(ai) + 1) * plane + std::size_t(cell)],
               out.deltas[(4 * std::size_t(ai) + 2) * plane + std::size_t(cell)],
               out.deltas[(4 * std::size_t(ai) + 3) * plane + std::size_t(cell)]};
    if (!d.finite()) continue;
    d.dw = std::min(d.dw, kMaxLogSize);
    d.dh = std::min(d.dh, kMaxLogSize);
    const Box b = core::clip_box(core::decode_box_delta(d, anchors[i]), img_w, img_h);
    if (b.width() < options.min_size || b.height() < options.min_size) continue;
    boxes.push_back(b);
    scores.push_back(all_scores[i]);
  }
  std::vector<Proposal> result;
  for (std::size_t i : nms(boxes, scores, options.nms_iou)) {
    if (int(result.size()) >= k) break;
    result.push_back({boxes[i], scores[i]});
  }
  return result;
}

std::vector<Proposal> propose_gt_jitter(const std::vector<Box>& gt, double amplitude, core::Rng& rng, int image_width,
                                        int image_height) {
  std::vector<Proposal> out;
  for (const Box& g : gt) {
    const double w = g.width(), h = g.height();
    Box b{g.x1 + core::uniform(rng, -amplitude, amplitude) * w, g.y1 + core::uniform(rng, -amplitude, amplitude) * h,
          g.x2 + core::uniform(rng, -amplitude, amplitude) * w, g.y2 + core::uniform(rng, -amplitude, amplitude) * h};
    if (amplitude == 0.0) b = g;
    b = core::clip_box(b, image_width, image_height);
    if (!b.valid()) b = core::clip_box(g, image_width, image_height);
    out.push_back({b, 1.0});
  }
  return out;
}

std::vector<Proposal> propose_regions(const PipelineModel& model, const FeatureMap& fm, ProposalMode mode, int k,
                                      const std::vector<Box>& gt, core::Rng* rng, double jitter) {
  if (k < 1) fail(ErrorKind::InvalidArgument, "propose_regions: k must be >= 1");
  if (mode == ProposalMode::Learned) return propose_learned(model, fm, k);
  if (rng == nullptr) fail(ErrorKind::InvalidArgument, "propose_regions: gt_jitter mode needs a random stream");
  auto out = propose_gt_jitter(gt, jitter, *rng, fm.image_width(), fm.image_height());
  if (int(out.size()) > k) out.resize(std::size_t(k));
  return out;
}

int predicted_class(const core::ClassDistribution& dist) { return dist.argmax(); }

Box refine_box(const Box& proposal, const BoxDelta& delta, int image_width, int image_height) {
  BoxDelta d = delta;
  d.dw = std::min(d.dw, kMaxLogSize);
  d.dh = std::min(d.dh, kMaxLogSize);
  return core::clip_box(core::decode_box_delta(d, proposal), image_width, image_height);
}

std::vector<RoiDecision> select_detections(std::vector<RoiDecision> candidates, const InferenceOptions& options) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < candidates.size(); ++i) by_class[candidates[i].label].push_back(i);
  std::vector<std::size_t> kept;
  for (const auto& [label, idx] : by_class) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i : idx) {
      boxes.push_back(candidates[i].refined);
      scores.push_back(candidates[i].score);
    }
    for (std::size_t k : nms(boxes, scores, options.detection_nms_iou)) kept.push_back(idx[k]);
  }
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    if (candidates[a].score != candidates[b].score) return candidates[a].score > candidates[b].score;
    return a < b;
  });
  if (int(kept.size()) > options.max_detections) kept.resize(std::size_t(std::max(0, options.max_detections)));
  std::vector<RoiDecision> out;
  out.reserve(kept.size());
  for (std::size_t i : kept) out.push_back(std::move(candidates[i]));
  return out;
}

std::vector<RoiDecision> classify_and_refine(const PipelineModel& model, const FeatureMap& fm,
                                             const std::vector<Proposal>& proposals, const InferenceOptions& options) {
  std::vector<RoiDecision> candidates;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const Proposal& p = proposals[i];
    const RoiFeature roi = roi_align(fm, p.box, model.config.box_roi_resolution);
    auto dist = model.cls.distribution(roi);
    const int label = predicted_class(dist);
    if (label == 0) continue;
    const double score = dist[std::size_t(label)];
    if (score < options.score_threshold) continue;
    const auto deltas = model.box.deltas(roi);
    const Box refined = refine_box(p.box, deltas[std::size_t(label - 1)], fm.image_width(), fm.image_height());
    if (!refined.valid()) continue;
    candidates.push_back({p.box, std::move(dist), label, score, refined, i});
  }
  return select_detections(std::move(candidates), options);
}

core::BinaryMask paste_mask(const core::MaskLogits& logits, const Box& box, int image_width, int image_height,
                            double threshold) {
  core::BinaryMask out(image_height, image_width);
  const int m = logits.resolution;
  const auto probs = logits.probabilities();
  auto prob = [&](int y, int x) { return probs[std::size_t(y) * m + x]; };
  const int x0 = std::max(0, int(std::floor(box.x1))), x1 = std::min(image_width - 1, int(std::ceil(box.x2)));
  const int y0 = std::max(0, int(std::floor(box.y1))), y1 = std::min(image_height - 1, int(std::ceil(box.y2)));
  for (int py = y0; py <= y1; ++py) {
    const double cy = py + 0.5;
    if (cy < box.y1 || cy > box.y2) continue;
    const double v = std::clamp((cy - box.y1) / box.height() * m - 0.5, 0.0, double(m - 1));
    const int vl = int(v), vh = std::min(vl + 1, m - 1);
    const double fv = v - vl;
    for (int px = x0; px <= x1; ++px) {
      const double cx = px + 0.5;
      if (cx < box.x1 || cx > box.x2) continue;
      const double u = std::clamp((cx - box.x1) / box.width() * m - 0.5, 0.0, double(m - 1));
      const int ul = int(u), uh = std::min(ul + 1, m - 1);
      const double fu = u - ul;
      const double p = (1 - fv) * ((1 - fu) * prob(vl, ul) + fu * prob(vl, uh)) +
                       fv * ((1 - fu) * prob(vh, ul) + fu * prob(vh, uh));
      if (p >= threshold) out.set(py, px, true);
    }
  }
  return out;
}

std::vector<Proposal> inference_proposals(const PipelineModel& model, const FeatureMap& fm,
                                          const InferenceOptions& options) {
  return propose_learned(model, fm, options.num_proposals, options.proposals);
}

std::vector<Detection> baseline_inference(const PipelineModel& model, const core::Tensor& image,
                                          const InferenceOptions& options) {
  if (!model.mask) fail(ErrorKind::Model, "baseline_inference: model has no multi-class mask head");
  if (model.mask->outputs() != model.config.num_classes)
    fail(ErrorKind::Model, "baseline_inference: mask head channels do not match the class catalog");
  const FeatureMap fm = model.backbone.forward(image);
  const auto decisions = classify_and_refine(model, fm, inference_proposals(model, fm, options), options);
  std::vector<Detection> out;
  for (const auto& d : decisions) {
    const RoiFeature roi = roi_align(fm, d.refined, model.config.mask_roi_resolution);
    const Tensor logits = model.mask->forward(roi);
    Detection det;
    det.box = d.refined;
    det.label = core::ClassLabel{d.label};
    det.score = d.score;
    det.head_logits = model.mask->channel(logits, d.label - 1);
    det.mask = paste_mask(det.head_logits, d.refined, fm.image_width(), fm.image_height(), options.mask_threshold);
    out.push_back(std::move(det));
  }
  return out;
}

}  // namespace maskuno::pipeline
