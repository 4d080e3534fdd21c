// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "maskuno/core/random.hpp"
#include "maskuno/core/types.hpp"
#include "maskuno/pipeline/model.hpp"

namespace maskuno::pipeline {

using core::Detection;

struct Proposal {
  Box box;
  double objectness = 0.0;
};

enum class ProposalMode { Learned, GtJitter };

struct ProposalOptions {
  int pre_nms_top_n = 600;
  double nms_iou = 0.7;
  double min_size = 1.0;
};

/// Score-ordered greedy suppression; returns kept indices in score order.
/// Equal scores keep the lower index first.
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold);

/// Learned mode: decode anchors, clip, suppress at IoU 0.7, keep the top k.
std::vector<Proposal> propose_learned(const PipelineModel& model, const FeatureMap& fm, int k,
                                      const ProposalOptions& options = {});

/// Ground-truth boxes perturbed by uniform noise up to +-amplitude of their size, clipped to the image.
std::vector<Proposal> propose_gt_jitter(const std::vector<Box>& gt, double amplitude, core::Rng& rng, int image_width,
                                        int image_height);

/// Mode dispatch. gt/rng are only consulted in gt_jitter mode.
std::vector<Proposal> propose_regions(const PipelineModel& model, const FeatureMap& fm, ProposalMode mode, int k,
                                      const std::vector<Box>& gt = {}, core::Rng* rng = nullptr,
                                      double jitter = 0.1);

struct InferenceOptions {
  double score_threshold = 0.05;
  int max_detections = 100;
  int num_proposals = 100;
  double detection_nms_iou = 0.5;
  double mask_threshold = 0.5;
  ProposalOptions proposals;
};

/// One classified and refined ROI that survived thresholding and per-class NMS.
struct RoiDecision {
  Box proposal;
  core::ClassDistribution distribution;
  int label = 0;
  double score = 0.0;
  Box refined;
  /// Position of the proposal in the input list.
  std::size_t source_index = 0;
};

/// Class for a distribution: argmax over all N+1 entries, ties to the lowest id. 0 means background.
int predicted_class(const core::ClassDistribution& dist);

/// Apply one class-specific delta to a proposal; clamps log-size deltas and clips to the image.
Box refine_box(const Box& proposal, const BoxDelta& delta, int image_width, int image_height);

/// Proposal -> 7x7 align -> cls + box heads -> refined boxes; drops background and low scores,
/// then per-class NMS and the max_detections cap.
std::vector<RoiDecision> classify_and_refine(const PipelineModel& model, const FeatureMap& fm,
                                             const std::vector<Proposal>& proposals, const InferenceOptions& options);

/// Same selection rules applied to already-classified candidates.
std::vector<RoiDecision> select_detections(std::vector<RoiDecision> candidates, const InferenceOptions& options);

/// Bilinear upsample of sigmoid probabilities into the box, then threshold. Pixels outside the box stay 0.
core::BinaryMask paste_mask(const core::MaskLogits& logits, const Box& box, int image_width, int image_height,
                            double threshold = 0.5);

std::vector<Detection> baseline_inference(const PipelineModel& model, const core::Tensor& image,
                                          const InferenceOptions& options = {});

/// Shared tail: proposals from the learned RPN.
std::vector<Proposal> inference_proposals(const PipelineModel& model, const FeatureMap& fm,
                                          const InferenceOptions& options);

}  // namespace maskuno::pipeline
