// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "maskuno/core/geometry.hpp"
#include "maskuno/core/types.hpp"
#include "maskuno/synth/shapesynth.hpp"

namespace maskuno::losses {

using core::BinaryMask;
using core::ClassDistribution;
using core::ClassLabel;

inline constexpr double kEpsilon = 1e-12;

enum class Reduction { Sum, Mean };

struct LossValue {
  double value = 0.0;
  Reduction reduction = Reduction::Sum;
  std::size_t count = 0;
};

/// -log p[truth], with p clamped to [eps, 1].
LossValue cls_cross_entropy(const ClassDistribution& dist, ClassLabel truth);
/// Gradient of the cross-entropy with respect to the logits that produced dist: p - onehot(truth).
std::vector<double> cls_cross_entropy_logit_grad(const ClassDistribution& dist, ClassLabel truth);

double smooth_l1_term(double x);
double smooth_l1_derivative(double x);
LossValue smooth_l1(double x);
LossValue smooth_l1(std::span<const double> x, Reduction reduction);
std::vector<double> smooth_l1_grad(std::span<const double> x, Reduction reduction);

/// Pixel-wise binary cross-entropy; probs is row-major at the target's resolution.
LossValue mask_bce(std::span<const double> probs, const BinaryMask& target, Reduction reduction);
LossValue mask_bce(const core::MaskLogits& logits, const BinaryMask& target, Reduction reduction);
/// d loss / d prob, using the same clamp as the loss.
std::vector<double> mask_bce_prob_grad(std::span<const double> probs, const BinaryMask& target, Reduction reduction);
/// Loss from raw logits with d loss / d logit = sigmoid(z) - y (per-pixel, then reduced) written to grad.
LossValue mask_bce_with_logits(std::span<const float> logits, const BinaryMask& target, Reduction reduction,
                               std::span<float> grad);

/// Ground-truth mask sampled inside the ROI on an m x m grid by nearest neighbour.
BinaryMask mask_target(const core::Box& roi, const BinaryMask& gt_mask, int m);

/// Training target of a single-class head; the matched instance must belong to that class.
BinaryMask per_class_mask_loss_target(const core::Box& roi, ClassLabel head_class, const synth::InstanceAnnotation& gt,
                                      int m);

}  // namespace maskuno::losses
