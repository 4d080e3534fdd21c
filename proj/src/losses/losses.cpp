// SPDX-License-Identifier: Apache-2.0

#include "maskuno/losses/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "maskuno/core/error.hpp"

namespace maskuno::losses {

namespace {

double clamp_prob(double p) { return std::clamp(p, kEpsilon, 1.0); }

double reduce(double total, std::size_t n, Reduction r) {
  return r == Reduction::Mean && n > 0 ? total / double(n) : total;
}

void check_resolution(std::size_t n, const BinaryMask& target) {
  if (n != std::size_t(target.height()) * std::size_t(target.width()))
    fail(ErrorKind::InvalidArgument, "mask_bce: prediction has " + std::to_string(n) + " pixels, target is " +
                                         std::to_string(target.height()) + "x" + std::to_string(target.width()));
}

double bce_term(double p, bool y) {
  const double q = clamp_prob(p), r = clamp_prob(1.0 - p);
  return y ? -std::log(q) : -std::log(r);
}

}  // namespace

LossValue cls_cross_entropy(const ClassDistribution& dist, ClassLabel truth) {
  if (truth.id < 0 || std::size_t(truth.id) >= dist.size())
    fail(ErrorKind::InvalidArgument, "cls_cross_entropy: label " + std::to_string(truth.id) + " outside [0, " +
                                         std::to_string(dist.size() - 1) + "]");
  return {-std::log(clamp_prob(dist[std::size_t(truth.id)])), Reduction::Sum, 1};
}

std::vector<double> cls_cross_entropy_logit_grad(const ClassDistribution& dist, ClassLabel truth) {
  if (truth.id < 0 || std::size_t(truth.id) >= dist.size())
    fail(ErrorKind::InvalidArgument, "cls_cross_entropy: label out of range");
  std::vector<double> g = dist.probs();
  g[std::size_t(truth.id)] -= 1.0;
  return g;
}

double smooth_l1_term(double x) {
  if (!std::isfinite(x)) fail(ErrorKind::InvalidArgument, "smooth_l1: non-finite input");
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_derivative(double x) {
  if (!std::isfinite(x)) fail(ErrorKind::InvalidArgument, "smooth_l1: non-finite input");
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

LossValue smooth_l1(double x) { return {smooth_l1_term(x), Reduction::Sum, 1}; }

LossValue smooth_l1(std::span<const double> x, Reduction reduction) {
  double total = 0.0;
  for (double v : x) total += smooth_l1_term(v);
  return {reduce(total, x.size(), reduction), reduction, x.size()};
}

std::vector<double> smooth_l1_grad(std::span<const double> x, Reduction reduction) {
  std::vector<double> g(x.size());
  const double scale = reduction == Reduction::Mean && !x.empty() ? 1.0 / double(x.size()) : 1.0;
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = smooth_l1_derivative(x[i]) * scale;
  return g;
}

LossValue mask_bce(std::span<const double> probs, const BinaryMask& target, Reduction reduction) {
  check_resolution(probs.size(), target);
  const auto& bits = target.bits();
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) total += bce_term(probs[i], bits[i] != 0);
  return {reduce(total, probs.size(), reduction), reduction, probs.size()};
}

LossValue mask_bce(const core::MaskLogits& logits, const BinaryMask& target, Reduction reduction) {
  const auto probs = logits.probabilities();
  return mask_bce(probs, target, reduction);
}

std::vector<double> mask_bce_prob_grad(std::span<const double> probs, const BinaryMask& target, Reduction reduction) {
  check_resolution(probs.size(), target);
  const auto& bits = target.bits();
  const double scale = reduction == Reduction::Mean && !probs.empty() ? 1.0 / double(probs.size()) : 1.0;
  std::vector<double> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (bits[i])
      g[i] = p > kEpsilon ? -1.0 / p : 0.0;
    else
      g[i] = 1.0 - p > kEpsilon ? 1.0 / (1.0 - p) : 0.0;
    g[i] *= scale;
  }
  return g;
}

LossValue mask_bce_with_logits(std::span<const float> logits, const BinaryMask& target, Reduction reduction,
                               std::span<float> grad) {
  check_resolution(logits.size(), target);
  if (grad.size() != logits.size()) fail(ErrorKind::InvalidArgument, "mask_bce_with_logits: gradient size mismatch");
  const auto& bits = target.bits();
  const double scale = reduction == Reduction::Mean && !logits.empty() ? 1.0 / double(logits.size()) : 1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double p = core::sigmoid(z);
    total += bce_term(p, bits[i] != 0);
    grad[i] = float((p - (bits[i] ? 1.0 : 0.0)) * scale);
  }
  return {reduce(total, logits.size(), reduction), reduction, logits.size()};
}

BinaryMask mask_target(const core::Box& roi, const BinaryMask& gt_mask, int m) {
  if (m < 1) fail(ErrorKind::InvalidArgument, "mask_target: resolution must be >= 1");
  if (!roi.valid()) fail(ErrorKind::Geometry, "mask_target: degenerate ROI");
  BinaryMask out(m, m);
  const double bw = roi.width() / m, bh = roi.height() / m;
  for (int i = 0; i < m; ++i) {
    const int py = int(std::floor(roi.y1 + (i + 0.5) * bh));
    if (py < 0 || py >= gt_mask.height()) continue;
    for (int j = 0; j < m; ++j) {
      const int px = int(std::floor(roi.x1 + (j + 0.5) * bw));
      if (px < 0 || px >= gt_mask.width()) continue;
      if (gt_mask.at(py, px)) out.set(i, j, true);
    }
  }
  return out;
}

BinaryMask per_class_mask_loss_target(const core::Box& roi, ClassLabel head_class, const synth::InstanceAnnotation& gt,
                                      int m) {
  if (gt.label != head_class)
    fail(ErrorKind::InvalidArgument, "per_class_mask_loss_target: ROI matched to class " +
                                         std::to_string(gt.label.id) + ", head owns class " +
                                         std::to_string(head_class.id));
  return mask_target(roi, gt.mask, m);
}

}  // namespace maskuno::losses
