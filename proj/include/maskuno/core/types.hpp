// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "maskuno/core/geometry.hpp"

namespace maskuno::core {

/// Class id in [0, N]; 0 is background.
struct ClassLabel {
  int id = 0;

  bool is_background() const { return id == 0; }
  auto operator<=>(const ClassLabel&) const = default;
};

inline constexpr ClassLabel kBackground{0};

/// Classifier output over background + N foreground classes.
class ClassDistribution {
 public:
  /// Validates entries in [0,1] summing to 1 within 1e-6.
  explicit ClassDistribution(std::vector<double> probs);

  /// Numerically stable softmax of raw scores.
  static ClassDistribution from_logits(std::span<const float> logits);

  int num_foreground() const { return static_cast<int>(probs_.size()) - 1; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& probs() const { return probs_; }

  /// Index of the maximum entry; ties resolve to the lowest index.
  int argmax() const;

 private:
  std::vector<double> probs_;
};

/// Square grid of mask logits, row-major.
struct MaskLogits {
  int resolution = 0;
  std::vector<float> values;

  MaskLogits() = default;
  explicit MaskLogits(int m) : resolution(m), values(static_cast<std::size_t>(m) * m, 0.0f) {}

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * resolution + x]; }
  double probability(int y, int x) const;
  std::vector<double> probabilities() const;
};

double sigmoid(double x);

/// One instance emitted by an inference path.
struct Detection {
  Box box;
  ClassLabel label;
  double score = 0.0;
  BinaryMask mask;
  /// The head's logit plane for the emitted class, before pasting.
  MaskLogits head_logits;
};

inline constexpr int kMaskResolution = 28;

}  // namespace maskuno::core
