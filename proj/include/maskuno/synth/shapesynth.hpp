// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "maskuno/core/geometry.hpp"
#include "maskuno/core/random.hpp"
#include "maskuno/core/tensor.hpp"
#include "maskuno/core/types.hpp"

namespace maskuno::synth {

using core::BinaryMask;
using core::Box;
using core::ClassLabel;

struct InstanceAnnotation {
  ClassLabel label;
  Box box;  // tight bound of mask
  BinaryMask mask;
  std::int64_t area = 0;

  bool operator==(const InstanceAnnotation&) const = default;
};

struct SceneSample {
  std::int64_t sample_id = 0;
  int height = 0;
  int width = 0;
  core::Tensor image;  // (3, H, W), intensities in [0, 1]; empty when only annotations were loaded
  std::vector<InstanceAnnotation> annotations;
};

enum class Split { Train = 0, Val = 1 };

std::string to_string(Split split);

struct DatasetSpec {
  int num_classes = 5;
  int train_samples = 500;
  int val_samples = 100;
  int image_size = 128;
  int min_instances = 1;
  int max_instances = 4;
  /// Characteristic half-extent of a shape, drawn log-uniformly.
  double min_scale = 2.5;
  double max_scale = 22.0;
  bool allow_occlusion = true;
  /// Occluded instances with less than this visible fraction are dropped.
  double min_visible_fraction = 0.25;
  /// 0 disables the under-sampled class.
  int rare_class = 5;
  double rare_weight = 0.35;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Shape vocabulary, cycled when there are more than five classes.
enum class ShapeKind { Disk, Rectangle, Triangle, Ellipse, Ring };

ShapeKind shape_for_class(int class_id);
std::string class_name(int class_id);

/// Relative sampling weight of each foreground class (index 0 unused).
std::vector<double> class_weights(const DatasetSpec& spec);

/// Layout stream of one sample: how many instances and which classes, in depth order.
/// Geometry and appearance use separate streams.
std::vector<int> draw_instance_classes(const DatasetSpec& spec, Split split, std::int64_t index);

SceneSample generate_sample(const DatasetSpec& spec, Split split, std::int64_t index);
std::vector<SceneSample> generate_split(const DatasetSpec& spec, Split split);

struct PerClassSplit {
  std::vector<SceneSample> samples;
  std::optional<std::string> warning;
};

/// Samples containing the class, with other-class annotations removed.
PerClassSplit split_validation_per_class(const std::vector<SceneSample>& samples, ClassLabel label,
                                         int num_classes);

/// Digest over sample ids and annotations (not pixels).
std::string annotations_digest(const std::vector<SceneSample>& samples);

}  // namespace maskuno::synth
