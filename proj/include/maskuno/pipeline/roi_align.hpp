// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "maskuno/core/geometry.hpp"
#include "maskuno/core/tensor.hpp"

namespace maskuno::pipeline {

/// Backbone output: (C, H/stride, W/stride).
struct FeatureMap {
  core::Tensor data;
  int stride = 4;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
  int image_height() const { return height() * stride; }
  int image_width() const { return width() * stride; }
};

/// Fixed-resolution crop of a feature map.
struct RoiFeature {
  core::Tensor data;  // (C, res, res)
  core::Box source_box;
  std::int64_t sample_id = -1;

  int resolution() const { return data.dim(1); }
};

inline constexpr int kSamplesPerBin = 2;

/// Average of 2x2 bilinear samples per output cell, half-pixel aligned, no quantization.
/// The box is in image pixels and must lie inside the image.
RoiFeature roi_align(const FeatureMap& fm, const core::Box& box, int out_res);

/// Scatter the gradient of a roi_align output back onto grad_fm (same shape as fm.data).
void roi_align_backward(const FeatureMap& fm, const core::Box& box, const core::Tensor& grad_out,
                        core::Tensor& grad_fm);

}  // namespace maskuno::pipeline
