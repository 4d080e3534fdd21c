// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "maskuno/core/random.hpp"
#include "maskuno/core/tensor.hpp"

namespace maskuno::pipeline {

using core::Tensor;

/// The sub-head that owns a parameter. Freezing and isolation work on this tag.
enum class SubHead { Backbone, Proposal, Cls, Box, Mask };

const char* to_string(SubHead owner);

struct ParamSlot {
  SubHead owner;
  std::string name;
  Tensor* value;
  Tensor* grad;
};

struct ConstParamSlot {
  SubHead owner;
  std::string name;
  const Tensor* value;
};

/// Layers are stateless apart from parameters and their accumulated gradients.
/// backward() takes the forward input again and adds into grad_* tensors.

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad);

  void init_he(core::Rng& rng);
  void init_normal(core::Rng& rng, double stddev);
  void collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix);

  int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, pad = 0;
  Tensor weight, bias;  // (out, in, k, k), (out)
  Tensor grad_weight, grad_bias;

 private:
  int out_size(int n) const { return (n + 2 * pad - kernel) / stride + 1; }
  void im2col(const Tensor& x, std::vector<float>& col, int oh, int ow) const;
};

/// Transposed 2x2 convolution with stride 2 (doubles spatial size).
class Upsample2x {
 public:
  Upsample2x() = default;
  Upsample2x(int in_channels, int out_channels);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad);

  void init_he(core::Rng& rng);
  void collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix);

  int in_channels = 0, out_channels = 0;
  Tensor weight, bias;  // (in, out, 2, 2), (out)
  Tensor grad_weight, grad_bias;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad);

  void init_he(core::Rng& rng);
  void init_normal(core::Rng& rng, double stddev);
  void collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix);

  int in_features = 0, out_features = 0;
  Tensor weight, bias;  // (out, in), (out)
  Tensor grad_weight, grad_bias;
};

void relu_inplace(Tensor& x);
/// grad *= (activation > 0), where activation is the ReLU output.
void relu_backward_inplace(Tensor& grad, const Tensor& activation);

}  // namespace maskuno::pipeline
