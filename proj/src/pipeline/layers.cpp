// SPDX-License-Identifier: Apache-2.0

#include "maskuno/pipeline/layers.hpp"

#include <algorithm>
#include <cmath>

#include "maskuno/core/error.hpp"

namespace maskuno::pipeline {

namespace {

// Eight independent partial sums so the compiler can vectorize without reassociation flags.
float dot(const float* __restrict a, const float* __restrict b, int n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

void axpy(float* __restrict y, float a, const float* __restrict x, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

float sum(const float* a, int n) {
  static const std::vector<float> ones(4096, 1.0f);
  float total = 0.0f;
  for (int i = 0; i < n; i += 4096) total += dot(a + i, ones.data(), std::min(4096, n - i));
  return total;
}

void fill_normal(Tensor& t, core::Rng& rng, double stddev) {
  for (auto& v : t.values()) v = float(stddev * core::normal01(rng));
}

void require_shape(const Tensor& x, int rank, const char* what) {
  if (x.rank() != rank) fail(ErrorKind::InvalidArgument, std::string(what) + ": unexpected input rank " + x.shape_string());
}

}  // namespace

const char* to_string(SubHead owner) {
  switch (owner) {
    case SubHead::Backbone: return "backbone";
    case SubHead::Proposal: return "proposal";
    case SubHead::Cls: return "cls";
    case SubHead::Box: return "box";
    case SubHead::Mask: return "mask";
  }
  return "?";
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in, int out, int k, int s, int p)
    : in_channels(in), out_channels(out), kernel(k), stride(s), pad(p),
      weight({out, in, k, k}), bias({out}), grad_weight({out, in, k, k}), grad_bias({out}) {}

void Conv2d::im2col(const Tensor& x, std::vector<float>& col, int oh, int ow) const {
  const int h = x.dim(1), w = x.dim(2);
  const int plane = oh * ow;
  col.assign(std::size_t(in_channels) * kernel * kernel * plane, 0.0f);
  for (int c = 0; c < in_channels; ++c) {
    const float* src = x.data() + std::size_t(c) * h * w;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        float* dst = col.data() + (std::size_t(c * kernel + ky) * kernel + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[oy * ow + ox] = src[iy * w + ix];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  require_shape(x, 3, "Conv2d");
  if (x.dim(0) != in_channels) fail(ErrorKind::InvalidArgument, "Conv2d: channel mismatch " + x.shape_string());
  const int oh = out_size(x.dim(1)), ow = out_size(x.dim(2));
  const int plane = oh * ow, depth = in_channels * kernel * kernel;
  thread_local std::vector<float> col;
  const float* cols;
  if (kernel == 1 && stride == 1 && pad == 0) {
    cols = x.data();
  } else {
    im2col(x, col, oh, ow);
    cols = col.data();
  }
  Tensor out({out_channels, oh, ow});
  for (int o = 0; o < out_channels; ++o) {
    float* row = out.data() + std::size_t(o) * plane;
    std::fill(row, row + plane, bias[std::size_t(o)]);
    const float* wrow = weight.data() + std::size_t(o) * depth;
    for (int k = 0; k < depth; ++k) axpy(row, wrow[k], cols + std::size_t(k) * plane, plane);
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad) {
  const int h = x.dim(1), w = x.dim(2);
  const int oh = out_size(h), ow = out_size(w);
  const int plane = oh * ow, depth = in_channels * kernel * kernel;
  thread_local std::vector<float> col;
  const bool direct = kernel == 1 && stride == 1 && pad == 0;
  const float* cols;
  if (direct) {
    cols = x.data();
  } else {
    im2col(x, col, oh, ow);
    cols = col.data();
  }
  for (int o = 0; o < out_channels; ++o) {
    const float* g = grad_out.data() + std::size_t(o) * plane;
    grad_bias[std::size_t(o)] += sum(g, plane);
    float* gw = grad_weight.data() + std::size_t(o) * depth;
    for (int k = 0; k < depth; ++k) gw[k] += dot(g, cols + std::size_t(k) * plane, plane);
  }
  if (!want_input_grad) return {};

  std::vector<float> gcol(std::size_t(depth) * plane, 0.0f);
  for (int o = 0; o < out_channels; ++o) {
    const float* g = grad_out.data() + std::size_t(o) * plane;
    const float* wrow = weight.data() + std::size_t(o) * depth;
    for (int k = 0; k < depth; ++k) axpy(gcol.data() + std::size_t(k) * plane, wrow[k], g, plane);
  }
  if (direct) {
    Tensor gx({in_channels, h, w});
    std::copy(gcol.begin(), gcol.end(), gx.data());
    return gx;
  }
  Tensor gx({in_channels, h, w});
  for (int c = 0; c < in_channels; ++c) {
    float* dst = gx.data() + std::size_t(c) * h * w;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const float* src = gcol.data() + (std::size_t(c * kernel + ky) * kernel + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[iy * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
  return gx;
}

void Conv2d::init_he(core::Rng& rng) {
  fill_normal(weight, rng, std::sqrt(2.0 / (in_channels * kernel * kernel)));
  bias.fill(0.0f);
}

void Conv2d::init_normal(core::Rng& rng, double stddev) {
  fill_normal(weight, rng, stddev);
  bias.fill(0.0f);
}

void Conv2d::collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix) {
  out.push_back({owner, prefix + "/weight", &weight, &grad_weight});
  out.push_back({owner, prefix + "/bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------- Upsample2x

Upsample2x::Upsample2x(int in, int out)
    : in_channels(in), out_channels(out), weight({in, out, 2, 2}), bias({out}), grad_weight({in, out, 2, 2}),
      grad_bias({out}) {}

Tensor Upsample2x::forward(const Tensor& x) const {
  require_shape(x, 3, "Upsample2x");
  if (x.dim(0) != in_channels) fail(ErrorKind::InvalidArgument, "Upsample2x: channel mismatch " + x.shape_string());
  const int h = x.dim(1), w = x.dim(2), plane = h * w;
  Tensor out({out_channels, 2 * h, 2 * w});
  std::vector<float> tmp(static_cast<std::size_t>(plane));
  for (int o = 0; o < out_channels; ++o) {
    for (int q = 0; q < 4; ++q) {
      std::fill(tmp.begin(), tmp.end(), bias[std::size_t(o)]);
      for (int i = 0; i < in_channels; ++i)
        axpy(tmp.data(), weight[(std::size_t(i) * out_channels + o) * 4 + q], x.data() + std::size_t(i) * plane, plane);
      const int dy = q / 2, dx = q % 2;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out.at(o, 2 * y + dy, 2 * xx + dx) = tmp[std::size_t(y * w + xx)];
    }
  }
  return out;
}

Tensor Upsample2x::backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad) {
  const int h = x.dim(1), w = x.dim(2), plane = h * w;
  Tensor gx;
  if (want_input_grad) gx = Tensor({in_channels, h, w});
  std::vector<float> g(static_cast<std::size_t>(plane));
  for (int o = 0; o < out_channels; ++o) {
    for (int q = 0; q < 4; ++q) {
      const int dy = q / 2, dx = q % 2;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) g[std::size_t(y * w + xx)] = grad_out.at(o, 2 * y + dy, 2 * xx + dx);
      grad_bias[std::size_t(o)] += sum(g.data(), plane);
      for (int i = 0; i < in_channels; ++i) {
        const std::size_t widx = (std::size_t(i) * out_channels + o) * 4 + q;
        grad_weight[widx] += dot(g.data(), x.data() + std::size_t(i) * plane, plane);
        if (want_input_grad) axpy(gx.data() + std::size_t(i) * plane, weight[widx], g.data(), plane);
      }
    }
  }
  return gx;
}

void Upsample2x::init_he(core::Rng& rng) {
  fill_normal(weight, rng, std::sqrt(2.0 / in_channels));
  bias.fill(0.0f);
}

void Upsample2x::collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix) {
  out.push_back({owner, prefix + "/weight", &weight, &grad_weight});
  out.push_back({owner, prefix + "/bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------- Linear

Linear::Linear(int in, int out)
    : in_features(in), out_features(out), weight({out, in}), bias({out}), grad_weight({out, in}), grad_bias({out}) {}

Tensor Linear::forward(const Tensor& x) const {
  if (int(x.size()) != in_features)
    fail(ErrorKind::InvalidArgument, "Linear: expected " + std::to_string(in_features) + " inputs, got " + x.shape_string());
  Tensor out({out_features});
  for (int o = 0; o < out_features; ++o)
    out[std::size_t(o)] = bias[std::size_t(o)] + dot(weight.data() + std::size_t(o) * in_features, x.data(), in_features);
  return out;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad) {
  Tensor gx;
  if (want_input_grad) gx = Tensor(x.shape());
  for (int o = 0; o < out_features; ++o) {
    const float g = grad_out[std::size_t(o)];
    grad_bias[std::size_t(o)] += g;
    if (g == 0.0f) continue;
    axpy(grad_weight.data() + std::size_t(o) * in_features, g, x.data(), in_features);
    if (want_input_grad) axpy(gx.data(), g, weight.data() + std::size_t(o) * in_features, in_features);
  }
  return gx;
}

void Linear::init_he(core::Rng& rng) {
  fill_normal(weight, rng, std::sqrt(2.0 / in_features));
  bias.fill(0.0f);
}

void Linear::init_normal(core::Rng& rng, double stddev) {
  fill_normal(weight, rng, stddev);
  bias.fill(0.0f);
}

void Linear::collect(std::vector<ParamSlot>& out, SubHead owner, const std::string& prefix) {
  out.push_back({owner, prefix + "/weight", &weight, &grad_weight});
  out.push_back({owner, prefix + "/bias", &bias, &grad_bias});
}

void relu_inplace(Tensor& x) {
  for (auto& v : x.values()) v = v > 0.0f ? v : 0.0f;
}

void relu_backward_inplace(Tensor& grad, const Tensor& activation) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activation[i] > 0.0f)) grad[i] = 0.0f;
}

}  // namespace maskuno::pipeline
