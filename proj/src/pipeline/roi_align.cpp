// SPDX-License-Identifier: Apache-2.0

#include "maskuno/pipeline/roi_align.hpp"

#include <cmath>
#include <sstream>

#include "maskuno/core/error.hpp"

namespace maskuno::pipeline {

namespace {

struct BilinearTap {
  int y_low, y_high, x_low, x_high;
  double w_ll, w_lh, w_hl, w_hh;
  bool valid;
};

// Detectron-style: samples further than one cell outside the map contribute nothing,
// otherwise coordinates clamp to the border.
BilinearTap tap(double y, double x, int height, int width) {
  BilinearTap t{};
  if (y < -1.0 || y > height || x < -1.0 || x > width) return t;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  t.y_low = int(y);
  t.x_low = int(x);
  if (t.y_low >= height - 1) {
    t.y_low = t.y_high = height - 1;
    y = t.y_low;
  } else {
    t.y_high = t.y_low + 1;
  }
  if (t.x_low >= width - 1) {
    t.x_low = t.x_high = width - 1;
    x = t.x_low;
  } else {
    t.x_high = t.x_low + 1;
  }
  const double ly = y - t.y_low, lx = x - t.x_low;
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  t.w_ll = hy * hx;
  t.w_lh = hy * lx;
  t.w_hl = ly * hx;
  t.w_hh = ly * lx;
  t.valid = true;
  return t;
}

void check_box(const FeatureMap& fm, const core::Box& box) {
  constexpr double kTol = 1e-6;
  if (!box.valid() || box.x1 < -kTol || box.y1 < -kTol || box.x2 > fm.image_width() + kTol ||
      box.y2 > fm.image_height() + kTol) {
    std::ostringstream os;
    os << "roi_align: box (" << box.x1 << ", " << box.y1 << ", " << box.x2 << ", " << box.y2
       << ") outside image " << fm.image_width() << "x" << fm.image_height();
    fail(ErrorKind::Geometry, os.str());
  }
}

template <class Visit>
void for_each_sample(const FeatureMap& fm, const core::Box& box, int out_res, Visit&& visit) {
  const double scale = 1.0 / fm.stride;
  const double start_x = box.x1 * scale - 0.5, start_y = box.y1 * scale - 0.5;
  const double bin_w = box.width() * scale / out_res, bin_h = box.height() * scale / out_res;
  for (int py = 0; py < out_res; ++py) {
    for (int px = 0; px < out_res; ++px) {
      for (int iy = 0; iy < kSamplesPerBin; ++iy) {
        const double y = start_y + py * bin_h + (iy + 0.5) * bin_h / kSamplesPerBin;
        for (int ix = 0; ix < kSamplesPerBin; ++ix) {
          const double x = start_x + px * bin_w + (ix + 0.5) * bin_w / kSamplesPerBin;
          visit(py, px, tap(y, x, fm.height(), fm.width()));
        }
      }
    }
  }
}

}  // namespace

RoiFeature roi_align(const FeatureMap& fm, const core::Box& box, int out_res) {
  check_box(fm, box);
  if (out_res < 1) fail(ErrorKind::InvalidArgument, "roi_align: out_res must be positive");
  const int channels = fm.channels(), w = fm.width();
  const std::size_t plane = std::size_t(fm.height()) * w;
  RoiFeature out{core::Tensor({channels, out_res, out_res}), box, -1};
  constexpr double kNorm = 1.0 / (kSamplesPerBin * kSamplesPerBin);
  std::vector<double> acc(std::size_t(channels) * out_res * out_res, 0.0);
  for_each_sample(fm, box, out_res, [&](int py, int px, const BilinearTap& t) {
    if (!t.valid) return;
    for (int c = 0; c < channels; ++c) {
      const float* f = fm.data.data() + c * plane;
      acc[(std::size_t(c) * out_res + py) * out_res + px] +=
          t.w_ll * f[t.y_low * w + t.x_low] + t.w_lh * f[t.y_low * w + t.x_high] +
          t.w_hl * f[t.y_high * w + t.x_low] + t.w_hh * f[t.y_high * w + t.x_high];
    }
  });
  for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = float(acc[i] * kNorm);
  return out;
}

void roi_align_backward(const FeatureMap& fm, const core::Box& box, const core::Tensor& grad_out,
                        core::Tensor& grad_fm) {
  check_box(fm, box);
  const int out_res = grad_out.dim(1), channels = fm.channels(), w = fm.width();
  const std::size_t plane = std::size_t(fm.height()) * w;
  constexpr double kNorm = 1.0 / (kSamplesPerBin * kSamplesPerBin);
  for_each_sample(fm, box, out_res, [&](int py, int px, const BilinearTap& t) {
    if (!t.valid) return;
    for (int c = 0; c < channels; ++c) {
      const double g = grad_out.at(c, py, px) * kNorm;
      if (g == 0.0) continue;
      float* f = grad_fm.data() + c * plane;
      f[t.y_low * w + t.x_low] += float(g * t.w_ll);
      f[t.y_low * w + t.x_high] += float(g * t.w_lh);
      f[t.y_high * w + t.x_low] += float(g * t.w_hl);
      f[t.y_high * w + t.x_high] += float(g * t.w_hh);
    }
  });
}

}  // namespace maskuno::pipeline
