// SPDX-License-Identifier: Apache-2.0

#include "maskuno/core/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "maskuno/core/error.hpp"

namespace maskuno::core {

namespace {

void require_valid(const Box& b, const char* what) {
  if (!b.valid()) {
    std::ostringstream os;
    os << what << ": degenerate box (" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ")";
    fail(ErrorKind::Geometry, os.str());
  }
}

}  // namespace

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 > x1 &&
         y2 > y1;
}

bool BoxDelta::finite() const {
  return std::isfinite(dx) && std::isfinite(dy) && std::isfinite(dw) && std::isfinite(dh);
}

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
  if (height < 0 || width < 0) fail(ErrorKind::InvalidArgument, "BinaryMask: negative dimensions");
  bits_.assign(static_cast<std::size_t>(height) * width, 0);
}

std::int64_t BinaryMask::count() const {
  return std::count(bits_.begin(), bits_.end(), std::uint8_t{1});
}

Box BinaryMask::tight_box() const {
  int min_x = width_, min_y = height_, max_x = -1, max_y = -1;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      if (!at(y, x)) continue;
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
    }
  }
  if (max_x < 0) return Box{};
  return Box{double(min_x), double(min_y), double(max_x + 1), double(max_y + 1)};
}

double box_iou(const Box& a, const Box& b) {
  require_valid(a, "box_iou");
  require_valid(b, "box_iou");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    std::ostringstream os;
    os << "mask_iou: dimension mismatch " << a.height() << "x" << a.width() << " vs " << b.height() << "x"
       << b.width();
    fail(ErrorKind::InvalidArgument, os.str());
  }
  const auto& pa = a.bits();
  const auto& pb = b.bits();
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    inter += pa[i] & pb[i];
    uni += pa[i] | pb[i];
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

BoxDelta encode_box_delta(const Box& target, const Box& reference) {
  require_valid(target, "encode_box_delta target");
  require_valid(reference, "encode_box_delta reference");
  return BoxDelta{
      (target.center_x() - reference.center_x()) / reference.width(),
      (target.center_y() - reference.center_y()) / reference.height(),
      std::log(target.width() / reference.width()),
      std::log(target.height() / reference.height()),
  };
}

Box decode_box_delta(const BoxDelta& delta, const Box& reference) {
  if (!delta.finite()) fail(ErrorKind::Geometry, "decode_box_delta: non-finite delta");
  require_valid(reference, "decode_box_delta reference");
  const double cx = reference.center_x() + delta.dx * reference.width();
  const double cy = reference.center_y() + delta.dy * reference.height();
  const double w = reference.width() * std::exp(delta.dw);
  const double h = reference.height() * std::exp(delta.dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& box, int width, int height) {
  return Box{std::clamp(box.x1, 0.0, double(width)), std::clamp(box.y1, 0.0, double(height)),
             std::clamp(box.x2, 0.0, double(width)), std::clamp(box.y2, 0.0, double(height))};
}

}  // namespace maskuno::core
