// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace maskuno::core {

/// Axis-aligned box in continuous pixel coordinates, corner form.
/// Pixel (x, y) covers [x, x+1) x [y, y+1).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const;

  bool operator==(const Box&) const = default;
};

/// Center offsets normalized by reference size, log-scale size ratios.
struct BoxDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  bool finite() const;
};

/// Dense binary bitmap, row-major, one byte per pixel holding 0 or 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width);

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return height_ == 0 || width_ == 0; }

  std::uint8_t at(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int y, int x, bool on) { bits_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }

  const std::vector<std::uint8_t>& bits() const { return bits_; }

  /// Number of set pixels.
  std::int64_t count() const;

  /// Tight bounding box of the set pixels; invalid box when the mask is empty.
  Box tight_box() const;

  bool operator==(const BinaryMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

double box_iou(const Box& a, const Box& b);
double mask_iou(const BinaryMask& a, const BinaryMask& b);

BoxDelta encode_box_delta(const Box& target, const Box& reference);
Box decode_box_delta(const BoxDelta& delta, const Box& reference);

/// Clip a box to [0, width] x [0, height].
Box clip_box(const Box& box, int width, int height);

}  // namespace maskuno::core
