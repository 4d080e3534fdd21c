// SPDX-License-Identifier: Apache-2.0

#include "maskuno/synth/shapesynth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "maskuno/core/digest.hpp"
#include "maskuno/core/error.hpp"

namespace maskuno::synth {

namespace {

using core::Rng;
using core::uniform;
using core::uniform01;

enum Stream : std::uint64_t { kLayout = 0, kGeometry = 1, kAppearance = 2 };

constexpr std::array<std::array<double, 3>, 5> kPalette{{
    {0.90, 0.30, 0.30},
    {0.30, 0.85, 0.35},
    {0.30, 0.40, 0.95},
    {0.90, 0.85, 0.30},
    {0.85, 0.35, 0.90},
}};

struct ShapeGeometry {
  ShapeKind kind;
  double cx, cy, scale, angle, aspect;

  // Radius of a disk that contains the shape.
  double reach() const {
    switch (kind) {
      case ShapeKind::Rectangle: return scale * std::sqrt(1.0 + aspect * aspect);
      default: return scale;
    }
  }

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    switch (kind) {
      case ShapeKind::Disk: return u * u + v * v <= scale * scale;
      case ShapeKind::Rectangle: return std::abs(u) <= scale && std::abs(v) <= scale * aspect;
      case ShapeKind::Triangle: {
        for (int k = 0; k < 3; ++k) {
          const double t = std::numbers::pi / 2 + k * 2.0 * std::numbers::pi / 3.0;
          if (u * std::cos(t) + v * std::sin(t) > 0.5 * scale) return false;
        }
        return true;
      }
      case ShapeKind::Ellipse: {
        const double a = u / scale, b = v / (scale * aspect);
        return a * a + b * b <= 1.0;
      }
      case ShapeKind::Ring: {
        const double r2 = u * u + v * v;
        return r2 <= scale * scale && r2 >= 0.3025 * scale * scale;
      }
    }
    return false;
  }
};

BinaryMask rasterize(const ShapeGeometry& g, int height, int width) {
  BinaryMask m(height, width);
  const double r = g.reach() + 1.0;
  const int x0 = std::max(0, int(std::floor(g.cx - r))), x1 = std::min(width - 1, int(std::ceil(g.cx + r)));
  const int y0 = std::max(0, int(std::floor(g.cy - r))), y1 = std::min(height - 1, int(std::ceil(g.cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (g.contains(x + 0.5, y + 0.5)) m.set(y, x, true);
  return m;
}

bool intersects(const BinaryMask& a, const BinaryMask& b) {
  const auto& pa = a.bits();
  const auto& pb = b.bits();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i] & pb[i]) return true;
  return false;
}

ShapeGeometry draw_geometry(Rng& rng, ShapeKind kind, double scale, int size) {
  ShapeGeometry g{kind, 0, 0, scale, uniform(rng, 0.0, std::numbers::pi), 1.0};
  if (kind == ShapeKind::Rectangle) g.aspect = uniform(rng, 0.45, 0.9);
  if (kind == ShapeKind::Ellipse) g.aspect = uniform(rng, 0.4, 0.65);
  const double r = std::min(g.reach(), 0.5 * size - 1.0);
  g.cx = uniform(rng, r, size - r);
  g.cy = uniform(rng, r, size - r);
  return g;
}

}  // namespace

std::string to_string(Split split) { return split == Split::Train ? "train" : "val"; }

void DatasetSpec::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::InvalidArgument, "DatasetSpec: " + m); };
  if (num_classes < 1) bad("num_classes must be >= 1");
  if (train_samples < 0 || val_samples < 0) bad("sample counts must be >= 0");
  if (image_size < 16) bad("image_size must be >= 16");
  if (min_instances < 0 || max_instances < min_instances) bad("instance range invalid");
  if (!(min_scale >= 1.0) || max_scale < min_scale) bad("scale range invalid");
  if (2.0 * min_scale >= image_size) bad("min_scale does not fit the canvas");
  if (rare_class < 0 || rare_class > num_classes) bad("rare_class out of range");
  if (!(rare_weight > 0.0)) bad("rare_weight must be positive");
  if (!allow_occlusion) {
    const double min_area = std::numbers::pi * min_scale * min_scale * 0.25;
    if (max_instances * min_area > 0.5 * double(image_size) * image_size) {
      std::ostringstream os;
      os << max_instances << " non-overlapping instances of scale >= " << min_scale << " cannot fit a "
         << image_size << "x" << image_size << " canvas";
      fail(ErrorKind::Data, "DatasetSpec: " + os.str());
    }
  }
}

ShapeKind shape_for_class(int class_id) { return static_cast<ShapeKind>((class_id - 1) % 5); }

std::string class_name(int class_id) {
  static constexpr std::array<const char*, 5> kNames{"disk", "rectangle", "triangle", "ellipse", "ring"};
  std::string name = kNames[static_cast<std::size_t>((class_id - 1) % 5)];
  if (class_id > 5) name += "_" + std::to_string((class_id - 1) / 5 + 1);
  return name;
}

std::vector<double> class_weights(const DatasetSpec& spec) {
  std::vector<double> w(static_cast<std::size_t>(spec.num_classes) + 1, 1.0);
  w[0] = 0.0;
  if (spec.rare_class > 0) w[static_cast<std::size_t>(spec.rare_class)] = spec.rare_weight;
  return w;
}

std::vector<int> draw_instance_classes(const DatasetSpec& spec, Split split, std::int64_t index) {
  Rng rng = core::make_rng(spec.seed, {std::uint64_t(split), std::uint64_t(index), kLayout});
  const int span = spec.max_instances - spec.min_instances + 1;
  const int count = spec.min_instances + std::min(span - 1, int(uniform01(rng) * span));
  const auto weights = class_weights(spec);
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<int> classes;
  for (int i = 0; i < count; ++i) {
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    int pick = spec.num_classes;
    for (int c = 1; c <= spec.num_classes; ++c) {
      acc += weights[static_cast<std::size_t>(c)];
      if (u < acc) {
        pick = c;
        break;
      }
    }
    classes.push_back(pick);
  }
  return classes;
}

SceneSample generate_sample(const DatasetSpec& spec, Split split, std::int64_t index) {
  spec.validate();
  const int size = spec.image_size;
  const auto classes = draw_instance_classes(spec, split, index);
  Rng geo = core::make_rng(spec.seed, {std::uint64_t(split), std::uint64_t(index), kGeometry});
  Rng look = core::make_rng(spec.seed, {std::uint64_t(split), std::uint64_t(index), kAppearance});

  SceneSample sample;
  sample.sample_id = index;
  sample.height = size;
  sample.width = size;
  sample.image = core::Tensor({3, size, size});

  // Background: per-channel level, linear gradient, pixel noise.
  std::array<double, 3> level{};
  for (auto& l : level) l = uniform(look, 0.05, 0.35);
  const double gx = uniform(look, -0.1, 0.1), gy = uniform(look, -0.1, 0.1);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        sample.image.at(c, y, x) = float(level[std::size_t(c)] + gx * x / size + gy * y / size);

  struct Placed {
    int cls;
    BinaryMask full;
    BinaryMask visible;
  };
  std::vector<Placed> placed;
  const double log_lo = std::log(spec.min_scale), log_hi = std::log(spec.max_scale);

  for (int cls : classes) {
    const ShapeKind kind = shape_for_class(cls);
    double scale = std::exp(uniform(geo, log_lo, log_hi));
    BinaryMask mask;
    bool ok = false;
    while (!ok) {
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        const ShapeGeometry g = draw_geometry(geo, kind, scale, size);
        mask = rasterize(g, size, size);
        if (mask.count() == 0) continue;
        ok = spec.allow_occlusion || std::none_of(placed.begin(), placed.end(),
                                                  [&](const Placed& p) { return intersects(p.full, mask); });
      }
      if (ok) break;
      if (scale <= spec.min_scale) {
        std::ostringstream os;
        os << "sample " << index << ": cannot place " << classes.size()
           << " non-overlapping instances on the canvas";
        fail(ErrorKind::Data, os.str());
      }
      scale = std::max(spec.min_scale, scale * 0.8);
    }
    // Later instances sit on top.
    for (auto& p : placed) {
      auto bits = p.visible;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (mask.at(y, x)) bits.set(y, x, false);
      p.visible = std::move(bits);
    }
    placed.push_back({cls, mask, mask});

    const auto& base = kPalette[std::size_t((cls - 1) % 5)];
    std::array<double, 3> color{};
    for (int c = 0; c < 3; ++c) color[std::size_t(c)] = std::clamp(base[std::size_t(c)] + uniform(look, -0.12, 0.12), 0.0, 1.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (mask.at(y, x))
          for (int c = 0; c < 3; ++c) sample.image.at(c, y, x) = float(color[std::size_t(c)]);
  }

  for (std::size_t i = 0; i < sample.image.size(); ++i)
    sample.image[i] = std::clamp(float(sample.image[i] + 0.03 * core::normal01(look)), 0.0f, 1.0f);

  for (auto& p : placed) {
    const std::int64_t visible = p.visible.count();
    if (visible == 0 || double(visible) < spec.min_visible_fraction * double(p.full.count())) continue;
    InstanceAnnotation ann;
    ann.label = ClassLabel{p.cls};
    ann.box = p.visible.tight_box();
    ann.area = visible;
    ann.mask = std::move(p.visible);
    sample.annotations.push_back(std::move(ann));
  }
  return sample;
}

std::vector<SceneSample> generate_split(const DatasetSpec& spec, Split split) {
  spec.validate();
  const int n = split == Split::Train ? spec.train_samples : spec.val_samples;
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_sample(spec, split, i));
  return out;
}

PerClassSplit split_validation_per_class(const std::vector<SceneSample>& samples, ClassLabel label,
                                         int num_classes) {
  if (label.id < 1 || label.id > num_classes) {
    fail(ErrorKind::InvalidArgument, "split_validation_per_class: class " + std::to_string(label.id) +
                                         " is not a foreground class");
  }
  PerClassSplit out;
  for (const auto& s : samples) {
    SceneSample kept;
    kept.sample_id = s.sample_id;
    kept.height = s.height;
    kept.width = s.width;
    for (const auto& a : s.annotations)
      if (a.label == label) kept.annotations.push_back(a);
    if (kept.annotations.empty()) continue;
    kept.image = s.image;
    out.samples.push_back(std::move(kept));
  }
  if (out.samples.empty()) out.warning = "class " + std::to_string(label.id) + " does not occur in this split";
  return out;
}

std::string annotations_digest(const std::vector<SceneSample>& samples) {
  core::Digest d;
  for (const auto& s : samples) {
    std::ostringstream os;
    os << "sample " << s.sample_id << " " << s.height << "x" << s.width << " n=" << s.annotations.size() << "\n";
    d.update(os.str());
    for (const auto& a : s.annotations) {
      std::ostringstream as;
      as.precision(17);
      as << a.label.id << " " << a.box.x1 << " " << a.box.y1 << " " << a.box.x2 << " " << a.box.y2 << " "
         << a.area << "\n";
      d.update(as.str());
      d.update_values(std::span(a.mask.bits()));
    }
  }
  return d.hex();
}

}  // namespace maskuno::synth
