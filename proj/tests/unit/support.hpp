// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "maskuno/core/geometry.hpp"
#include "maskuno/core/random.hpp"
#include "maskuno/synth/shapesynth.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using maskuno::core::BinaryMask;
using maskuno::core::Box;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() / ("maskuno-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
                                         std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& child) const { return path_ / child; }

 private:
  fs::path path_;
};

/// Mask with the pixel rectangle [x, x+w) x [y, y+h) set.
inline BinaryMask rect_mask(int height, int width, int x, int y, int w, int h) {
  BinaryMask m(height, width);
  for (int yy = y; yy < y + h; ++yy)
    for (int xx = x; xx < x + w; ++xx) m.set(yy, xx, true);
  return m;
}

inline maskuno::synth::InstanceAnnotation rect_instance(int height, int width, int class_id, int x, int y, int w,
                                                        int h) {
  maskuno::synth::InstanceAnnotation a;
  a.label = maskuno::core::ClassLabel{class_id};
  a.mask = rect_mask(height, width, x, y, w, h);
  a.box = a.mask.tight_box();
  a.area = a.mask.count();
  return a;
}

inline Box random_box(maskuno::core::Rng& rng, double extent) {
  const double x1 = maskuno::core::uniform(rng, 0.0, extent * 0.8);
  const double y1 = maskuno::core::uniform(rng, 0.0, extent * 0.8);
  const double w = maskuno::core::uniform(rng, 1.0, extent - x1);
  const double h = maskuno::core::uniform(rng, 1.0, extent - y1);
  return {x1, y1, x1 + w, y1 + h};
}

inline maskuno::synth::DatasetSpec tiny_spec(int classes = 3, int train = 24, int val = 12) {
  maskuno::synth::DatasetSpec spec;
  spec.num_classes = classes;
  spec.train_samples = train;
  spec.val_samples = val;
  spec.rare_class = 0;
  spec.seed = 11;
  return spec;
}

}  // namespace testsupport
