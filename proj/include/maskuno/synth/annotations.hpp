// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "maskuno/synth/shapesynth.hpp"

namespace maskuno::synth {

inline constexpr int kAnnotationFormatVersion = 1;
inline constexpr int kImageFormatVersion = 1;

struct Category {
  int id = 0;
  std::string name;
};

std::vector<Category> default_categories(int num_classes);

/// COCO-style annotation document. Masks are dense row-major bit grids,
/// hex-packed MSB first. Images are written separately.
void write_annotations(const std::vector<SceneSample>& samples, const std::vector<Category>& categories,
                       const std::filesystem::path& path);
std::string annotations_to_string(const std::vector<SceneSample>& samples, const std::vector<Category>& categories);

struct AnnotationFile {
  int version = 0;
  std::vector<Category> categories;
  std::vector<SceneSample> samples;  // images left empty
};

AnnotationFile read_annotations(const std::filesystem::path& path);
AnnotationFile parse_annotations(const std::string& text);

/// Binary image container: magic "MUIMAGES", u32 version, u32 count, u32 H, u32 W, u32 C,
/// then count images of row-major (H, W, C) little-endian float32.
void write_images(const std::vector<SceneSample>& samples, const std::filesystem::path& path);
std::vector<core::Tensor> read_images(const std::filesystem::path& path);

/// Dataset directory: {train,val}.json, {train,val}.images.bin, spec.json.
void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec);
std::vector<SceneSample> load_split(const std::filesystem::path& dir, Split split);
DatasetSpec load_dataset_spec(const std::filesystem::path& dir);
std::string dataset_digest(const std::filesystem::path& dir);

std::string encode_mask_bits(const core::BinaryMask& mask);
core::BinaryMask decode_mask_bits(const std::string& hex, int height, int width);

}  // namespace maskuno::synth
