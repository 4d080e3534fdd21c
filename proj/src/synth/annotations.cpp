// SPDX-License-Identifier: Apache-2.0

#include "maskuno/synth/annotations.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "maskuno/core/digest.hpp"
#include "maskuno/core/error.hpp"

namespace maskuno::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kImageMagic{'M', 'U', 'I', 'M', 'A', 'G', 'E', 'S'};

[[noreturn]] void parse_error(const std::string& where, const std::string& what) {
  fail(ErrorKind::Parse, "annotations: " + where + ": " + what);
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

json spec_to_json(const DatasetSpec& s) {
  return json{{"num_classes", s.num_classes},     {"train_samples", s.train_samples},
              {"val_samples", s.val_samples},     {"image_size", s.image_size},
              {"min_instances", s.min_instances}, {"max_instances", s.max_instances},
              {"min_scale", s.min_scale},         {"max_scale", s.max_scale},
              {"allow_occlusion", s.allow_occlusion}, {"min_visible_fraction", s.min_visible_fraction},
              {"rare_class", s.rare_class},       {"rare_weight", s.rare_weight},
              {"seed", s.seed}};
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<Category> default_categories(int num_classes) {
  std::vector<Category> out;
  for (int c = 1; c <= num_classes; ++c) out.push_back({c, class_name(c)});
  return out;
}

std::string encode_mask_bits(const core::BinaryMask& mask) {
  static constexpr char kHex[] = "0123456789abcdef";
  const auto& bits = mask.bits();
  std::string out;
  out.reserve((bits.size() + 3) / 4);
  for (std::size_t i = 0; i < bits.size(); i += 4) {
    int nibble = 0;
    for (std::size_t k = 0; k < 4; ++k) nibble = (nibble << 1) | (i + k < bits.size() ? bits[i + k] : 0);
    out.push_back(kHex[nibble]);
  }
  return out;
}

core::BinaryMask decode_mask_bits(const std::string& hex, int height, int width) {
  const std::size_t n = std::size_t(height) * std::size_t(width);
  if (hex.size() != (n + 3) / 4) {
    fail(ErrorKind::Parse, "mask data has " + std::to_string(hex.size()) + " hex digits, expected " +
                               std::to_string((n + 3) / 4));
  }
  core::BinaryMask m(height, width);
  for (std::size_t i = 0; i < n; ++i) {
    const int v = hex_value(hex[i / 4]);
    if (v < 0) fail(ErrorKind::Parse, std::string("mask data has non-hex digit '") + hex[i / 4] + "'");
    const bool on = (v >> (3 - i % 4)) & 1;
    m.set(int(i / std::size_t(width)), int(i % std::size_t(width)), on);
  }
  return m;
}

std::string annotations_to_string(const std::vector<SceneSample>& samples, const std::vector<Category>& categories) {
  json doc;
  doc["format"] = "maskuno-annotations";
  doc["version"] = kAnnotationFormatVersion;
  doc["categories"] = json::array();
  for (const auto& c : categories) doc["categories"].push_back({{"id", c.id}, {"name", c.name}});
  doc["images"] = json::array();
  doc["annotations"] = json::array();
  std::int64_t ann_id = 1;
  for (const auto& s : samples) {
    doc["images"].push_back({{"id", s.sample_id}, {"height", s.height}, {"width", s.width}});
    for (const auto& a : s.annotations) {
      doc["annotations"].push_back({
          {"id", ann_id++},
          {"image_id", s.sample_id},
          {"category_id", a.label.id},
          {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
          {"area", a.area},
          {"mask", {{"encoding", "bits-hex"}, {"data", encode_mask_bits(a.mask)}}},
      });
    }
  }
  return doc.dump(1);
}

void write_annotations(const std::vector<SceneSample>& samples, const std::vector<Category>& categories,
                       const fs::path& path) {
  write_text(path, annotations_to_string(samples, categories));
}

AnnotationFile parse_annotations(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    parse_error("document", e.what());
  }
  AnnotationFile out;
  try {
    if (!doc.contains("version")) parse_error("document", "missing 'version'");
    out.version = doc.at("version").get<int>();
    if (out.version != kAnnotationFormatVersion)
      parse_error("document", "unsupported version " + std::to_string(out.version));
    for (std::size_t i = 0; i < doc.at("categories").size(); ++i) {
      const auto& c = doc["categories"][i];
      out.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    }
  } catch (const json::exception& e) {
    parse_error("document header", e.what());
  }

  for (const char* key : {"images", "annotations"})
    if (!doc.contains(key) || !doc[key].is_array()) parse_error("document", std::string("missing array '") + key + "'");

  std::map<std::int64_t, std::size_t> by_id;
  const auto& images = doc.at("images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where = "image #" + std::to_string(i);
    try {
      SceneSample s;
      s.sample_id = images[i].at("id").get<std::int64_t>();
      s.height = images[i].at("height").get<int>();
      s.width = images[i].at("width").get<int>();
      if (s.height <= 0 || s.width <= 0) parse_error(where, "non-positive dimensions");
      if (!by_id.emplace(s.sample_id, out.samples.size()).second) parse_error(where, "duplicate image id");
      out.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      parse_error(where, e.what());
    }
  }

  const auto& anns = doc.at("annotations");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const auto& a = anns[i];
    std::string where = "annotation #" + std::to_string(i);
    try {
      if (a.contains("id")) where += " (id " + a["id"].dump() + ")";
      const auto image_id = a.at("image_id").get<std::int64_t>();
      const auto it = by_id.find(image_id);
      if (it == by_id.end()) parse_error(where, "unknown image_id " + std::to_string(image_id));
      SceneSample& s = out.samples[it->second];

      InstanceAnnotation ann;
      ann.label = core::ClassLabel{a.at("category_id").get<int>()};
      if (ann.label.id < 1) parse_error(where, "category_id must be a foreground class");
      const auto& bbox = a.at("bbox");
      if (!bbox.is_array() || bbox.size() != 4) parse_error(where, "bbox must be [x, y, w, h]");
      const double x = bbox[0].get<double>(), y = bbox[1].get<double>();
      ann.box = core::Box{x, y, x + bbox[2].get<double>(), y + bbox[3].get<double>()};
      ann.area = a.at("area").get<std::int64_t>();
      const auto& m = a.at("mask");
      if (m.at("encoding").get<std::string>() != "bits-hex") parse_error(where, "unsupported mask encoding");
      try {
        ann.mask = decode_mask_bits(m.at("data").get<std::string>(), s.height, s.width);
      } catch (const Error& e) {
        parse_error(where, e.what());
      }
      if (ann.mask.count() != ann.area)
        parse_error(where, "area " + std::to_string(ann.area) + " disagrees with mask pixel count " +
                               std::to_string(ann.mask.count()));
      if (ann.area <= 0) parse_error(where, "empty mask");
      if (!(ann.mask.tight_box() == ann.box)) parse_error(where, "bbox is not the tight bound of the mask");
      s.annotations.push_back(std::move(ann));
    } catch (const json::exception& e) {
      parse_error(where, e.what());
    }
  }
  return out;
}

AnnotationFile read_annotations(const fs::path& path) { return parse_annotations(read_text(path)); }

void write_images(const std::vector<SceneSample>& samples, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  const std::uint32_t h = samples.empty() ? 0 : std::uint32_t(samples.front().height);
  const std::uint32_t w = samples.empty() ? 0 : std::uint32_t(samples.front().width);
  out.write(kImageMagic.data(), kImageMagic.size());
  put_u32(out, kImageFormatVersion);
  put_u32(out, std::uint32_t(samples.size()));
  put_u32(out, h);
  put_u32(out, w);
  put_u32(out, 3);
  std::vector<float> hwc(std::size_t(h) * w * 3);
  for (const auto& s : samples) {
    if (std::uint32_t(s.height) != h || std::uint32_t(s.width) != w || s.image.size() != hwc.size())
      fail(ErrorKind::Data, "write_images: sample " + std::to_string(s.sample_id) + " has inconsistent size");
    for (std::uint32_t y = 0; y < h; ++y)
      for (std::uint32_t x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) hwc[(std::size_t(y) * w + x) * 3 + std::size_t(c)] = s.image.at(c, int(y), int(x));
    out.write(reinterpret_cast<const char*>(hwc.data()), std::streamsize(hwc.size() * sizeof(float)));
  }
}

std::vector<core::Tensor> read_images(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kImageMagic) fail(ErrorKind::Parse, path.string() + ": not an image container");
  const auto version = get_u32(in);
  if (version != kImageFormatVersion) fail(ErrorKind::Parse, path.string() + ": unsupported version");
  const auto count = get_u32(in), h = get_u32(in), w = get_u32(in), c = get_u32(in);
  if (!in || c != 3) fail(ErrorKind::Parse, path.string() + ": bad header");
  std::vector<core::Tensor> out;
  std::vector<float> hwc(std::size_t(h) * w * c);
  for (std::uint32_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(hwc.data()), std::streamsize(hwc.size() * sizeof(float)));
    if (!in) fail(ErrorKind::Parse, path.string() + ": truncated at image " + std::to_string(i));
    core::Tensor t({int(c), int(h), int(w)});
    for (std::uint32_t y = 0; y < h; ++y)
      for (std::uint32_t x = 0; x < w; ++x)
        for (std::uint32_t k = 0; k < c; ++k) t.at(int(k), int(y), int(x)) = hwc[(std::size_t(y) * w + x) * c + k];
    out.push_back(std::move(t));
  }
  return out;
}

void write_dataset(const fs::path& dir, const DatasetSpec& spec) {
  spec.validate();
  fs::create_directories(dir);
  const auto categories = default_categories(spec.num_classes);
  for (Split split : {Split::Train, Split::Val}) {
    const auto samples = generate_split(spec, split);
    write_annotations(samples, categories, dir / (to_string(split) + ".json"));
    write_images(samples, dir / (to_string(split) + ".images.bin"));
  }
  write_text(dir / "spec.json", spec_to_json(spec).dump(1));
}

DatasetSpec load_dataset_spec(const fs::path& dir) {
  json j;
  try {
    j = json::parse(read_text(dir / "spec.json"));
    DatasetSpec s;
    s.num_classes = j.at("num_classes");
    s.train_samples = j.at("train_samples");
    s.val_samples = j.at("val_samples");
    s.image_size = j.at("image_size");
    s.min_instances = j.at("min_instances");
    s.max_instances = j.at("max_instances");
    s.min_scale = j.at("min_scale");
    s.max_scale = j.at("max_scale");
    s.allow_occlusion = j.at("allow_occlusion");
    s.min_visible_fraction = j.at("min_visible_fraction");
    s.rare_class = j.at("rare_class");
    s.rare_weight = j.at("rare_weight");
    s.seed = j.at("seed");
    return s;
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, (dir / "spec.json").string() + ": " + e.what());
  }
}

std::vector<SceneSample> load_split(const fs::path& dir, Split split) {
  auto file = read_annotations(dir / (to_string(split) + ".json"));
  auto images = read_images(dir / (to_string(split) + ".images.bin"));
  if (images.size() != file.samples.size())
    fail(ErrorKind::Data, dir.string() + ": image count does not match annotations for " + to_string(split));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].dim(1) != file.samples[i].height || images[i].dim(2) != file.samples[i].width)
      fail(ErrorKind::Data, dir.string() + ": image " + std::to_string(i) + " size disagrees with annotations");
    file.samples[i].image = std::move(images[i]);
  }
  return std::move(file.samples);
}

std::string dataset_digest(const fs::path& dir) {
  core::Digest d;
  for (const char* name : {"spec.json", "train.json", "train.images.bin", "val.json", "val.images.bin"}) {
    d.update(name);
    d.update(core::file_digest(dir / name));
  }
  return d.hex();
}

}  // namespace maskuno::synth
