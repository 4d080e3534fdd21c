// SPDX-License-Identifier: Apache-2.0

#include "maskuno/pipeline/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <map>

#include "maskuno/core/digest.hpp"
#include "maskuno/core/error.hpp"

namespace maskuno::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic{'M', 'U', 'C', 'K', 'P', 'T', '\0', '\1'};

void digest_tensor(core::Digest& d, const NamedTensor& t) {
  d.update(t.name);
  d.update("|" + t.value.shape_string() + "|");
  d.update_values(t.value.values());
}

}  // namespace

const NamedTensor* CheckpointRecord::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string payload_digest(const std::vector<NamedTensor>& tensors) {
  core::Digest d;
  for (const auto& t : tensors) digest_tensor(d, t);
  return d.hex();
}

std::string payload_digest(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  core::Digest d;
  for (const auto& t : tensors)
    if (t.name.rfind(prefix, 0) == 0) digest_tensor(d, t);
  return d.hex();
}

void save_checkpoint(CheckpointRecord& record, const fs::path& path) {
  static_assert(std::endian::native == std::endian::little);
  record.digest = payload_digest(record.tensors);
  json header;
  header["format"] = "maskuno-checkpoint";
  header["version"] = kCheckpointVersion;
  header["kind"] = record.kind;
  header["config"] = record.config;
  header["classes"] = record.classes;
  header["registry"] = record.registry;
  header["provenance"] = record.provenance;
  header["epoch"] = record.epoch;
  header["metric_history"] = record.metric_history;
  header["digest"] = record.digest;
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : record.tensors) {
    index.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
    offset += t.value.size();
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Data, "cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(kMagic.data(), kMagic.size());
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& t : record.tensors)
    out.write(reinterpret_cast<const char*>(t.value.data()), std::streamsize(t.value.size() * sizeof(float)));
  if (!out) fail(ErrorKind::Data, "failed writing checkpoint " + path.string());
}

CheckpointRecord load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) fail(ErrorKind::Parse, path.string() + ": not a checkpoint file");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || version != kCheckpointVersion) fail(ErrorKind::Parse, path.string() + ": unsupported checkpoint version");
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  CheckpointRecord r;
  try {
    const json header = json::parse(text);
    r.kind = header.at("kind");
    r.config = header.at("config");
    r.classes = header.at("classes");
    r.registry = header.at("registry");
    r.provenance = header.at("provenance");
    r.epoch = header.at("epoch");
    r.metric_history = header.at("metric_history");
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t{entry.at("name"), core::Tensor(entry.at("shape").get<std::vector<int>>())};
      in.read(reinterpret_cast<char*>(t.value.data()), std::streamsize(t.value.size() * sizeof(float)));
      if (!in) fail(ErrorKind::Parse, path.string() + ": truncated payload at " + t.name);
      r.tensors.push_back(std::move(t));
    }
    r.digest = payload_digest(r.tensors);
    if (r.digest != header.at("digest").get<std::string>())
      fail(ErrorKind::Data, path.string() + ": payload digest mismatch");
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
  return r;
}

std::vector<NamedTensor> snapshot(const std::vector<ConstParamSlot>& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, *p.value});
  return out;
}

void restore(const std::vector<NamedTensor>& tensors, const std::vector<ParamSlot>& params) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (const auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) fail(ErrorKind::Model, "checkpoint lacks parameter " + p.name);
    if (it->second->value.shape() != p.value->shape())
      fail(ErrorKind::Model, "checkpoint parameter " + p.name + " has shape " + it->second->value.shape_string() +
                                 ", model expects " + p.value->shape_string());
    *p.value = it->second->value;
  }
}

CheckpointRecord to_record(const PipelineModel& model, const json& classes) {
  CheckpointRecord r;
  r.kind = "baseline";
  r.config = to_json(model.config);
  r.classes = classes;
  r.tensors = snapshot(model.parameters());
  r.digest = payload_digest(r.tensors);
  return r;
}

PipelineModel baseline_from_record(const CheckpointRecord& record) {
  const PipelineConfig config = config_from_json(record.config);
  const bool has_mask = record.find("mask/predictor/weight") != nullptr;
  PipelineModel model(config, has_mask);
  restore(record.tensors, model.parameters());
  return model;
}

}  // namespace maskuno::pipeline
