// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskuno/core/tensor.hpp"
#include "maskuno/pipeline/model.hpp"

namespace maskuno::pipeline {

inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  core::Tensor value;

  bool operator==(const NamedTensor&) const = default;
};

/// On-disk layout: magic "MUCKPT\0\1", u32 version, u64 header length, JSON header,
/// then each tensor's float32 payload in header order. The header lists
/// name, shape and float offset of every tensor.
struct CheckpointRecord {
  std::string kind = "baseline";  // baseline | maskuno
  nlohmann::json config;
  nlohmann::json classes = nlohmann::json::array();  // [{id, name}]
  std::vector<NamedTensor> tensors;
  nlohmann::json registry = nlohmann::json::object();    // class id -> parameter prefix
  nlohmann::json provenance = nlohmann::json::object();
  int epoch = 0;
  nlohmann::json metric_history = nlohmann::json::array();
  std::string digest;  // SHA-256 over tensor names, shapes and payload bytes

  const NamedTensor* find(const std::string& name) const;
};

std::string payload_digest(const std::vector<NamedTensor>& tensors);
/// Digest over the tensors whose names start with prefix.
std::string payload_digest(const std::vector<NamedTensor>& tensors, const std::string& prefix);

void save_checkpoint(CheckpointRecord& record, const std::filesystem::path& path);
CheckpointRecord load_checkpoint(const std::filesystem::path& path);

std::vector<NamedTensor> snapshot(const std::vector<ConstParamSlot>& params);
void restore(const std::vector<NamedTensor>& tensors, const std::vector<ParamSlot>& params);

CheckpointRecord to_record(const PipelineModel& model, const nlohmann::json& classes);
PipelineModel baseline_from_record(const CheckpointRecord& record);

}  // namespace maskuno::pipeline
