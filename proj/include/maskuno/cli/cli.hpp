// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskuno/core/error.hpp"
#include "maskuno/eval/evalkit.hpp"

namespace maskuno::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;
inline constexpr int kExitIncomparable = 5;

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "MASKUNO_OUTPUT_ROOT";

int exit_code_for(ErrorKind kind);

/// Record written next to every command's primary output.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;  // re-runnable argument list without --out-root
  nlohmann::json resolved = nlohmann::json::object();
  std::map<std::string, std::string> inputs;   // absolute path -> digest
  std::map<std::string, std::string> outputs;  // path relative to the output root -> digest
  std::string out_root;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest read_manifest(const std::filesystem::path& path);

/// Entry point; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Predictions file: {"format": "maskuno-predictions", "predictions": [{image_id, class_id, score, bbox, mask}]}.
void write_predictions(const std::filesystem::path& path, const std::vector<synth::SceneSample>& samples,
                       const eval::Predictions& predictions);
eval::Predictions read_predictions(const std::filesystem::path& path, const std::vector<synth::SceneSample>& samples);

}  // namespace maskuno::cli
