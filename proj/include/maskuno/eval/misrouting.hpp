// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "maskuno/eval/evalkit.hpp"
#include "maskuno/split/switch_split.hpp"

namespace maskuno::eval {

/// Runs the model on every sample and checks each dispatched ROI against the ground truth.
MisroutingStats misrouting_rate(const split::MaskUnoModel& model, const std::vector<SceneSample>& samples,
                                const pipeline::InferenceOptions& options = {});

}  // namespace maskuno::eval
