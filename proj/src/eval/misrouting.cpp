// SPDX-License-Identifier: Apache-2.0

#include "maskuno/eval/misrouting.hpp"

namespace maskuno::eval {

MisroutingStats misrouting_rate(const split::MaskUnoModel& model, const std::vector<SceneSample>& samples,
                                const pipeline::InferenceOptions& options) {
  MisroutingStats stats;
  for (const auto& s : samples) {
    split::DispatchLog log;
    split::maskuno_inference(model, s.image, options, &log);
    std::vector<RoutedRoi> rois;
    for (const auto& r : log.records) rois.push_back({r.refined, r.routed_class});
    accumulate_misrouting(rois, s.annotations, stats);
  }
  return stats;
}

}  // namespace maskuno::eval
