// SPDX-License-Identifier: Apache-2.0

#include "maskuno/eval/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "maskuno/core/error.hpp"

namespace maskuno::eval {

using nlohmann::json;

std::array<double, 10> iou_thresholds() {
  std::array<double, 10> t{};
  for (int i = 0; i < 10; ++i) t[std::size_t(i)] = 0.5 + 0.05 * i;
  return t;
}

AreaBuckets area_buckets(int image_width, int image_height) {
  const double s = double(image_width) * image_height / (640.0 * 640.0);
  const double small = 32.0 * 32.0 * s, large = 96.0 * 96.0 * s;
  return {{0.0, 1e10}, {0.0, small}, {small, large}, {large, 1e10}};
}

namespace {

std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double pair_iou(const Detection& d, const InstanceAnnotation& g, IouKind kind) {
  if (kind == IouKind::Box) return core::box_iou(d.box, g.box);
  const core::Box tb = d.mask.tight_box();
  if (!tb.valid() || tb.x2 <= g.box.x1 || g.box.x2 <= tb.x1 || tb.y2 <= g.box.y1 || g.box.y2 <= tb.y1) return 0.0;
  return core::mask_iou(d.mask, g.mask);
}

double det_area(const Detection& d, IouKind kind) {
  return kind == IouKind::Box ? d.box.area() : double(d.mask.count());
}

}  // namespace

MatchResult match_by_iou(const std::vector<double>& scores, const std::vector<std::vector<double>>& iou,
                         double iou_threshold, const std::vector<bool>& gt_ignored,
                         const std::vector<bool>& det_outside_range) {
  const std::size_t nd = scores.size(), ng = gt_ignored.size();
  MatchResult r{std::vector<int>(nd, -1), std::vector<bool>(nd, false), gt_ignored};
  std::vector<std::size_t> gt_order(ng);
  std::iota(gt_order.begin(), gt_order.end(), std::size_t{0});
  std::stable_sort(gt_order.begin(), gt_order.end(),
                   [&](std::size_t a, std::size_t b) { return !gt_ignored[a] && gt_ignored[b]; });
  const double thr = std::min(iou_threshold, 1.0 - 1e-10);
  std::vector<bool> taken(ng, false);
  for (std::size_t d : score_order(scores)) {
    int best = -1;
    double best_iou = thr;
    for (std::size_t g : gt_order) {
      if (taken[g]) continue;
      if (best >= 0 && !gt_ignored[std::size_t(best)] && gt_ignored[g]) break;
      const double v = iou[d][g];
      if (best < 0 ? v < thr : v <= best_iou) continue;
      best = int(g);
      best_iou = v;
    }
    if (best >= 0) {
      taken[std::size_t(best)] = true;
      r.matched_gt[d] = best;
      r.ignored[d] = gt_ignored[std::size_t(best)];
    } else {
      r.ignored[d] = det_outside_range[d];
    }
  }
  return r;
}

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<InstanceAnnotation>& gts,
                             double iou_threshold, IouKind kind, const AreaRange& range) {
  std::optional<int> cls;
  auto check = [&](int id) {
    if (cls && *cls != id) fail(ErrorKind::InvalidArgument, "match_detections: input mixes classes");
    cls = id;
  };
  for (const auto& d : dets) check(d.label.id);
  for (const auto& g : gts) check(g.label.id);
  std::vector<double> scores;
  std::vector<bool> outside;
  std::vector<std::vector<double>> iou;
  for (const auto& d : dets) {
    scores.push_back(d.score);
    outside.push_back(!range.contains(det_area(d, kind)));
    std::vector<double> row;
    for (const auto& g : gts) row.push_back(pair_iou(d, g, kind));
    iou.push_back(std::move(row));
  }
  std::vector<bool> gt_ign;
  for (const auto& g : gts) gt_ign.push_back(!range.contains(double(g.area)));
  return match_by_iou(scores, iou, iou_threshold, gt_ign, outside);
}

std::optional<double> average_precision(std::vector<ScoredLabel> labels, int num_gt) {
  if (num_gt <= 0) return std::nullopt;
  std::stable_sort(labels.begin(), labels.end(),
                   [](const ScoredLabel& a, const ScoredLabel& b) { return a.score > b.score; });
  // One operating point per distinct score: tied detections enter together.
  std::vector<double> recall, precision;
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i].true_positive ? tp : fp) += 1.0;
    if (i + 1 < labels.size() && labels[i + 1].score == labels[i].score) continue;
    recall.push_back(tp / num_gt);
    precision.push_back(tp / (tp + fp + std::numeric_limits<double>::epsilon()));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  for (int k = 0; k < kRecallPoints; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) total += precision[std::size_t(it - recall.begin())];
  }
  return total / kRecallPoints;
}

const std::array<const char*, 6>& ApBreakdown::names() {
  static const std::array<const char*, 6> n{"AP", "AP50", "AP75", "APs", "APm", "APl"};
  return n;
}

ApBreakdown evaluate(const std::vector<SceneSample>& samples, const Predictions& predictions, int class_id,
                     IouKind kind) {
  if (predictions.size() != samples.size())
    fail(ErrorKind::InvalidArgument, "evaluate: predictions do not align with samples");
  const auto thresholds = iou_thresholds();
  const int w = samples.empty() ? 128 : samples.front().width, h = samples.empty() ? 128 : samples.front().height;
  const AreaBuckets buckets = area_buckets(w, h);
  const std::array<AreaRange, 4> ranges{buckets.all, buckets.small, buckets.medium, buckets.large};

  struct ImageData {
    std::vector<double> scores, det_areas, gt_areas;
    std::vector<std::vector<double>> iou;
  };
  std::vector<ImageData> images;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<const Detection*> dets;
    for (const auto& d : predictions[i])
      if (d.label.id == class_id) dets.push_back(&d);
    std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
    if (dets.size() > std::size_t(kMaxDetections)) dets.resize(std::size_t(kMaxDetections));
    ImageData im;
    std::vector<const InstanceAnnotation*> gts;
    for (const auto& g : samples[i].annotations)
      if (g.label.id == class_id) gts.push_back(&g);
    for (const auto* g : gts) im.gt_areas.push_back(double(g->area));
    for (const auto* d : dets) {
      im.scores.push_back(d->score);
      im.det_areas.push_back(det_area(*d, kind));
      std::vector<double> row;
      for (const auto* g : gts) row.push_back(pair_iou(*d, *g, kind));
      im.iou.push_back(std::move(row));
    }
    images.push_back(std::move(im));
  }

  // ap[range][threshold]
  std::array<std::array<std::optional<double>, 10>, 4> ap{};
  for (std::size_t r = 0; r < ranges.size(); ++r) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      std::vector<ScoredLabel> pooled;
      int num_gt = 0;
      for (const auto& im : images) {
        std::vector<bool> gt_ign, outside;
        for (double a : im.gt_areas) gt_ign.push_back(!ranges[r].contains(a));
        for (double a : im.det_areas) outside.push_back(!ranges[r].contains(a));
        num_gt += int(std::count(gt_ign.begin(), gt_ign.end(), false));
        const MatchResult m = match_by_iou(im.scores, im.iou, thresholds[t], gt_ign, outside);
        for (std::size_t d = 0; d < im.scores.size(); ++d)
          if (!m.ignored[d]) pooled.push_back({im.scores[d], m.matched_gt[d] >= 0});
      }
      ap[r][t] = average_precision(std::move(pooled), num_gt);
    }
  }
  auto mean_over = [&](std::size_t r) -> std::optional<double> {
    std::vector<std::optional<double>> v(ap[r].begin(), ap[r].end());
    return mean_defined(v);
  };
  ApBreakdown b;
  b.ap = mean_over(0);
  b.ap50 = ap[0][0];
  b.ap75 = ap[0][5];
  b.aps = mean_over(1);
  b.apm = mean_over(2);
  b.apl = mean_over(3);
  return b;
}

Predictions ground_truth_predictions(const std::vector<SceneSample>& samples) {
  Predictions out;
  for (const auto& s : samples) {
    std::vector<Detection> dets;
    for (const auto& g : s.annotations) {
      Detection d;
      d.box = g.box;
      d.label = g.label;
      d.score = 1.0;
      d.mask = g.mask;
      dets.push_back(std::move(d));
    }
    out.push_back(std::move(dets));
  }
  return out;
}

std::optional<double> EvalHalf::mean_ap() const {
  std::vector<std::optional<double>> v;
  for (const auto& c : classes) v.push_back(c.breakdown.ap);
  return mean_defined(v);
}

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json breakdown_json(const ApBreakdown& b) {
  json j = json::object();
  const auto vals = b.values();
  for (std::size_t i = 0; i < vals.size(); ++i) j[ApBreakdown::names()[i]] = opt_json(vals[i]);
  return j;
}

ApBreakdown breakdown_from(const json& j) {
  ApBreakdown b;
  b.ap = opt_from(j.at("AP"));
  b.ap50 = opt_from(j.at("AP50"));
  b.ap75 = opt_from(j.at("AP75"));
  b.aps = opt_from(j.at("APs"));
  b.apm = opt_from(j.at("APm"));
  b.apl = opt_from(j.at("APl"));
  return b;
}

std::string kind_name(IouKind k) { return k == IouKind::Mask ? "mask" : "box"; }

}  // namespace

json to_json(const EvalHalf& half) {
  json classes = json::array();
  for (const auto& c : half.classes) {
    classes.push_back({{"class_id", c.class_id},
                       {"name", c.name},
                       {"images", c.images},
                       {"instances", c.instances},
                       {"subset_digest", c.subset_digest},
                       {"breakdown", breakdown_json(c.breakdown)},
                       {"warning", c.warning ? json(*c.warning) : json(nullptr)}});
  }
  return {{"format", "maskuno-eval"},
          {"version", 1},
          {"model_tag", half.model_tag},
          {"checkpoint_digest", half.checkpoint_digest},
          {"dataset_digest", half.dataset_digest},
          {"iou_kind", kind_name(half.kind)},
          {"mean_ap", opt_json(half.mean_ap())},
          {"classes", classes}};
}

EvalHalf half_from_json(const json& j) {
  try {
    EvalHalf h;
    h.model_tag = j.at("model_tag");
    h.checkpoint_digest = j.at("checkpoint_digest");
    h.dataset_digest = j.at("dataset_digest");
    h.kind = j.at("iou_kind") == "box" ? IouKind::Box : IouKind::Mask;
    for (const auto& c : j.at("classes")) {
      ClassResult r;
      r.class_id = c.at("class_id");
      r.name = c.at("name");
      r.images = c.at("images");
      r.instances = c.at("instances");
      r.subset_digest = c.at("subset_digest");
      r.breakdown = breakdown_from(c.at("breakdown"));
      if (!c.at("warning").is_null()) r.warning = c.at("warning").get<std::string>();
      h.classes.push_back(std::move(r));
    }
    return h;
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string("evaluation report: ") + e.what());
  }
}

void write_half(const EvalHalf& half, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write report " + path.string());
  out << to_json(half).dump(2) << "\n";
}

EvalHalf read_half(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open report " + path.string());
  try {
    return half_from_json(json::parse(in));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

EvalHalf evaluate_per_class(const std::vector<SceneSample>& val, int num_classes, const Predictions& predictions,
                            const std::string& model_tag, const std::string& checkpoint_digest,
                            const std::string& dataset_digest, IouKind kind) {
  if (predictions.size() != val.size())
    fail(ErrorKind::InvalidArgument, "evaluate_per_class: predictions do not align with samples");
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < val.size(); ++i) index[val[i].sample_id] = i;
  EvalHalf half{model_tag, checkpoint_digest, dataset_digest, kind, {}};
  for (int c = 1; c <= num_classes; ++c) {
    auto sub = synth::split_validation_per_class(val, core::ClassLabel{c}, num_classes);
    ClassResult r;
    r.class_id = c;
    r.name = synth::class_name(c);
    r.images = int(sub.samples.size());
    for (const auto& s : sub.samples) r.instances += int(s.annotations.size());
    r.subset_digest = synth::annotations_digest(sub.samples);
    r.warning = sub.warning;
    if (!sub.samples.empty()) {
      Predictions preds;
      for (const auto& s : sub.samples) preds.push_back(predictions[index.at(s.sample_id)]);
      r.breakdown = evaluate(sub.samples, preds, c, kind);
    }
    half.classes.push_back(std::move(r));
  }
  return half;
}

EvalHalf evaluate_per_class(const std::vector<SceneSample>& val, int num_classes, const Predictor& predict,
                            const std::string& model_tag, const std::string& checkpoint_digest,
                            const std::string& dataset_digest, IouKind kind) {
  Predictions preds;
  preds.reserve(val.size());
  for (const auto& s : val) preds.push_back(predict(s));
  return evaluate_per_class(val, num_classes, preds, model_tag, checkpoint_digest, dataset_digest, kind);
}

std::optional<double> difference(const std::optional<double>& after, const std::optional<double>& before) {
  if (!after || !before) return std::nullopt;
  return *after - *before;
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& values) {
  double total = 0.0;
  int n = 0;
  for (const auto& v : values)
    if (v) {
      total += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return total / n;
}

EvalReport compare_reports(const EvalHalf& before, const EvalHalf& after) {
  if (before.dataset_digest != after.dataset_digest)
    fail(ErrorKind::Incomparable, "reports were computed on different datasets (" + before.dataset_digest + " vs " +
                                      after.dataset_digest + ")");
  if (before.kind != after.kind) fail(ErrorKind::Incomparable, "reports use different IoU kinds");
  if (before.classes.size() != after.classes.size())
    fail(ErrorKind::Incomparable, "reports cover different class lists");
  EvalReport r{before, after, {}, before.mean_ap(), after.mean_ap(), {}};
  for (std::size_t i = 0; i < before.classes.size(); ++i) {
    const auto& b = before.classes[i];
    const auto& a = after.classes[i];
    if (b.class_id != a.class_id) fail(ErrorKind::Incomparable, "reports cover different class lists");
    if (b.subset_digest != a.subset_digest)
      fail(ErrorKind::Incomparable, "class " + b.name + " was evaluated on different sub-datasets");
    ClassDelta row{b.class_id, b.name, b.breakdown, a.breakdown, {}};
    const auto bv = b.breakdown.values(), av = a.breakdown.values();
    for (std::size_t k = 0; k < 6; ++k) row.delta[k] = difference(av[k], bv[k]);
    r.rows.push_back(std::move(row));
  }
  r.mean_delta = difference(r.mean_after, r.mean_before);
  return r;
}

json to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& row : report.rows) {
    json delta = json::object();
    for (std::size_t k = 0; k < 6; ++k) delta[ApBreakdown::names()[k]] = opt_json(row.delta[k]);
    rows.push_back({{"class_id", row.class_id},
                    {"name", row.name},
                    {"before", breakdown_json(row.before)},
                    {"after", breakdown_json(row.after)},
                    {"delta", delta}});
  }
  return {{"format", "maskuno-comparison"},
          {"version", 1},
          {"before", to_json(report.before)},
          {"after", to_json(report.after)},
          {"rows", rows},
          {"mean_before", opt_json(report.mean_before)},
          {"mean_after", opt_json(report.mean_after)},
          {"mean_delta", opt_json(report.mean_delta)}};
}

namespace {

std::string fmt(const std::optional<double>& v, bool sign = false) {
  if (!v) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(3);
  if (sign && *v >= 0) s << '+';
  s << *v;
  return s.str();
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string render_table(const EvalReport& report) {
  std::ostringstream out;
  out << "before: " << report.before.model_tag << "   after: " << report.after.model_tag << "   ("
      << (report.before.kind == IouKind::Mask ? "mask" : "box") << " AP)\n";
  out << pad("class", 12);
  for (const char* n : ApBreakdown::names()) out << "| " << pad(n, 21);
  out << "\n" << pad("", 12);
  for (std::size_t k = 0; k < 6; ++k) out << "| " << pad("before", 7) << pad("after", 7) << pad("delta", 7);
  out << "\n" << std::string(12 + 6 * 23, '-') << "\n";
  for (const auto& row : report.rows) {
    out << pad(row.name, 12);
    const auto b = row.before.values(), a = row.after.values();
    for (std::size_t k = 0; k < 6; ++k)
      out << "| " << pad(fmt(b[k]), 7) << pad(fmt(a[k]), 7) << pad(fmt(row.delta[k], true), 7);
    out << "\n";
  }
  out << std::string(12 + 6 * 23, '-') << "\n";
  out << pad("mean AP", 12) << "| " << pad(fmt(report.mean_before), 7) << pad(fmt(report.mean_after), 7)
      << pad(fmt(report.mean_delta, true), 7) << "\n";
  return out.str();
}

std::string render_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "class_id,class,metric,before,after,delta\n";
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream s;
    s << std::setprecision(6) << *v;
    return s.str();
  };
  for (const auto& row : report.rows) {
    const auto b = row.before.values(), a = row.after.values();
    for (std::size_t k = 0; k < 6; ++k)
      out << row.class_id << ',' << row.name << ',' << ApBreakdown::names()[k] << ',' << cell(b[k]) << ','
          << cell(a[k]) << ',' << cell(row.delta[k]) << "\n";
  }
  out << "0,mean,AP," << cell(report.mean_before) << ',' << cell(report.mean_after) << ','
      << cell(report.mean_delta) << "\n";
  return out.str();
}

std::string render_bar_chart(const std::vector<EvalReport>& reports) {
  struct Pair {
    std::string label;
    double before, after;
  };
  std::vector<Pair> pairs;
  for (const auto& r : reports) {
    pairs.push_back({r.after.model_tag + " (mean)", r.mean_before.value_or(0.0), r.mean_after.value_or(0.0)});
    for (const auto& row : r.rows) pairs.push_back({row.name, row.before.ap.value_or(0.0), row.after.ap.value_or(0.0)});
  }
  const int bar = 18, gap = 4, group = 2 * bar + 3 * gap, left = 50, top = 30, plot_h = 240;
  const int width = left + int(pairs.size()) * group + 20, height = top + plot_h + 70;
  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">mask mAP before and after head split</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t * 0.25, y = top + plot_h - v * plot_h;
    svg << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double x = left + double(i) * group + gap;
    const auto& p = pairs[i];
    const double hb = std::clamp(p.before, 0.0, 1.0) * plot_h, ha = std::clamp(p.after, 0.0, 1.0) * plot_h;
    svg << "<rect x=\"" << x << "\" y=\"" << top + plot_h - hb << "\" width=\"" << bar << "\" height=\"" << hb
        << "\" fill=\"#9aa5b1\"/>\n";
    svg << "<rect x=\"" << x + bar + gap << "\" y=\"" << top + plot_h - ha << "\" width=\"" << bar << "\" height=\""
        << ha << "\" fill=\"#2f6fb0\"/>\n";
    svg << "<text x=\"" << x + bar + gap / 2.0 << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">"
        << p.label << "</text>\n";
    svg << "<text x=\"" << x + bar + gap / 2.0 << "\" y=\"" << top + plot_h + 30
        << "\" text-anchor=\"middle\" fill=\"#555\">" << std::showpos << (p.after - p.before) << std::noshowpos
        << "</text>\n";
  }
  svg << "<rect x=\"" << left << "\" y=\"" << height - 22 << "\" width=\"10\" height=\"10\" fill=\"#9aa5b1\"/>"
      << "<text x=\"" << left + 14 << "\" y=\"" << height - 13 << "\">before</text>\n";
  svg << "<rect x=\"" << left + 70 << "\" y=\"" << height - 22 << "\" width=\"10\" height=\"10\" fill=\"#2f6fb0\"/>"
      << "<text x=\"" << left + 84 << "\" y=\"" << height - 13 << "\">after</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::optional<double> MisroutingStats::rate() const {
  if (matched == 0) return std::nullopt;
  return double(misrouted) / matched;
}

void accumulate_misrouting(const std::vector<RoutedRoi>& rois, const std::vector<InstanceAnnotation>& gts,
                           MisroutingStats& stats) {
  for (const auto& roi : rois) {
    ++stats.dispatched;
    int best = -1;
    double best_iou = 0.5;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = core::box_iou(roi.box, gts[g].box);
      if (best < 0 ? v >= best_iou : v > best_iou) {
        best = int(g);
        best_iou = v;
      }
    }
    if (best < 0) {
      ++stats.background;
      continue;
    }
    ++stats.matched;
    if (gts[std::size_t(best)].label.id != roi.routed_class) ++stats.misrouted;
  }
}

}  // namespace maskuno::eval
