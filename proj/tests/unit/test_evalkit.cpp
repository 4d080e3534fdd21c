// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "maskuno/core/error.hpp"
#include "maskuno/eval/evalkit.hpp"
#include "support.hpp"

using namespace maskuno;
using core::Detection;
using eval::ScoredLabel;
using synth::InstanceAnnotation;
using synth::SceneSample;

namespace {

Detection det(int class_id, double score, core::BinaryMask mask) {
  Detection d;
  d.label = core::ClassLabel{class_id};
  d.score = score;
  d.box = mask.tight_box();
  d.mask = std::move(mask);
  return d;
}

// Greedy rule spelled out directly: walk detections by descending score (ties by index) and give
// each the still-free ground truth of largest IoU at or above the threshold, lowest index on ties.
std::vector<int> greedy_oracle(const std::vector<double>& scores, const std::vector<std::vector<double>>& iou,
                               double thr) {
  const std::size_t nd = scores.size(), ng = nd == 0 ? 0 : iou[0].size();
  std::vector<std::size_t> order(nd);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < nd; ++i)
    for (std::size_t j = i + 1; j < nd; ++j)
      if (scores[order[j]] > scores[order[i]] || (scores[order[j]] == scores[order[i]] && order[j] < order[i]))
        std::swap(order[i], order[j]);
  std::vector<int> out(nd, -1);
  std::vector<bool> used(ng, false);
  for (std::size_t d : order) {
    std::vector<std::size_t> candidates;
    for (std::size_t g = 0; g < ng; ++g)
      if (!used[g] && iou[d][g] >= thr) candidates.push_back(g);
    if (candidates.empty()) continue;
    std::size_t pick = candidates.front();
    for (std::size_t g : candidates)
      if (iou[d][g] > iou[d][pick]) pick = g;
    used[pick] = true;
    out[d] = int(pick);
  }
  return out;
}

// Exact area under the interpolated precision envelope, with equal scores entering together.
double envelope_integral(std::vector<ScoredLabel> labels, int num_gt) {
  std::stable_sort(labels.begin(), labels.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i].true_positive ? tp : fp) += 1;
    if (i + 1 < labels.size() && labels[i + 1].score == labels[i].score) continue;
    points.emplace_back(tp / num_gt, tp / (tp + fp));
  }
  double area = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double best = 0.0;
    for (std::size_t j = i; j < points.size(); ++j) best = std::max(best, points[j].second);
    area += (points[i].first - prev_recall) * best;
    prev_recall = points[i].first;
  }
  return area;
}

eval::EvalHalf half(const std::string& tag, std::vector<std::pair<int, double>> aps, const std::string& data = "d0") {
  eval::EvalHalf h;
  h.model_tag = tag;
  h.dataset_digest = data;
  for (auto [c, ap] : aps) {
    eval::ClassResult r;
    r.class_id = c;
    r.name = "class" + std::to_string(c);
    r.subset_digest = "s" + std::to_string(c);
    r.breakdown.ap = ap;
    r.breakdown.ap50 = std::min(1.0, ap + 0.1);
    h.classes.push_back(r);
  }
  return h;
}

std::vector<SceneSample> scenes(int n, std::uint64_t seed) {
  auto spec = testsupport::tiny_spec(3, n, 0);
  spec.seed = seed;
  return synth::generate_split(spec, synth::Split::Train);
}

}  // namespace

TEST_SUITE("evalkit") {
  TEST_CASE("matching examples") {
    const InstanceAnnotation g = testsupport::rect_instance(32, 32, 1, 0, 0, 10, 10);
    const auto m = eval::match_detections({det(1, 0.8, testsupport::rect_mask(32, 32, 0, 0, 10, 9))}, {g}, 0.5,
                                          eval::IouKind::Mask);
    CHECK(m.matched_gt[0] == 0);
    const auto two = eval::match_detections({det(1, 0.6, testsupport::rect_mask(32, 32, 0, 0, 10, 9)),
                                             det(1, 0.9, testsupport::rect_mask(32, 32, 0, 0, 10, 8))},
                                            {g}, 0.5, eval::IouKind::Mask);
    CHECK(two.matched_gt[1] == 0);
    CHECK(two.matched_gt[0] == -1);
    CHECK_THROWS_AS(eval::match_detections({det(1, 0.5, g.mask), det(2, 0.4, g.mask)}, {g}, 0.5, eval::IouKind::Mask),
                    Error);
  }

  TEST_CASE("matching equals the greedy oracle on randomized fixtures") {
    auto rng = core::make_rng(31);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> scores(6);
      for (auto& s : scores) s = std::round(core::uniform01(rng) * 5) / 5;
      std::vector<std::vector<double>> iou(6, std::vector<double>(4));
      for (auto& row : iou)
        for (auto& v : row) v = std::round(core::uniform01(rng) * 10) / 10;
      for (double thr : {0.5, 0.75}) {
        const auto r = eval::match_by_iou(scores, iou, thr, std::vector<bool>(4, false), std::vector<bool>(6, false));
        REQUIRE(r.matched_gt == greedy_oracle(scores, iou, thr));
      }
    }
    // The same with real masks through match_detections.
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<InstanceAnnotation> gts;
      std::vector<Detection> dets;
      for (int g = 0; g < 4; ++g)
        gts.push_back(testsupport::rect_instance(24, 24, 1, int(core::uniform(rng, 0, 14)), int(core::uniform(rng, 0, 14)),
                                                 int(core::uniform(rng, 3, 10)), int(core::uniform(rng, 3, 10))));
      for (int d = 0; d < 6; ++d) {
        const auto& base = gts[std::size_t(d % 4)].box;
        const int x = std::clamp(int(base.x1 + core::uniform(rng, -2, 2)), 0, 20);
        const int y = std::clamp(int(base.y1 + core::uniform(rng, -2, 2)), 0, 20);
        dets.push_back(det(1, core::uniform01(rng), testsupport::rect_mask(24, 24, x, y, std::min(int(base.width()), 24 - x),
                                                                           std::min(int(base.height()), 24 - y))));
      }
      std::vector<double> scores;
      std::vector<std::vector<double>> iou;
      for (const auto& d : dets) {
        scores.push_back(d.score);
        std::vector<double> row;
        for (const auto& g : gts) row.push_back(core::mask_iou(d.mask, g.mask));
        iou.push_back(row);
      }
      const auto r = eval::match_detections(dets, gts, 0.5, eval::IouKind::Mask);
      CHECK(r.matched_gt == greedy_oracle(scores, iou, 0.5));
    }
  }

  TEST_CASE("average precision examples") {
    CHECK(eval::average_precision({{0.9, true}, {0.8, true}}, 2) == doctest::Approx(1.0));
    CHECK(*eval::average_precision({{0.9, false}, {0.8, true}}, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_FALSE(eval::average_precision({{0.9, false}}, 0).has_value());
    CHECK(*eval::average_precision({}, 3) == 0.0);
  }

  TEST_CASE("101-point AP is within 0.01 of the exact envelope integral") {
    auto rng = core::make_rng(41);
    for (int trial = 0; trial < 200; ++trial) {
      const int num_gt = 1 + int(core::uniform01(rng) * 8);
      std::vector<ScoredLabel> labels;
      int tps = 0;
      const int n = int(core::uniform01(rng) * 15);
      for (int i = 0; i < n; ++i) {
        const bool tp = tps < num_gt && core::uniform01(rng) < 0.5;
        tps += tp;
        labels.push_back({std::round(core::uniform01(rng) * 20) / 20, tp});
      }
      CHECK(std::abs(*eval::average_precision(labels, num_gt) - envelope_integral(labels, num_gt)) <= 0.01);
    }
  }

  TEST_CASE("average precision is monotone") {
    auto rng = core::make_rng(43);
    for (int trial = 0; trial < 300; ++trial) {
      const int num_gt = 2 + int(core::uniform01(rng) * 6);
      std::vector<ScoredLabel> labels;
      int tps = 0;
      for (int i = 0; i < 10; ++i) {
        const bool tp = tps < num_gt - 1 && core::uniform01(rng) < 0.5;
        tps += tp;
        labels.push_back({core::uniform(rng, 0.1, 0.9), tp});
      }
      const double base = *eval::average_precision(labels, num_gt);
      double top_fp = 0.0, low_tp = 1.0;
      for (const auto& l : labels) (l.true_positive ? low_tp : top_fp) = l.true_positive ? std::min(low_tp, l.score) : std::max(top_fp, l.score);
      auto with_tp = labels;
      with_tp.push_back({top_fp + 0.05, true});
      CHECK(*eval::average_precision(with_tp, num_gt) >= base - 1e-12);
      auto with_fp = labels;
      with_fp.push_back({low_tp - 0.05, false});
      CHECK(*eval::average_precision(with_fp, num_gt) <= base + 1e-12);
    }
  }

  TEST_CASE("ground truth as predictions and no predictions") {
    const auto samples = scenes(20, 3);
    const auto gt_preds = eval::ground_truth_predictions(samples);
    const eval::Predictions none(samples.size());
    for (int c = 1; c <= 3; ++c) {
      for (const auto& v : eval::evaluate(samples, gt_preds, c).values())
        if (v) CHECK(*v == doctest::Approx(1.0));
      for (const auto& v : eval::evaluate(samples, none, c).values())
        if (v) CHECK(*v == 0.0);
      CHECK(eval::evaluate(samples, gt_preds, c).ap.has_value());
    }
  }

  TEST_CASE("evaluate is invariant to image order and detection order") {
    const auto samples = scenes(12, 5);
    auto preds = eval::ground_truth_predictions(samples);
    auto rng = core::make_rng(47);
    for (auto& dets : preds) {
      for (auto& d : dets) {
        d.score = std::round(core::uniform01(rng) * 4) / 4 + 0.001 * (&d - dets.data());
        for (int k = 0; k < 3; ++k) d.mask.set(int(core::uniform01(rng) * 128), int(core::uniform01(rng) * 128), true);
      }
      Detection junk = dets.empty() ? Detection{} : dets.front();
      if (!dets.empty()) {
        junk.score = std::round(core::uniform01(rng) * 4) / 4 + 0.0005;
        junk.mask = testsupport::rect_mask(128, 128, 0, 0, 3, 3);
        dets.push_back(junk);
      }
    }
    std::vector<std::size_t> perm(samples.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<SceneSample> s2;
    eval::Predictions p2;
    for (std::size_t i : perm) {
      s2.push_back(samples[i]);
      auto dets = preds[i];
      std::reverse(dets.begin(), dets.end());
      p2.push_back(dets);
    }
    for (int c = 1; c <= 3; ++c) {
      const auto a = eval::evaluate(samples, preds, c).values();
      const auto b = eval::evaluate(s2, p2, c).values();
      for (std::size_t k = 0; k < a.size(); ++k) {
        REQUIRE(a[k].has_value() == b[k].has_value());
        if (a[k]) CHECK(*a[k] == doctest::Approx(*b[k]).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("hand fixture matches the pycocotools reference") {
    std::ifstream fin(std::string(MASKUNO_FIXTURE_DIR) + "/hand_fixture.json");
    std::ifstream ein(std::string(MASKUNO_FIXTURE_DIR) + "/hand_fixture_expected.json");
    REQUIRE(fin);
    REQUIRE(ein);
    const auto fixture = nlohmann::json::parse(fin);
    const auto expected = nlohmann::json::parse(ein);
    const int size = fixture.at("image_size");
    const int cls = fixture.at("class_id");
    auto bitmap = [&](const nlohmann::json& rects) {
      core::BinaryMask m(size, size);
      for (const auto& r : rects)
        for (int y = r[1].get<int>(); y < r[1].get<int>() + r[3].get<int>(); ++y)
          for (int x = r[0].get<int>(); x < r[0].get<int>() + r[2].get<int>(); ++x) m.set(y, x, true);
      return m;
    };
    std::vector<SceneSample> samples;
    eval::Predictions preds;
    int gts = 0, dets = 0;
    for (const auto& im : fixture.at("images")) {
      SceneSample s;
      s.sample_id = im.at("id");
      s.height = s.width = size;
      for (const auto& g : im.at("gts")) {
        InstanceAnnotation a;
        a.label = core::ClassLabel{cls};
        a.mask = bitmap(g.at("rects"));
        a.box = a.mask.tight_box();
        a.area = a.mask.count();
        s.annotations.push_back(a);
        ++gts;
      }
      std::vector<Detection> d;
      for (const auto& x : im.at("dets")) {
        d.push_back(det(cls, x.at("score"), bitmap(x.at("rects"))));
        ++dets;
      }
      samples.push_back(s);
      preds.push_back(d);
    }
    CHECK(samples.size() == 3u);
    CHECK(gts == 5);
    CHECK(dets == 7);
    const auto got = eval::evaluate(samples, preds, cls);
    const auto values = got.values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const std::string key = k == 0 ? "ap" : k == 1 ? "ap50" : k == 2 ? "ap75" : k == 3 ? "aps" : k == 4 ? "apm" : "apl";
      INFO(key);
      REQUIRE(values[k].has_value());
      CHECK(std::abs(*values[k] - expected.at(key).get<double>()) < 1e-12);
    }
  }

  TEST_CASE("area buckets scale with the canvas") {
    const auto b = eval::area_buckets(128, 128);
    CHECK(b.small.hi == doctest::Approx(40.96));
    CHECK(b.medium.lo == doctest::Approx(40.96));
    CHECK(b.medium.hi == doctest::Approx(368.64));
    CHECK(b.large.lo == doctest::Approx(368.64));
    const auto t = eval::iou_thresholds();
    CHECK(t.front() == doctest::Approx(0.5));
    CHECK(t.back() == doctest::Approx(0.95));
  }

  TEST_CASE("compare reports") {
    const auto one_class = eval::compare_reports(half("b", {{1, 0.580}}), half("a", {{1, 0.622}}));
    REQUIRE(one_class.rows.size() == 1u);
    CHECK(*one_class.rows[0].delta[0] == doctest::Approx(0.042).epsilon(1e-12));
    CHECK(*one_class.mean_delta == doctest::Approx(0.042).epsilon(1e-12));

    std::vector<std::optional<double>> table_deltas;
    for (auto [b, a] : std::vector<std::pair<double, double>>{{0.580, 0.622}, {0.5, 0.549}, {0.6, 0.619}, {0.7, 0.718}})
      table_deltas.push_back(eval::difference(a, b));
    CHECK(*eval::mean_defined(table_deltas) == doctest::Approx(0.032).epsilon(1e-12));

    const auto b = half("b", {{1, 0.3}, {2, 0.5}, {3, 0.7}});
    const auto a = half("a", {{1, 0.35}, {2, 0.45}, {3, 0.71}});
    const auto same = eval::compare_reports(b, b);
    for (const auto& row : same.rows)
      for (const auto& d : row.delta)
        if (d) CHECK(*d == 0.0);
    const auto fwd = eval::compare_reports(b, a), rev = eval::compare_reports(a, b);
    for (std::size_t i = 0; i < fwd.rows.size(); ++i)
      for (std::size_t k = 0; k < 6; ++k) {
        REQUIRE(fwd.rows[i].delta[k].has_value() == rev.rows[i].delta[k].has_value());
        if (fwd.rows[i].delta[k]) CHECK(*fwd.rows[i].delta[k] == -*rev.rows[i].delta[k]);
      }
    CHECK(*fwd.mean_delta == doctest::Approx(-*rev.mean_delta));

    try {
      eval::compare_reports(b, half("a", {{1, 0.35}, {2, 0.45}, {3, 0.71}}, "other"));
      FAIL("expected incomparable");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Incomparable);
    }
    CHECK_THROWS_AS(eval::compare_reports(b, half("a", {{1, 0.35}, {2, 0.45}})), Error);

    CHECK(eval::render_table(fwd).find("class1") != std::string::npos);
    CHECK(eval::render_csv(fwd).find("class3") != std::string::npos);
    CHECK(eval::render_bar_chart({fwd}).rfind("<svg", 0) == 0);
    const auto j = eval::to_json(fwd);
    CHECK(j.contains("rows"));
  }

  TEST_CASE("report halves round trip") {
    auto h = half("m", {{1, 0.25}, {2, 0.5}});
    h.classes[1].breakdown.aps.reset();
    const auto back = eval::half_from_json(eval::to_json(h));
    CHECK(back.model_tag == "m");
    CHECK(back.classes.size() == 2u);
    CHECK_FALSE(back.classes[1].breakdown.aps.has_value());
    CHECK(*back.classes[0].breakdown.ap == 0.25);
  }

  TEST_CASE("misrouting diagnostic") {
    std::vector<InstanceAnnotation> gts{testsupport::rect_instance(64, 64, 1, 0, 0, 10, 10),
                                        testsupport::rect_instance(64, 64, 2, 20, 20, 10, 10),
                                        testsupport::rect_instance(64, 64, 3, 40, 5, 12, 12)};
    eval::MisroutingStats oracle;
    std::vector<eval::RoutedRoi> rois;
    for (const auto& g : gts) rois.push_back({g.box, g.label.id});
    rois.push_back({{50, 50, 60, 60}, 2});
    eval::accumulate_misrouting(rois, gts, oracle);
    CHECK(*oracle.rate() == 0.0);
    CHECK(oracle.background == 1);
    CHECK(oracle.dispatched == 4);
    CHECK_FALSE(eval::MisroutingStats{}.rate().has_value());

    auto rng = core::make_rng(53);
    eval::MisroutingStats uniform;
    std::vector<InstanceAnnotation> five;
    for (int c = 1; c <= 5; ++c) five.push_back(testsupport::rect_instance(128, 128, c, 22 * (c - 1), 10, 18, 18));
    for (int trial = 0; trial < 4000; ++trial) {
      std::vector<eval::RoutedRoi> r;
      for (const auto& g : five) r.push_back({g.box, 1 + int(core::uniform01(rng) * 5)});
      eval::accumulate_misrouting(r, five, uniform);
    }
    CHECK(std::abs(*uniform.rate() - 0.8) < 0.01);
  }
}
