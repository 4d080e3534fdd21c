// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "maskuno/core/error.hpp"
#include "maskuno/pipeline/checkpoint.hpp"
#include "maskuno/pipeline/roi_align.hpp"
#include "maskuno/split/switch_split.hpp"
#include "support.hpp"

using namespace maskuno;
using core::ClassDistribution;
using pipeline::PipelineConfig;
using pipeline::PipelineModel;
using split::InitMode;

namespace {

PipelineModel make_baseline(int classes, std::uint64_t seed) {
  PipelineConfig config;
  config.num_classes = classes;
  PipelineModel model(config);
  model.init(seed);
  return model;
}

pipeline::RoiFeature random_roi(core::Rng& rng, int channels, int res) {
  pipeline::RoiFeature roi;
  roi.data = core::Tensor({channels, res, res});
  for (auto& v : roi.data.values()) v = float(core::uniform(rng, -2, 2));
  return roi;
}

bool near(const core::Box& a, const core::Box& b, double tol) {
  return std::abs(a.x1 - b.x1) <= tol && std::abs(a.y1 - b.y1) <= tol && std::abs(a.x2 - b.x2) <= tol &&
         std::abs(a.y2 - b.y2) <= tol;
}

std::vector<synth::SceneSample> images(int n, int classes) {
  return synth::generate_split(testsupport::tiny_spec(classes, n, 0), synth::Split::Train);
}

pipeline::InferenceOptions permissive() {
  pipeline::InferenceOptions o;
  o.score_threshold = 0.0;
  return o;
}

}  // namespace

TEST_SUITE("switch_split") {
  TEST_CASE("route examples") {
    CHECK(split::route(ClassDistribution({0.1, 0.7, 0.2})) == 1);
    CHECK_FALSE(split::route(ClassDistribution({0.9, 0.05, 0.05})).has_value());
    CHECK(split::route(ClassDistribution({0.2, 0.4, 0.4})) == 1);
    const std::vector<double> bad_sum{0.5, 0.7};
    const std::vector<double> negative{-0.2, 0.6, 0.6};
    CHECK_THROWS_AS(split::route(std::span<const double>(bad_sum)), Error);
    CHECK_THROWS_AS(split::route(std::span<const double>(negative)), Error);
  }

  TEST_CASE("route depends only on the argmax") {
    auto rng = core::make_rng(1);
    for (int trial = 0; trial < 500; ++trial) {
      std::vector<double> w(6);
      for (auto& v : w) v = core::uniform(rng, 0.01, 1.0);
      if (trial % 7 == 0) w[3] = w[2];
      const double scale = core::uniform(rng, 0.1, 50.0);
      auto normalized = [](std::vector<double> v) {
        double s = 0.0;
        for (double x : v) s += x;
        for (double& x : v) x /= s;
        return v;
      };
      std::vector<double> scaled = w;
      for (double& x : scaled) x *= scale;
      const auto a = split::route(ClassDistribution(normalized(w)));
      const auto b = split::route(ClassDistribution(normalized(scaled)));
      CHECK(a == b);
      std::size_t best = 0;
      for (std::size_t i = 1; i < w.size(); ++i)
        if (w[i] > w[best]) best = i;
      if (best == 0)
        CHECK_FALSE(a.has_value());
      else
        CHECK(a == int(best));
    }
  }

  TEST_CASE("slice surgery reproduces the baseline channels") {
    const auto baseline = make_baseline(5, 3);
    const auto model = split::surgery(baseline, InitMode::Slice);
    CHECK(model.heads.size() == 5u);
    CHECK_FALSE(model.base.mask.has_value());
    auto rng = core::make_rng(2);
    for (int trial = 0; trial < 5; ++trial) {
      const auto roi = random_roi(rng, baseline.config.feature_channels, 14);
      const auto all = baseline.mask->forward(roi);
      for (int c = 1; c <= 5; ++c) {
        const auto expected = baseline.mask->channel(all, c - 1);
        const auto got = model.heads.at(c).logits(roi);
        for (std::size_t i = 0; i < got.values.size(); ++i) REQUIRE(std::abs(got.values[i] - expected.values[i]) <= 1e-6);
      }
    }
  }

  TEST_CASE("surgery counts, determinism and base copy") {
    const auto baseline = make_baseline(4, 5);
    const auto a = split::surgery(baseline, InitMode::Slice);
    const auto b = split::surgery(baseline, InitMode::Slice);
    CHECK(a.heads.digest() == b.heads.digest());
    std::size_t total = 0;
    for (const auto& p : a.heads.parameters()) total += p.value->size();
    CHECK(total == 4 * a.heads.at(1).parameter_count());
    CHECK(a.heads.at(2).head.outputs() == 1);

    std::map<std::string, core::Tensor> base;
    for (const auto& p : baseline.parameters())
      if (p.owner != pipeline::SubHead::Mask) base[p.name] = *p.value;
    std::size_t seen = 0;
    for (const auto& p : a.base.parameters()) {
      REQUIRE(base.count(p.name) == 1u);
      CHECK(*p.value == base[p.name]);
      ++seen;
    }
    CHECK(seen == base.size());

    const auto f1 = split::surgery(baseline, InitMode::Fresh, 9);
    const auto f2 = split::surgery(baseline, InitMode::Fresh, 9);
    const auto f3 = split::surgery(baseline, InitMode::Fresh, 10);
    CHECK(f1.heads.digest() == f2.heads.digest());
    CHECK(f1.heads.digest() != f3.heads.digest());
    CHECK(f1.heads.digest() != a.heads.digest());
    CHECK(f1.heads.digest(1) != f1.heads.digest(2));
  }

  TEST_CASE("surgery errors") {
    const auto without = PipelineModel(PipelineConfig{}, false);
    CHECK_THROWS_AS(split::surgery(without, InitMode::Slice), Error);
    auto mismatched = make_baseline(5, 1);
    mismatched.mask = pipeline::MaskHead(mismatched.config, 4);
    CHECK_THROWS_AS(split::surgery(mismatched, InitMode::Slice), Error);
  }

  TEST_CASE("registry heads are disjoint") {
    auto model = split::surgery(make_baseline(5, 7), InitMode::Slice);
    std::map<std::string, int> owner_of_name;
    std::map<const void*, int> owner_of_storage;
    for (int c = 1; c <= 5; ++c)
      for (const auto& p : model.heads.head_parameters(c)) {
        CHECK(owner_of_name.emplace(p.name, c).second);
        CHECK(owner_of_storage.emplace(p.value->data(), c).second);
        CHECK(owner_of_storage.emplace(p.grad->data(), c).second);
        CHECK(p.name.rfind("mask_heads/" + std::to_string(c) + "/", 0) == 0);
      }
    std::map<int, std::string> before;
    for (int c = 1; c <= 5; ++c) before[c] = model.heads.digest(c);
    for (auto& p : model.heads.head_parameters(3))
      for (auto& v : p.value->values()) v += 0.5f;
    for (int c = 1; c <= 5; ++c) {
      if (c == 3)
        CHECK(model.heads.digest(c) != before[c]);
      else
        CHECK(model.heads.digest(c) == before[c]);
    }
  }

  TEST_CASE("registry completeness") {
    split::HeadRegistry reg;
    const PipelineConfig config;
    reg.insert(split::SingleClassMaskHead(config, 1));
    reg.insert(split::SingleClassMaskHead(config, 2));
    CHECK_THROWS_AS(reg.check_complete(3), Error);
    reg.insert(split::SingleClassMaskHead(config, 3));
    CHECK_NOTHROW(reg.check_complete(3));
    CHECK_THROWS_AS(reg.insert(split::SingleClassMaskHead(config, 3)), Error);
    CHECK_THROWS_AS(reg.at(4), Error);
  }

  TEST_CASE("single-class split equals the baseline") {
    const auto baseline = make_baseline(1, 11);
    const auto model = split::surgery(baseline, InitMode::Slice);
    std::size_t compared = 0;
    for (const auto& s : images(4, 1)) {
      const auto a = pipeline::baseline_inference(baseline, s.image, permissive());
      const auto b = split::maskuno_inference(model, s.image, permissive());
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].box == b[i].box);
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].score == b[i].score);
        CHECK(a[i].mask == b[i].mask);
        for (std::size_t k = 0; k < a[i].head_logits.values.size(); ++k)
          REQUIRE(std::abs(core::sigmoid(a[i].head_logits.values[k]) - core::sigmoid(b[i].head_logits.values[k])) <
                  1e-6);
        ++compared;
      }
    }
    CHECK(compared > 0u);
  }

  TEST_CASE("dispatch follows the classifier") {
    const auto model = split::surgery(make_baseline(3, 13), InitMode::Slice);
    for (const auto& s : images(4, 3)) {
      split::DispatchLog log;
      const auto dets = split::maskuno_inference(model, s.image, permissive(), &log);
      REQUIRE(log.records.size() == dets.size());
      for (std::size_t i = 0; i < dets.size(); ++i) {
        CHECK(dets[i].label.id == log.records[i].routed_class);
        CHECK(split::route(std::span<const double>(log.records[i].distribution)) == dets[i].label.id);
      }

      // independent recount: classify the same proposals and histogram the foreground argmax
      const auto fm = model.base.backbone.forward(s.image);
      const auto props = pipeline::inference_proposals(model.base, fm, permissive());
      const auto decisions = pipeline::classify_and_refine(model.base, fm, props, permissive());
      std::map<int, int> histogram;
      for (const auto& d : decisions) {
        const auto& p = d.distribution.probs();
        std::size_t best = 0;
        for (std::size_t k = 1; k < p.size(); ++k)
          if (p[k] > p[best]) best = k;
        if (best != 0) ++histogram[int(best)];
      }
      std::map<int, int> calls;
      for (const auto& [c, n] : log.head_calls)
        if (n > 0) calls[c] = n;
      CHECK(calls == histogram);
    }
  }

  TEST_CASE("missing registry head is an error") {
    auto model = split::surgery(make_baseline(2, 17), InitMode::Slice);
    split::HeadRegistry partial;
    partial.insert(model.heads.at(1));
    model.heads = partial;
    CHECK_THROWS_AS(split::maskuno_inference(model, images(1, 2)[0].image, permissive()), Error);
  }

  TEST_CASE("maskuno checkpoint round trip") {
    auto model = split::surgery(make_baseline(3, 19), InitMode::Fresh, 4, "abc");
    auto record = split::to_record(model, nlohmann::json::array());
    testsupport::TempDir dir("mu");
    pipeline::save_checkpoint(record, dir / "m.ckpt");
    const auto back = split::maskuno_from_record(pipeline::load_checkpoint(dir / "m.ckpt"));
    CHECK(back.heads.digest() == model.heads.digest());
    CHECK(back.provenance.source_digest == "abc");
    CHECK(back.provenance.init_mode == InitMode::Fresh);
    CHECK(back.provenance.init_seed == 4u);
    CHECK(record.registry.size() == 3u);
  }

  TEST_CASE("cascade ensemble and degenerate equivalence") {
    const auto e = split::ensemble({ClassDistribution({0.2, 0.5, 0.3}), ClassDistribution({0.6, 0.2, 0.2})});
    CHECK(e[0] == doctest::Approx(0.4));
    CHECK(e[1] == doctest::Approx(0.35));
    CHECK(e[2] == doctest::Approx(0.25));

    auto baseline = make_baseline(3, 23);
    baseline.box.fc2.weight.fill(0.0f);
    baseline.box.fc2.bias.fill(0.0f);
    split::CascadeModel cascade;
    cascade.first = split::surgery(baseline, InitMode::Slice);
    CHECK_THROWS_AS(split::cascade_forward(cascade, images(1, 3)[0].image), Error);
    cascade.stages.push_back(split::clone_last_stage(cascade, 0.6));
    CHECK(cascade.num_stages() == 2);
    std::size_t compared = 0;
    for (const auto& s : images(3, 3)) {
      const auto a = split::maskuno_inference(cascade.first, s.image, permissive());
      split::CascadeTrace trace;
      const auto b = split::cascade_forward(cascade, s.image, permissive(), &trace);
      REQUIRE(a.size() == b.size());
      REQUIRE(trace.stage_boxes.size() == 2u);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(near(a[i].box, b[i].box, 1e-9));
        CHECK(a[i].label == b[i].label);
        CHECK(std::abs(a[i].score - b[i].score) < 1e-9);
        CHECK(a[i].mask == b[i].mask);
        for (std::size_t k = 0; k < a[i].head_logits.values.size(); ++k)
          REQUIRE(std::abs(core::sigmoid(a[i].head_logits.values[k]) - core::sigmoid(b[i].head_logits.values[k])) <
                  1e-6);
        CHECK(near(trace.stage_boxes[0][i], trace.stage_boxes[1][i], 1e-9));
        ++compared;
      }
    }
    CHECK(compared > 0u);
  }

  TEST_CASE("cascade checkpoint round trip") {
    split::CascadeModel cascade;
    cascade.first = split::surgery(make_baseline(2, 29), InitMode::Slice);
    cascade.stages.push_back(split::clone_last_stage(cascade, 0.6));
    cascade.stages.push_back(split::clone_last_stage(cascade, 0.7));
    for (auto& p : cascade.stages[1].parameters(3)) p.value->fill(0.25f);
    auto record = split::to_record(cascade, nlohmann::json::array());
    const auto back = split::cascade_from_record(record);
    CHECK(back.num_stages() == 3);
    CHECK(back.stages[1].iou_threshold == 0.7);
    auto& mutable_back = const_cast<split::CascadeModel&>(back);
    for (auto& p : mutable_back.stages[1].parameters(3)) CHECK(p.value->values()[0] == 0.25f);
    CHECK(split::to_record(back, nlohmann::json::array()).digest == record.digest);
  }
}
