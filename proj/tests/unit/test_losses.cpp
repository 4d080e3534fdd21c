// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "maskuno/core/error.hpp"
#include "maskuno/losses/losses.hpp"
#include "support.hpp"

using namespace maskuno;
using core::BinaryMask;
using core::ClassDistribution;
using core::ClassLabel;
using losses::Reduction;

namespace {

std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (auto& v : p) v /= s;
  return p;
}

BinaryMask random_mask(core::Rng& rng, int h, int w) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(y, x, core::uniform01(rng) < 0.5);
  return m;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("cross entropy examples") {
    CHECK(losses::cls_cross_entropy(ClassDistribution({0, 1, 0}), ClassLabel{1}).value == 0.0);
    for (int t = 0; t < 4; ++t)
      CHECK(std::abs(losses::cls_cross_entropy(ClassDistribution({.25, .25, .25, .25}), ClassLabel{t}).value -
                     1.3862943611198906) < 1e-9);
    CHECK(std::abs(losses::cls_cross_entropy(ClassDistribution({.6, .1, .3}), ClassLabel{1}).value - 2.302585092994046) <
          1e-9);
    CHECK(std::abs(losses::cls_cross_entropy(ClassDistribution({1, 0}), ClassLabel{1}).value - 27.631021115928547) <
          1e-9);
    CHECK_THROWS_AS(losses::cls_cross_entropy(ClassDistribution({.5, .5}), ClassLabel{2}), Error);
    CHECK_THROWS_AS(losses::cls_cross_entropy(ClassDistribution({.5, .5}), ClassLabel{-1}), Error);
  }

  TEST_CASE("smooth l1 examples") {
    CHECK(losses::smooth_l1(0.0).value == 0.0);
    CHECK(std::abs(losses::smooth_l1(0.5).value - 0.125) < 1e-9);
    CHECK(std::abs(losses::smooth_l1(-3.0).value - 2.5) < 1e-9);
    const std::vector<double> xs{0.5, -3.0, 0.0, 2.0};
    CHECK(std::abs(losses::smooth_l1(xs, Reduction::Sum).value - 4.125) < 1e-9);
    CHECK(std::abs(losses::smooth_l1(xs, Reduction::Mean).value - 4.125 / 4) < 1e-9);
    CHECK(losses::smooth_l1(xs, Reduction::Mean).count == 4u);
    CHECK_THROWS_AS(losses::smooth_l1(NAN), Error);
    CHECK_THROWS_AS(losses::smooth_l1(INFINITY), Error);
  }

  TEST_CASE("smooth l1 is continuously differentiable at the knots") {
    for (double s : {1.0, -1.0}) {
      const double h = 1e-9;
      CHECK(std::abs(losses::smooth_l1_term(s - h) - losses::smooth_l1_term(s + h)) < 1e-8);
      CHECK(losses::smooth_l1_term(s) == 0.5);
      CHECK(losses::smooth_l1_derivative(s) == s);
      CHECK(std::abs(losses::smooth_l1_derivative(s - h) - s) < 1e-8);
      CHECK(std::abs(losses::smooth_l1_derivative(s + h) - s) < 1e-8);
      const double left = (losses::smooth_l1_term(s) - losses::smooth_l1_term(s - 1e-6)) / 1e-6;
      const double right = (losses::smooth_l1_term(s + 1e-6) - losses::smooth_l1_term(s)) / 1e-6;
      CHECK(std::abs(left - s) < 1e-5);
      CHECK(std::abs(right - s) < 1e-5);
    }
  }

  TEST_CASE("mask bce examples") {
    auto rng = core::make_rng(1);
    const BinaryMask target = random_mask(rng, 28, 28);
    const std::vector<double> half(784, 0.5);
    CHECK(std::abs(losses::mask_bce(half, target, Reduction::Sum).value - 784 * std::log(2.0)) < 1e-9);
    CHECK(std::abs(losses::mask_bce(half, target, Reduction::Mean).value - std::log(2.0)) < 1e-9);
    std::vector<double> exact(784);
    for (std::size_t i = 0; i < 784; ++i) exact[i] = target.bits()[i];
    const double perfect = losses::mask_bce(exact, target, Reduction::Sum).value;
    CHECK(perfect >= 0.0);
    CHECK(perfect <= 784 * 2e-12);
    CHECK_THROWS_AS(losses::mask_bce(std::vector<double>(10, 0.5), target, Reduction::Sum), Error);
  }

  TEST_CASE("mask bce matches per-pixel brute force") {
    auto rng = core::make_rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      const BinaryMask target = random_mask(rng, 8, 8);
      std::vector<double> p(64);
      for (auto& v : p) v = core::uniform01(rng);
      double expected = 0.0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const double q = std::clamp(p[std::size_t(y * 8 + x)], 1e-12, 1.0 - 1e-12);
          expected += target.at(y, x) ? -std::log(q) : -std::log(1.0 - q);
        }
      CHECK(std::abs(losses::mask_bce(p, target, Reduction::Sum).value - expected) < 1e-9);
      CHECK(std::abs(losses::mask_bce(p, target, Reduction::Mean).value - expected / 64) < 1e-9);
    }
  }

  TEST_CASE("mask bce decomposes over pixel partitions") {
    auto rng = core::make_rng(3);
    const BinaryMask target = random_mask(rng, 6, 6);
    std::vector<double> p(36);
    for (auto& v : p) v = core::uniform(rng, 0.01, 0.99);
    const double total = losses::mask_bce(p, target, Reduction::Sum).value;
    double singles = 0.0, rows = 0.0;
    for (int y = 0; y < 6; ++y) {
      BinaryMask row(1, 6);
      for (int x = 0; x < 6; ++x) {
        BinaryMask one(1, 1);
        one.set(0, 0, target.at(y, x));
        row.set(0, x, target.at(y, x));
        singles += losses::mask_bce(std::span(p).subspan(std::size_t(y * 6 + x), 1), one, Reduction::Sum).value;
      }
      rows += losses::mask_bce(std::span(p).subspan(std::size_t(y * 6), 6), row, Reduction::Sum).value;
    }
    CHECK(std::abs(total - singles) < 1e-12);
    CHECK(std::abs(total - rows) < 1e-12);
  }

  TEST_CASE("losses are non-negative and vanish only at perfect predictions") {
    auto rng = core::make_rng(4);
    for (int i = 0; i < 100; ++i) {
      std::vector<double> z(5);
      for (auto& v : z) v = core::uniform(rng, -4, 4);
      const auto dist = ClassDistribution(softmax(z));
      CHECK(losses::cls_cross_entropy(dist, ClassLabel{int(i % 5)}).value > 0.0);
      const double x = core::uniform(rng, -5, 5);
      CHECK(losses::smooth_l1(x).value > 0.0);
    }
  }

  TEST_CASE("analytic gradients match central differences") {
    auto rng = core::make_rng(5);
    const double h = 1e-5;
    double worst_ce = 0.0, worst_l1 = 0.0, worst_bce = 0.0, worst_logit = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      // cross entropy through the softmax, per logit
      std::vector<double> z(6);
      for (auto& v : z) v = core::uniform(rng, -3, 3);
      const ClassLabel truth{int(trial % 6)};
      const auto grad = losses::cls_cross_entropy_logit_grad(ClassDistribution(softmax(z)), truth);
      for (std::size_t k = 0; k < z.size(); ++k) {
        auto zp = z, zm = z;
        zp[k] += h;
        zm[k] -= h;
        const double fd = (losses::cls_cross_entropy(ClassDistribution(softmax(zp)), truth).value -
                           losses::cls_cross_entropy(ClassDistribution(softmax(zm)), truth).value) /
                          (2 * h);
        worst_ce = std::max(worst_ce, relative_error(grad[k], fd));
      }

      // smooth l1, away from the knots where the second derivative jumps
      std::vector<double> x(8);
      for (auto& v : x) {
        do v = core::uniform(rng, -4, 4);
        while (std::abs(std::abs(v) - 1.0) < 1e-3);
      }
      for (Reduction red : {Reduction::Sum, Reduction::Mean}) {
        const auto g = losses::smooth_l1_grad(x, red);
        for (std::size_t k = 0; k < x.size(); ++k) {
          auto xp = x, xm = x;
          xp[k] += h;
          xm[k] -= h;
          const double fd = (losses::smooth_l1(xp, red).value - losses::smooth_l1(xm, red).value) / (2 * h);
          worst_l1 = std::max(worst_l1, relative_error(g[k], fd));
        }
      }

      // mask bce, per probability
      const BinaryMask target = random_mask(rng, 4, 4);
      std::vector<double> p(16);
      for (auto& v : p) v = core::uniform(rng, 0.05, 0.95);
      for (Reduction red : {Reduction::Sum, Reduction::Mean}) {
        const auto g = losses::mask_bce_prob_grad(p, target, red);
        for (std::size_t k = 0; k < p.size(); ++k) {
          auto pp = p, pm = p;
          pp[k] += h;
          pm[k] -= h;
          const double fd = (losses::mask_bce(pp, target, red).value - losses::mask_bce(pm, target, red).value) / (2 * h);
          worst_bce = std::max(worst_bce, relative_error(g[k], fd));
        }
      }

      // mask bce from logits; values and steps are exact in float32
      std::vector<float> logits(16), grad_logits(16);
      for (auto& v : logits) v = float(std::round(core::uniform(rng, -3, 3) * 1024.0) / 1024.0);
      losses::mask_bce_with_logits(logits, target, Reduction::Sum, grad_logits);
      const float step = 1.0f / 1024.0f;
      for (std::size_t k = 0; k < logits.size(); ++k) {
        auto lp = logits, lm = logits;
        std::vector<float> scratch(16);
        lp[k] += step;
        lm[k] -= step;
        const double fd = (losses::mask_bce_with_logits(lp, target, Reduction::Sum, scratch).value -
                           losses::mask_bce_with_logits(lm, target, Reduction::Sum, scratch).value) /
                          (2.0 * step);
        worst_logit = std::max(worst_logit, relative_error(grad_logits[k], fd));
      }
    }
    CHECK(worst_ce < 1e-4);
    CHECK(worst_l1 < 1e-4);
    CHECK(worst_bce < 1e-4);
    CHECK(worst_logit < 1e-4);
  }

  TEST_CASE("logit and probability forms agree") {
    auto rng = core::make_rng(6);
    const BinaryMask target = random_mask(rng, 5, 5);
    std::vector<float> z(25), g(25);
    std::vector<double> p(25);
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = float(core::uniform(rng, -6, 6));
      p[i] = core::sigmoid(z[i]);
    }
    const double a = losses::mask_bce_with_logits(z, target, Reduction::Mean, g).value;
    CHECK(std::abs(a - losses::mask_bce(p, target, Reduction::Mean).value) < 1e-9);
  }

  TEST_CASE("mask targets") {
    const auto filled = testsupport::rect_instance(32, 32, 2, 4, 6, 10, 12);
    const auto t = losses::per_class_mask_loss_target(filled.box, ClassLabel{2}, filled, 28);
    CHECK(t.height() == 28);
    CHECK(t.count() == 28 * 28);
    CHECK_THROWS_AS(losses::per_class_mask_loss_target(filled.box, ClassLabel{3}, filled, 28), Error);

    synth::InstanceAnnotation hand;
    hand.label = ClassLabel{1};
    hand.mask = BinaryMask(4, 4);
    const int rows[4][4] = {{1, 0, 0, 1}, {0, 1, 1, 0}, {0, 1, 1, 1}, {1, 0, 0, 1}};
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) hand.mask.set(y, x, rows[y][x] != 0);
    hand.box = hand.mask.tight_box();
    hand.area = hand.mask.count();
    const auto small = losses::per_class_mask_loss_target(hand.box, ClassLabel{1}, hand, 2);
    CHECK(small.at(0, 0) == 1);
    CHECK(small.at(0, 1) == 0);
    CHECK(small.at(1, 0) == 0);
    CHECK(small.at(1, 1) == 1);
  }

  TEST_CASE("matched ROIs always see part of the instance") {
    const auto samples = synth::generate_split(testsupport::tiny_spec(5, 30, 0), synth::Split::Train);
    auto rng = core::make_rng(7);
    int checked = 0;
    for (const auto& s : samples)
      for (const auto& a : s.annotations)
        for (int k = 0; k < 20; ++k) {
          const double j = 0.2;
          const core::Box roi = core::clip_box({a.box.x1 + core::uniform(rng, -j, j) * a.box.width(),
                                                a.box.y1 + core::uniform(rng, -j, j) * a.box.height(),
                                                a.box.x2 + core::uniform(rng, -j, j) * a.box.width(),
                                                a.box.y2 + core::uniform(rng, -j, j) * a.box.height()},
                                               s.width, s.height);
          if (!roi.valid() || core::box_iou(roi, a.box) < 0.5) continue;
          ++checked;
          CHECK(losses::per_class_mask_loss_target(roi, a.label, a, 28).count() >= 1);
        }
    CHECK(checked > 100);
  }
}
