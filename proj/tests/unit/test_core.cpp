// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "maskuno/core/digest.hpp"
#include "maskuno/core/error.hpp"
#include "maskuno/core/geometry.hpp"
#include "maskuno/core/types.hpp"
#include "support.hpp"

using namespace maskuno;
using core::BinaryMask;
using core::Box;
using testsupport::rect_mask;

TEST_SUITE("core") {
  TEST_CASE("box iou examples") {
    CHECK(core::box_iou({0, 0, 10, 10}, {0, 0, 10, 10}) == doctest::Approx(1.0));
    CHECK(core::box_iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
    CHECK(core::box_iou({0, 0, 10, 10}, {5, 5, 15, 15}) == doctest::Approx(25.0 / 175.0).epsilon(1e-12));
  }

  TEST_CASE("box iou rejects degenerate boxes") {
    try {
      core::box_iou({0, 0, 0, 10}, {0, 0, 10, 10});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Geometry);
    }
  }

  TEST_CASE("mask iou examples") {
    const auto a = rect_mask(4, 4, 0, 0, 2, 4);
    const auto b = rect_mask(4, 4, 0, 0, 4, 2);
    CHECK(core::mask_iou(a, a) == 1.0);
    CHECK(core::mask_iou(rect_mask(4, 4, 0, 0, 1, 1), rect_mask(4, 4, 3, 3, 1, 1)) == 0.0);
    CHECK(core::mask_iou(a, b) == doctest::Approx(4.0 / 12.0).epsilon(1e-12));
    CHECK(core::mask_iou(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
    CHECK_THROWS_AS(core::mask_iou(BinaryMask(4, 4), BinaryMask(4, 5)), Error);
  }

  TEST_CASE("iou properties on random operands") {
    auto rng = core::make_rng(3);
    for (int i = 0; i < 300; ++i) {
      const Box a = testsupport::random_box(rng, 64), b = testsupport::random_box(rng, 64);
      const double ab = core::box_iou(a, b);
      CHECK(ab == core::box_iou(b, a));
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0);
      CHECK(core::box_iou(a, a) == doctest::Approx(1.0));

      BinaryMask ma(12, 12), mb(12, 12);
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
          ma.set(y, x, core::uniform01(rng) < 0.4);
          mb.set(y, x, core::uniform01(rng) < 0.4);
        }
      const double m = core::mask_iou(ma, mb);
      CHECK(m == core::mask_iou(mb, ma));
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
      CHECK((m == 1.0) == (ma == mb));
    }
  }

  TEST_CASE("box delta examples") {
    const auto zero = core::encode_box_delta({3, 4, 9, 12}, {3, 4, 9, 12});
    CHECK(zero.dx == 0.0);
    CHECK(zero.dy == 0.0);
    CHECK(zero.dw == 0.0);
    CHECK(zero.dh == 0.0);
    const auto d = core::encode_box_delta({0, 0, 20, 10}, {0, 0, 10, 10});
    CHECK(d.dx == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(d.dy == doctest::Approx(0.0));
    CHECK(d.dw == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(d.dh == doctest::Approx(0.0));
    CHECK_THROWS_AS(core::decode_box_delta({NAN, 0, 0, 0}, {0, 0, 1, 1}), Error);
  }

  TEST_CASE("box delta round trip on 1000 random pairs") {
    auto rng = core::make_rng(5);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Box t = testsupport::random_box(rng, 128), r = testsupport::random_box(rng, 128);
      const Box back = core::decode_box_delta(core::encode_box_delta(t, r), r);
      const double scale = std::max({std::abs(t.x1), std::abs(t.y1), std::abs(t.x2), std::abs(t.y2), 1.0});
      worst = std::max({worst, std::abs(back.x1 - t.x1) / scale, std::abs(back.y1 - t.y1) / scale,
                        std::abs(back.x2 - t.x2) / scale, std::abs(back.y2 - t.y2) / scale});
    }
    CHECK(worst < 1e-6);
  }

  TEST_CASE("class distribution normalization and validation") {
    auto rng = core::make_rng(9);
    for (int i = 0; i < 100; ++i) {
      std::vector<float> logits(6);
      for (auto& v : logits) v = float(core::uniform(rng, -20, 20));
      const auto dist = core::ClassDistribution::from_logits(logits);
      double sum = 0.0;
      for (double p : dist.probs()) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        sum += p;
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(core::ClassDistribution({0.5, 0.6}), Error);
    CHECK_THROWS_AS(core::ClassDistribution({-0.1, 1.1}), Error);
    CHECK(core::ClassDistribution({0.2, 0.4, 0.4}).argmax() == 1);
  }

  TEST_CASE("tight box covers exactly the set pixels") {
    const auto m = rect_mask(10, 10, 2, 3, 4, 5);
    CHECK(m.tight_box() == Box{2, 3, 6, 8});
    CHECK(m.count() == 20);
    CHECK_FALSE(BinaryMask(5, 5).tight_box().valid());
  }

  TEST_CASE("sha256 known vector") {
    CHECK(core::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    core::Digest d;
    d.update("a").update("bc");
    CHECK(d.hex() == core::sha256_hex("abc"));
  }
}
