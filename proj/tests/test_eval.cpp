#include <doctest.h>

#include <random>

#include "coarseseg/eval.hpp"
#include "support.hpp"

using namespace coarseseg;

namespace {

LabelMap grid2(std::initializer_list<std::uint8_t> v) {
  LabelMap m(2, 2);
  m.data.assign(v);
  return m;
}

}  // namespace

TEST_CASE("2x2 counting example") {
  const EvalReport r = miou(grid2({0, 0, 0, 0}), grid2({0, 0, 1, 1}), 2);
  REQUIRE(r.per_class_iou[0].has_value());
  REQUIRE(r.per_class_iou[1].has_value());
  CHECK(std::abs(*r.per_class_iou[0] - 0.5) < 1e-9);
  CHECK(std::abs(*r.per_class_iou[1] - 0.0) < 1e-9);
  CHECK(std::abs(r.miou - 0.25) < 1e-9);
}

TEST_CASE("absent classes are excluded from the mean") {
  const EvalReport r = miou(grid2({0, 0, 1, 1}), grid2({0, 0, 1, 1}), 4);
  CHECK(r.miou == 1.0);
  CHECK_FALSE(r.per_class_iou[2].has_value());
  CHECK_FALSE(r.per_class_iou[3].has_value());
}

TEST_CASE("ignored ground truth pixels are skipped") {
  const EvalReport r = miou(grid2({1, 0, 1, 1}), grid2({kIgnore, 0, 1, 1}), 2);
  CHECK(r.miou == 1.0);
  try {
    miou(grid2({0, 0, 0, 0}), grid2({kIgnore, kIgnore, kIgnore, kIgnore}), 2);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(e.code() == "E_EMPTY_REPORT");
  }
  CHECK_THROWS_AS(miou(LabelMap(2, 3), LabelMap(2, 2), 2), ShapeError);
}

TEST_CASE("IoU is symmetric and bounded") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    const int l = 2 + static_cast<int>(rng() % 4);
    LabelMap a(6, 7), b(6, 7);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(rng() % l);
    for (auto& v : b.data) v = static_cast<std::uint8_t>(rng() % l);
    const EvalReport ab = miou(a, b, l), ba = miou(b, a, l);
    CHECK(std::abs(ab.miou - ba.miou) < 1e-12);
    CHECK(ab.miou >= 0.0);
    CHECK(ab.miou <= 1.0);
    for (const auto& c : ab.per_class_iou)
      if (c) CHECK((*c >= 0.0 && *c <= 1.0));
    CHECK(miou(a, a, l).miou == 1.0);
  }
}

TEST_CASE("untrained network sits at the all-background baseline") {
  const SegDataset ds = testing::blob_dataset(6, 9);
  ArchDescriptor a;
  a.height = a.width = 16;
  const Model<float> model(a, 0);
  const EvalReport r = evaluate(model, ds, "toy", "init");
  IouCounts background(2);
  for (const auto& s : ds.samples) background.add(LabelMap(16, 16, 0), s.gt_label);
  CHECK(std::isfinite(r.miou));
  CHECK(std::isfinite(r.gt_ce));
  CHECK(std::abs(r.miou - background.miou()) < 0.15);
  CHECK(r.per_image_miou.size() == 6);
  const auto j = r.to_json();
  CHECK(j.at("dataset") == "toy");
  CHECK(j.at("per_image").size() == 6);

  SegDataset three = ds;
  three.space = LabelSpace{3, {"a", "b", "c"}};
  CHECK_THROWS_AS(evaluate(model, three), ValidationError);
}
