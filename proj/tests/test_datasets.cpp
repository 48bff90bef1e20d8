#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "coarseseg/datasets.hpp"
#include "coarseseg/io.hpp"
#include "support.hpp"

using namespace coarseseg;

TEST_CASE("label space validation") {
  CHECK_NOTHROW(LabelSpace::binary().validate());
  CHECK(LabelSpace::mnist_multiclass().num_classes == 11);
  LabelSpace one{1, {"bg"}};
  CHECK_THROWS_AS(one.validate(), ValidationError);
  LabelSpace dup{2, {"a", "a"}};
  CHECK_THROWS_AS(dup.validate(), ValidationError);
}

TEST_CASE("multiclass digit 7 thresholds per pixel") {
  std::mt19937_64 rng(11);
  RawDigit d;
  d.digit = 7;
  d.image = Image(28, 28, 1);
  for (auto& v : d.image.data) v = static_cast<std::uint8_t>(rng() % 256);
  const RawDigit raw[] = {d};
  const SegDataset ds = build_mnist_seg(raw, MnistMode::multiclass);
  REQUIRE(ds.samples.size() == 1);
  const auto& gt = ds.samples[0].gt_label;
  for (int y = 0; y < 28; ++y)
    for (int x = 0; x < 28; ++x) {
      const double intensity = d.image.data[y * 28 + x] / 255.0;
      const int expected = intensity > 0.5 ? 8 : 0;
      CHECK(gt.at(y, x) == expected);
    }
}

TEST_CASE("binary mode labels foreground 1") {
  RawDigit d;
  d.digit = 3;
  d.image = Image(28, 28, 1);
  d.image.data[0] = 200;
  d.image.data[1] = 127;
  d.image.data[2] = 128;
  const RawDigit raw[] = {d};
  const auto gt = build_mnist_seg(raw, MnistMode::binary).samples[0].gt_label;
  CHECK(gt.data[0] == 1);
  CHECK(gt.data[1] == 0);
  CHECK(gt.data[2] == 1);
}

TEST_CASE("save and load round trip") {
  testing::TempDir dir("ds");
  SegDataset ds = testing::noisy_blobs(5, 3);
  ds.samples[4].pos_coarse.clear();
  ds.samples[4].neg_coarse.clear();
  ds.split_tag = SplitTag::val;
  const auto summary = save_dataset(ds, dir / "set");
  CHECK(summary.num_samples == 5);
  const SegDataset back = load_dataset(dir / "set");
  CHECK(back == ds);
  CHECK(back.samples[4].pos_coarse.empty());
  CHECK(back.samples[4].neg_coarse.empty());
}

TEST_CASE("label outside the label space fails to load") {
  testing::TempDir dir("bad");
  const SegDataset ds = testing::blob_dataset(2, 1);
  save_dataset(ds, dir / "set");
  io::RawImage lab = io::read_png(dir / "set" / "labels" / (ds.samples[0].id + ".png"));
  lab.data[5] = 3;
  io::write_png(dir / "set" / "labels" / (ds.samples[0].id + ".png"), lab);
  CHECK_THROWS_AS(load_dataset(dir / "set"), Error);
}

TEST_CASE("duplicate ids are rejected") {
  SegDataset ds = testing::blob_dataset(2, 1);
  ds.samples[1].id = ds.samples[0].id;
  CHECK_THROWS_AS(ds.validate(), ValidationError);
}

TEST_CASE("split 80/20 is disjoint and complete") {
  const SegDataset ds = testing::blob_dataset(100, 5, 8, 8);
  const double fr[] = {0.8, 0.2};
  const auto parts = split(ds, fr, 7);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].samples.size() == 80);
  CHECK(parts[1].samples.size() == 20);
  std::set<std::string> a, b, all;
  for (const auto& s : parts[0].samples) a.insert(s.id);
  for (const auto& s : parts[1].samples) b.insert(s.id);
  for (const auto& s : ds.samples) all.insert(s.id);
  std::vector<std::string> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  CHECK(inter.empty());
  std::set<std::string> uni = a;
  uni.insert(b.begin(), b.end());
  CHECK(uni == all);

  const auto again = split(ds, fr, 7);
  CHECK(again[0] == parts[0]);
  const double bad[] = {0.5, 0.2};
  CHECK_THROWS_AS(split(ds, bad, 7), ValidationError);
}
