#include <doctest.h>

#include "coarseseg/io.hpp"
#include "coarseseg/panels.hpp"
#include "support.hpp"

using namespace coarseseg;

TEST_CASE("error colours") {
  CHECK(error_color(1, 1) == kTruePositive);
  CHECK(error_color(0, 0) == kTrueNegative);
  CHECK(error_color(0, 1) == kFalseNegative);
  CHECK(error_color(1, 0) == kFalsePositive);
  CHECK(error_color(2, 1) == kFalsePositive);
}

TEST_CASE("a perfect prediction paints only white and black") {
  const SegDataset ds = testing::blob_dataset(1, 3);
  const auto& gt = ds.samples[0].gt_label;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const Rgb c = error_color(gt.data[i], gt.data[i]);
    CHECK((c == kTruePositive || c == kTrueNegative));
  }
}

TEST_CASE("panel grid dimensions") {
  const PanelLayout lay = panel_layout(28, 28, 4);
  CHECK(lay.columns == 4);
  CHECK(lay.rows * lay.columns >= static_cast<int>(panel_names().size()));
  CHECK(lay.tile_height == 112);
  CHECK(lay.width == lay.columns * lay.tile_width + (lay.columns + 1) * lay.gap);
  CHECK(lay.height == lay.rows * lay.tile_height + (lay.rows + 1) * lay.gap);
}

TEST_CASE("rendered and exported panels agree") {
  const SegDataset ds = testing::noisy_blobs(1, 2);
  ArchDescriptor a;
  a.height = a.width = 16;
  a.pos_sources = a.neg_sources = {"synthL2"};
  const Model<float> model(a, 1);
  const TransitionMatrix m = build_transition_matrix(2, TransitionMode::uniform);
  const io::RawImage img = render_panels(model, m, ds.samples[0], false, 2);
  const PanelLayout lay = panel_layout(16, 16, 2);
  CHECK(img.channels == 3);
  CHECK(img.width == lay.width);
  CHECK(img.height == lay.height);

  testing::TempDir dir("panels");
  export_panels(model, m, ds.samples[0], dir / "p.png", false, 2);
  const io::RawImage back = io::read_png(dir / "p.png");
  CHECK(back.data == img.data);
}

TEST_CASE("identity confusion matrices give a saturated diagonal tile") {
  const SegDataset ds = testing::noisy_blobs(1, 2);
  ArchDescriptor a;
  a.height = a.width = 16;
  a.head_init_std = 0.5;
  a.pos_sources = a.neg_sources = {"synthL2"};
  const Model<float> model(a, 1);
  const TransitionMatrix m = build_transition_matrix(2, TransitionMode::uniform);
  const io::RawImage id = render_panels(model, m, ds.samples[0], true, 1);
  const io::RawImage learned = render_panels(model, m, ds.samples[0], false, 1);
  const PanelLayout lay = panel_layout(16, 16, 1);
  const int tile = 7;  // cm_diag_positive
  REQUIRE(panel_names()[tile] == "cm_diag_positive");
  const int y0 = lay.gap + (tile / lay.columns) * (lay.tile_height + lay.gap);
  const int x0 = lay.gap + (tile % lay.columns) * (lay.tile_width + lay.gap);
  auto px = [&](const io::RawImage& im, int y, int x) {
    const std::size_t o = (static_cast<std::size_t>(y) * im.width + x) * 3;
    return Rgb{im.data[o], im.data[o + 1], im.data[o + 2]};
  };
  const Rgb first = px(id, y0, x0);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) CHECK(px(id, y0 + y, x0 + x) == first);
  bool differs = false;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) differs = differs || !(px(learned, y0 + y, x0 + x) == first);
  CHECK(differs);
}

TEST_CASE("ground-truth ignore pixels are gray") {
  const Rgb c = error_color(0, kIgnore);
  CHECK(c[0] == c[1]);
  CHECK(c[1] == c[2]);
}
