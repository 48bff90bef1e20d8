#include "coarseseg/panels.hpp"

#include <algorithm>
#include <cmath>

#include "coarseseg/error.hpp"

namespace coarseseg {

Rgb error_color(std::uint8_t pred, std::uint8_t gt) {
  if (gt == kIgnore) return {96, 96, 96};
  if (pred == gt) return gt == 0 ? kTrueNegative : kTruePositive;
  if (pred == 0) return kFalseNegative;
  return kFalsePositive;
}

const std::vector<std::string>& panel_names() {
  static const std::vector<std::string> names = {
      "input",         "ground_truth",  "prediction",     "positive_coarse",
      "noisy_positive", "negative_coarse", "complementary", "cm_diag_positive",
      "cm_diag_negative", "transition_matrix"};
  return names;
}

PanelLayout panel_layout(int image_height, int image_width, int scale) {
  if (image_height < 1 || image_width < 1 || scale < 1) {
    throw ValidationError("panel_layout: sizes must be positive");
  }
  PanelLayout l;
  const int n = static_cast<int>(panel_names().size());
  l.rows = (n + l.columns - 1) / l.columns;
  l.tile_height = image_height * scale;
  l.tile_width = image_width * scale;
  l.width = l.columns * l.tile_width + (l.columns + 1) * l.gap;
  l.height = l.rows * l.tile_height + (l.rows + 1) * l.gap;
  return l;
}

namespace {

using Tile = std::vector<Rgb>;  // h x w, row-major

Rgb gray(double v) {
  const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  return {g, g, g};
}

Rgb heat(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * std::min(1.0, 2.0 * v))),
          static_cast<std::uint8_t>(std::lround(255.0 * std::max(0.0, 2.0 * v - 1.0))),
          static_cast<std::uint8_t>(std::lround(96.0 * (1.0 - v)))};
}

Tile error_tile(const LabelMap& pred, const LabelMap& gt) {
  Tile t(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) t[i] = error_color(pred.data[i], gt.data[i]);
  return t;
}

Tile coarse_tile(const LabelMap* labels, std::size_t n, bool negative) {
  Tile t(n, Rgb{96, 96, 96});
  if (!labels) return t;
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = labels->data[i];
    if (v == kIgnore) continue;
    if (negative) {
      t[i] = Rgb{0, 160, 255};
    } else {
      t[i] = v == 0 ? kTrueNegative : kTruePositive;
    }
  }
  return t;
}

LabelMap argmax_map(const Mat<float>& v, int h, int w) {
  LabelMap out(h, w);
  for (Eigen::Index px = 0; px < v.cols(); ++px) {
    Eigen::Index best = 0;
    v.col(px).maxCoeff(&best);
    out.data[px] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace

io::RawImage render_panels(const Model<float>& model, const TransitionMatrix& m,
                           const SegSample& sample, bool identity_cm, int scale) {
  const ArchDescriptor& arch = model.arch;
  const int h = arch.height, w = arch.width, l = arch.num_classes;
  if (sample.image.height != h || sample.image.width != w) {
    throw ShapeError("panels: sample '" + sample.id + "' does not match the architecture");
  }
  if (m.classes() != l) throw ValidationError("panels: transition matrix size differs from L");
  const auto n = static_cast<std::size_t>(h) * w;

  const ProbMapT<float> p = seg_forward(model, sample.image);
  const LabelMap pred = argmax_map(p.values, h, w);

  auto cm_of = [&](Branch b, const std::vector<std::string>& names) {
    if (identity_cm || names.empty()) {
      Mat<float> id = Mat<float>::Zero(static_cast<Eigen::Index>(l) * l, static_cast<Eigen::Index>(n));
      for (int i = 0; i < l; ++i) id.row(i * l + i).setOnes();
      return id;
    }
    return cm_forward(model, sample.image, b, 0).values;
  };
  const Mat<float> cm_pos = cm_of(Branch::objective, arch.pos_sources);
  const Mat<float> cm_neg = cm_of(Branch::complementary, arch.neg_sources);

  Mat<float> noisy(l, static_cast<Eigen::Index>(n)), comp(l, static_cast<Eigen::Index>(n));
  for (Eigen::Index px = 0; px < static_cast<Eigen::Index>(n); ++px) {
    Eigen::Map<const Mat<float>> a_pos(cm_pos.col(px).data(), l, l);
    Eigen::Map<const Mat<float>> a_neg(cm_neg.col(px).data(), l, l);
    noisy.col(px) = a_pos * p.values.col(px);
    const Eigen::VectorXd u = (a_neg * p.values.col(px)).cast<double>();
    comp.col(px) = (m.values.transpose() * u).cast<float>();
  }

  const CoarseMap* pos = nullptr;
  const CoarseMap* neg = nullptr;
  if (!arch.pos_sources.empty()) pos = sample.find_pos(arch.pos_sources.front());
  if (!arch.neg_sources.empty()) neg = sample.find_neg(arch.neg_sources.front());
  if (!pos && !sample.pos_coarse.empty()) pos = &sample.pos_coarse.front();
  if (!neg && !sample.neg_coarse.empty()) neg = &sample.neg_coarse.front();

  std::vector<Tile> tiles;
  {
    Tile t(n);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t[y * w + x] = gray(sample.image.intensity(y, x, 0));
    tiles.push_back(std::move(t));
  }
  tiles.push_back(error_tile(sample.gt_label, sample.gt_label));
  tiles.push_back(error_tile(pred, sample.gt_label));
  tiles.push_back(coarse_tile(pos ? &pos->labels : nullptr, n, false));
  tiles.push_back(error_tile(argmax_map(noisy, h, w), sample.gt_label));
  tiles.push_back(coarse_tile(neg ? &neg->labels : nullptr, n, true));
  {
    const LabelMap v = argmax_map(comp, h, w);
    Tile t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = v.data[i] == 0 ? kTrueNegative : kTruePositive;
    tiles.push_back(std::move(t));
  }
  for (const Mat<float>* cm : {&cm_pos, &cm_neg}) {
    Tile t(n);
    for (std::size_t i = 0; i < n; ++i) {
      double tr = 0.0;
      for (int c = 0; c < l; ++c) tr += (*cm)(c * l + c, static_cast<Eigen::Index>(i));
      t[i] = heat(tr / l);
    }
    tiles.push_back(std::move(t));
  }

  const PanelLayout lay = panel_layout(h, w, scale);
  io::RawImage img;
  img.height = lay.height;
  img.width = lay.width;
  img.channels = 3;
  img.data.assign(static_cast<std::size_t>(img.height) * img.width * 3, 64);
  auto put = [&](int tile, int ty, int tx, Rgb c) {
    const int oy = lay.gap + (tile / lay.columns) * (lay.tile_height + lay.gap);
    const int ox = lay.gap + (tile % lay.columns) * (lay.tile_width + lay.gap);
    const std::size_t off = (static_cast<std::size_t>(oy + ty) * img.width + ox + tx) * 3;
    img.data[off] = c[0];
    img.data[off + 1] = c[1];
    img.data[off + 2] = c[2];
  };
  for (int k = 0; k < static_cast<int>(tiles.size()); ++k) {
    for (int ty = 0; ty < lay.tile_height; ++ty)
      for (int tx = 0; tx < lay.tile_width; ++tx)
        put(k, ty, tx, tiles[k][static_cast<std::size_t>(ty / scale) * w + tx / scale]);
  }
  const int mt = static_cast<int>(tiles.size());
  for (int ty = 0; ty < lay.tile_height; ++ty)
    for (int tx = 0; tx < lay.tile_width; ++tx) {
      const int i = ty * l / lay.tile_height, j = tx * l / lay.tile_width;
      put(mt, ty, tx, heat(m.values(i, j)));
    }
  return img;
}

PanelLayout export_panels(const Model<float>& model, const TransitionMatrix& m,
                          const SegSample& sample, const std::filesystem::path& out,
                          bool identity_cm, int scale) {
  const io::RawImage img = render_panels(model, m, sample, identity_cm, scale);
  if (!out.parent_path().empty()) std::filesystem::create_directories(out.parent_path());
  io::write_png(out, img);
  return panel_layout(model.arch.height, model.arch.width, scale);
}

}  // namespace coarseseg
