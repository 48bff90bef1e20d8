#include "coarseseg/noise_synth.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <string>

namespace coarseseg::noise {

void NoiseLevel::validate() const {
  if (level < 1 || level > 5) {
    throw ValidationError("noise level must be in [1,5], got " + std::to_string(level));
  }
  if (dilate_radius < 0 || erode_radius < 0 || fracture_count < 0 ||
      fracture_width < 0 || neg_erode_radius < 0 || neg_fracture_count < 0) {
    throw ValidationError("noise level parameters must be non-negative");
  }
  if (dilate_radius > 0 && erode_radius > 0) {
    throw ValidationError("noise level: dilate and erode are mutually exclusive");
  }
}

NoiseLevel NoiseLevel::level_schedule(int level) {
  NoiseLevel l;
  l.level = level;
  l.fracture_width = 2;
  switch (level) {
    case 1:
      l.erode_radius = 1;
      l.fracture_count = 4;
      l.neg_erode_radius = 2;
      l.neg_band_radius = 4;
      l.neg_fracture_count = 4;
      break;
    case 2:
      l.dilate_radius = 1;
      l.fracture_count = 3;
      l.neg_band_radius = 4;
      l.neg_fracture_count = 3;
      break;
    case 3:
      l.dilate_radius = 1;
      l.fracture_count = 2;
      l.neg_band_radius = 6;
      l.neg_fracture_count = 2;
      break;
    case 4:
      l.dilate_radius = 1;
      l.fracture_count = 1;
      l.neg_band_radius = 8;
      l.neg_fracture_count = 1;
      break;
    case 5:
      l.dilate_radius = 1;
      break;
    default:
      throw ValidationError("noise level must be in [1,5], got " + std::to_string(level));
  }
  return l;
}

namespace {

// Sliding max (or min) of width 2r+1 along rows then columns. Pixels outside
// the map are background.
Mask separable_filter(const Mask& in, int r, bool take_max) {
  const int h = in.height, w = in.width;
  constexpr std::uint8_t outside = 0;
  auto pick = [&](std::uint8_t a, std::uint8_t b) {
    return take_max ? std::max(a, b) : std::min(a, b);
  };
  Mask rows(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::uint8_t acc = take_max ? 0 : 1;
      for (int dx = -r; dx <= r; ++dx) {
        const int xx = x + dx;
        const std::uint8_t v = (xx < 0 || xx >= w) ? outside : (in.at(y, xx) ? 1 : 0);
        acc = pick(acc, v);
      }
      rows.at(y, x) = acc;
    }
  }
  Mask out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::uint8_t acc = take_max ? 0 : 1;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        const std::uint8_t v = (yy < 0 || yy >= h) ? outside : rows.at(yy, x);
        acc = pick(acc, v);
      }
      out.at(y, x) = acc;
    }
  }
  return out;
}

Mask binarized(const Mask& m) {
  Mask out = m;
  for (auto& v : out.data) v = v ? 1 : 0;
  return out;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void apply_cuts(Mask& m, const std::vector<Rect>& cuts) {
  for (const Rect& r : cuts) {
    for (int y = std::max(0, r.y0); y < std::min(m.height, r.y1); ++y)
      for (int x = std::max(0, r.x0); x < std::min(m.width, r.x1); ++x)
        m.at(y, x) = 0;
  }
}

}  // namespace

Mask thin(const Mask& mask, int radius) {
  if (radius < 0) throw ValidationError("thin: radius must be >= 0");
  if (radius == 0) return mask;
  return separable_filter(mask, radius, false);
}

Mask thicken(const Mask& mask, int radius) {
  if (radius < 0) throw ValidationError("thicken: radius must be >= 0");
  if (radius == 0) return mask;
  return separable_filter(mask, radius, true);
}

BoundingBox bounding_box(const Mask& mask) {
  BoundingBox b{mask.height, mask.width, 0, 0};
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) {
        b.y0 = std::min(b.y0, y);
        b.x0 = std::min(b.x0, x);
        b.y1 = std::max(b.y1, y + 1);
        b.x1 = std::max(b.x1, x + 1);
      }
  if (b.y0 >= b.y1) return {};
  return b;
}

std::vector<Rect> fracture_cuts(const BoundingBox& box, int count, int width,
                                std::uint64_t seed) {
  if (count < 0 || width < 0) throw ValidationError("fracture: count and width must be >= 0");
  std::vector<Rect> cuts;
  if (box.empty() || width == 0) return cuts;
  for (int i = 0; i < count; ++i) {
    // One generator per cut keeps prefixes stable across counts.
    std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<int> ys(box.y0, box.y1 - 1), xs(box.x0, box.x1 - 1);
    const int cy = ys(rng), cx = xs(rng);
    const bool horizontal = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    const int extent = horizontal ? box.x1 - box.x0 : box.y1 - box.y0;
    const int len = std::uniform_int_distribution<int>(1, std::max(1, extent / 2))(rng);
    cuts.push_back(horizontal ? Rect{cy, cx, cy + width, cx + len}
                              : Rect{cy, cx, cy + len, cx + width});
  }
  return cuts;
}

Mask fracture(const Mask& mask, int count, int width, std::uint64_t seed) {
  if (count < 0 || width < 0) throw ValidationError("fracture: count and width must be >= 0");
  Mask out = binarized(mask);
  const auto available = static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(count), count_foreground(out)));
  apply_cuts(out, fracture_cuts(bounding_box(out), available, width, seed));
  return out;
}

Mask foreground_of(const LabelMap& labels) {
  Mask m(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i)
    m.data[i] = labels.data[i] != 0 && labels.data[i] != kIgnore;
  return m;
}

Mask class_mask(const LabelMap& labels, std::uint8_t cls) {
  Mask m(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels.data[i] == cls;
  return m;
}

CoarseMap synth_positive_coarse(const Mask& gt, const NoiseLevel& lvl, std::uint64_t seed,
                                std::uint8_t object_class, const std::string& source) {
  lvl.validate();
  if (object_class == 0 || object_class == kIgnore) {
    throw ValidationError("positive coarse: object class must be a foreground class");
  }
  const Mask base = binarized(gt);
  Mask marked = lvl.erode_radius > 0 ? thin(base, lvl.erode_radius)
                                     : thicken(base, lvl.dilate_radius);
  // Cuts come from the ground-truth box so the same seed gives nested cut
  // sets at every level.
  const auto available = static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(lvl.fracture_count), count_foreground(base)));
  apply_cuts(marked, fracture_cuts(bounding_box(base), available, lvl.fracture_width, seed));

  CoarseMap out{source, CoarseKind::positive, LabelMap(gt.height, gt.width, 0)};
  for (std::size_t i = 0; i < marked.size(); ++i)
    if (marked.data[i]) out.labels.data[i] = object_class;
  return out;
}

CoarseMap synth_negative_coarse(const LabelMap& gt, std::uint8_t target_class, int num_classes,
                                const NoiseLevel& lvl, std::uint64_t seed,
                                const std::string& source) {
  lvl.validate();
  if (target_class >= num_classes) {
    throw ValidationError("negative coarse: target class " + std::to_string(target_class) +
                          " out of range for " + std::to_string(num_classes) + " classes");
  }
  const Mask target = class_mask(gt, target_class);
  Mask complement(gt.height, gt.width);
  for (std::size_t i = 0; i < gt.size(); ++i)
    complement.data[i] = gt.data[i] != target_class && gt.data[i] != kIgnore;

  Mask marked = thin(complement, lvl.neg_erode_radius);
  if (lvl.neg_band_radius >= 0) {
    const Mask band = thicken(target, lvl.neg_band_radius);
    for (std::size_t i = 0; i < marked.size(); ++i) marked.data[i] &= band.data[i];
  }
  // Fixed box around the target keeps cut sets nested across levels.
  BoundingBox box = bounding_box(thicken(target, 8));
  if (box.empty()) box = {0, 0, gt.height, gt.width};
  const auto available = static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(lvl.neg_fracture_count), count_foreground(complement)));
  apply_cuts(marked, fracture_cuts(box, available, lvl.fracture_width, seed));

  CoarseMap out{source, CoarseKind::negative, LabelMap(gt.height, gt.width, kIgnore)};
  for (std::size_t i = 0; i < marked.size(); ++i)
    if (marked.data[i]) out.labels.data[i] = target_class;
  return out;
}

double coverage_ratio(const CoarseMap& coarse, const Mask& gt) {
  require_same_shape(coarse.labels, gt, "coverage_ratio");
  const bool positive = coarse.kind == CoarseKind::positive;
  std::size_t region = 0, hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool in_region = positive ? gt.data[i] != 0 : gt.data[i] == 0;
    if (!in_region) continue;
    ++region;
    const auto v = coarse.labels.data[i];
    const bool marked = positive ? (v != 0 && v != kIgnore) : v != kIgnore;
    hit += marked;
  }
  if (region == 0) {
    throw ValidationError("coverage ratio undefined: relevant region is empty",
                          "E_UNDEFINED_RATIO");
  }
  return static_cast<double>(hit) / static_cast<double>(region);
}

namespace {

std::uint8_t dominant_foreground(const LabelMap& gt) {
  std::map<std::uint8_t, std::size_t> counts;
  for (auto v : gt.data)
    if (v != 0 && v != kIgnore) ++counts[v];
  std::uint8_t best = 1;
  std::size_t best_n = 0;
  for (auto [cls, n] : counts)
    if (n > best_n) best = cls, best_n = n;
  return best;
}

}  // namespace

void synthesize_dataset(SegDataset& ds, int level, std::uint64_t seed, int target_class) {
  const NoiseLevel lvl = NoiseLevel::level_schedule(level);
  const std::string source = "synthL" + std::to_string(level);
  if (target_class >= ds.space.num_classes) {
    throw ValidationError("target class " + std::to_string(target_class) + " out of range");
  }
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    SegSample& s = ds.samples[i];
    const std::uint8_t object = dominant_foreground(s.gt_label);
    const auto target =
        static_cast<std::uint8_t>(target_class >= 0 ? target_class : object);
    const std::uint64_t sample_seed = mix(seed, i);
    std::erase_if(s.pos_coarse, [&](const CoarseMap& c) { return c.source == source; });
    std::erase_if(s.neg_coarse, [&](const CoarseMap& c) { return c.source == source; });
    s.pos_coarse.push_back(synth_positive_coarse(foreground_of(s.gt_label), lvl,
                                                 mix(sample_seed, 1), object, source));
    s.neg_coarse.push_back(synth_negative_coarse(s.gt_label, target, ds.space.num_classes,
                                                 lvl, mix(sample_seed, 2), source));
  }
}

}  // namespace coarseseg::noise
