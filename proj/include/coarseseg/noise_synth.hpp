#pragma once

#include <cstdint>
#include <vector>

#include "coarseseg/datasets.hpp"
#include "coarseseg/grid.hpp"

namespace coarseseg::noise {

/// Corruption parameters for one annotation-quality level. Level 1 is
/// scribble-like, level 5 is close to the ground truth. The schedule returned
/// by level() is nested: every quantity moves monotonically with the level so
/// coverage never decreases from k to k + 1.
struct NoiseLevel {
  int level = 1;
  // Positive annotation: erode by erode_radius, or dilate by dilate_radius
  // (at most one is non-zero), then cut fracture_count rectangles.
  int dilate_radius = 0;
  int erode_radius = 0;
  int fracture_count = 0;
  int fracture_width = 2;
  // Negative annotation: complement eroded by neg_erode_radius, restricted to
  // the band within neg_band_radius of the object (< 0 = no restriction),
  // then cut neg_fracture_count rectangles.
  int neg_erode_radius = 0;
  int neg_band_radius = -1;
  int neg_fracture_count = 0;

  void validate() const;

  static NoiseLevel level_schedule(int level);
};

/// Erosion with a (2r+1)x(2r+1) square. Pixels outside the map count as
/// background.
Mask thin(const Mask& mask, int radius);

/// Dilation with a (2r+1)x(2r+1) square.
Mask thicken(const Mask& mask, int radius);

struct Rect {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open [y0,y1) x [x0,x1)
  bool contains(int y, int x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

struct BoundingBox {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open; empty when y0 >= y1
  bool empty() const { return y0 >= y1 || x0 >= x1; }
};

BoundingBox bounding_box(const Mask& mask);

/// The axis-aligned cut rectangles drawn from (box, seed). Each cut has one
/// corner uniform inside the box, a random orientation, thickness `width`
/// and a length uniform in [1, half the box extent]. Prefixes are stable: the first k
/// cuts for count n >= k are the cuts for count k.
std::vector<Rect> fracture_cuts(const BoundingBox& box, int count, int width,
                                std::uint64_t seed);

/// Removes min(count, foreground pixels) cuts from the mask's foreground,
/// using the mask's own bounding box.
Mask fracture(const Mask& mask, int count, int width, std::uint64_t seed);

/// Dense noisy mask: object_class where marked, 0 elsewhere.
CoarseMap synth_positive_coarse(const Mask& gt, const NoiseLevel& lvl,
                                std::uint64_t seed, std::uint8_t object_class = 1,
                                const std::string& source = "synth");

/// Negative strokes carrying target_class ("not target_class here") drawn
/// inside the complement of gt == target_class; kIgnore elsewhere.
CoarseMap synth_negative_coarse(const LabelMap& gt, std::uint8_t target_class,
                                int num_classes, const NoiseLevel& lvl,
                                std::uint64_t seed,
                                const std::string& source = "synth");

/// Marked fraction of the relevant region: gt foreground for positive maps,
/// gt background for negative maps. Throws ValidationError
/// ("E_UNDEFINED_RATIO") when the region is empty.
double coverage_ratio(const CoarseMap& coarse, const Mask& gt);

/// Foreground indicator (label != 0 and != kIgnore).
Mask foreground_of(const LabelMap& labels);

/// Pixels equal to cls.
Mask class_mask(const LabelMap& labels, std::uint8_t cls);

/// Adds positive and negative maps named "synthL<level>" to every sample.
/// The negative target is target_class, or each sample's dominant
/// foreground class when target_class < 0. Per-sample seeds are derived
/// from (seed, sample index).
void synthesize_dataset(SegDataset& ds, int level, std::uint64_t seed,
                        int target_class = -1);

}  // namespace coarseseg::noise
