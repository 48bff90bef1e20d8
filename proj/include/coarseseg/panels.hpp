#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coarseseg/datasets.hpp"
#include "coarseseg/io.hpp"
#include "coarseseg/model.hpp"

namespace coarseseg {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kTruePositive{255, 255, 255};
inline constexpr Rgb kFalseNegative{255, 220, 0};
inline constexpr Rgb kFalsePositive{220, 0, 0};
inline constexpr Rgb kTrueNegative{0, 0, 0};

/// Error colour of one pixel; class 0 is background. A foreground pixel
/// predicted as the wrong foreground class counts as a false positive.
Rgb error_color(std::uint8_t pred, std::uint8_t gt);

/// Tile order of the panel grid.
const std::vector<std::string>& panel_names();

struct PanelLayout {
  int columns = 4;
  int rows = 0;
  int tile_height = 0;
  int tile_width = 0;
  int gap = 2;
  int width = 0;   // whole image
  int height = 0;
};

PanelLayout panel_layout(int image_height, int image_width, int scale = 4);

/// Renders the diagnostic grid for one sample. CM panels use the first
/// positive and first negative head of the model; with identity_cm (or when
/// the model has no such head) identity matrices stand in.
io::RawImage render_panels(const Model<float>& model, const TransitionMatrix& m,
                           const SegSample& sample, bool identity_cm = false, int scale = 4);

/// Writes render_panels(...) as a PNG and returns its layout.
PanelLayout export_panels(const Model<float>& model, const TransitionMatrix& m,
                          const SegSample& sample, const std::filesystem::path& out,
                          bool identity_cm = false, int scale = 4);

}  // namespace coarseseg
