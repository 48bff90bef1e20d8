#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "coarseseg/grid.hpp"

namespace coarseseg {

struct LabelSpace {
  int num_classes = 0;
  std::vector<std::string> class_names;

  /// Throws ValidationError unless L >= 2, names has length L and are unique.
  void validate() const;

  static LabelSpace binary();
  /// Background plus the ten digit classes; digit d maps to class d + 1.
  static LabelSpace mnist_multiclass();

  bool operator==(const LabelSpace&) const = default;
};

/// 8-bit image, interleaved channels, row-major. Intensities are value/255.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int h, int w, int c)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, 0) {}

  float intensity(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c] /
           255.0f;
  }

  bool operator==(const Image&) const = default;
};

enum class CoarseKind { positive, negative };

/// One annotation source for one image. For negative maps a value c at a
/// pixel means "this pixel is not class c"; kIgnore means no statement.
struct CoarseMap {
  std::string source;
  CoarseKind kind = CoarseKind::positive;
  LabelMap labels;

  bool operator==(const CoarseMap&) const = default;
};

struct SegSample {
  std::string id;
  Image image;
  LabelMap gt_label;
  std::vector<CoarseMap> pos_coarse;
  std::vector<CoarseMap> neg_coarse;

  bool has_coarse() const { return !pos_coarse.empty() || !neg_coarse.empty(); }
  const CoarseMap* find_pos(const std::string& source) const;
  const CoarseMap* find_neg(const std::string& source) const;

  bool operator==(const SegSample&) const = default;
};

enum class SplitTag { train, val, test };

std::string to_string(SplitTag tag);
SplitTag split_tag_from_string(const std::string& s);

struct SegDataset {
  LabelSpace space;
  std::vector<SegSample> samples;
  SplitTag split_tag = SplitTag::train;

  /// Checks ids are unique, shapes agree and labels fit the label space.
  /// Error messages name the offending sample.
  void validate() const;

  /// Sorted union of positive (resp. negative) source names.
  std::vector<std::string> pos_sources() const;
  std::vector<std::string> neg_sources() const;

  bool operator==(const SegDataset&) const = default;
};

// ---------------------------------------------------------------------------
// MNIST-derived datasets

struct RawDigit {
  Image image;  // 28x28 grayscale
  int digit = 0;
};

enum class MnistMode { binary, multiclass };

MnistMode mnist_mode_from_string(const std::string& s);

/// Reads digits from either a CSV file (784 pixel values then the digit per
/// row; gzip-compressed if the name ends in .gz) or a directory holding the
/// IDX files train-images-idx3-ubyte / train-labels-idx1-ubyte.
std::vector<RawDigit> read_mnist(const std::filesystem::path& path,
                                 std::size_t offset = 0,
                                 std::size_t limit = SIZE_MAX);

/// Ground truth is intensity > threshold (strict). Binary mode labels
/// foreground 1; multiclass mode labels foreground digit + 1.
SegDataset build_mnist_seg(std::span<const RawDigit> raw, MnistMode mode,
                           float threshold = 0.5f,
                           const std::string& id_prefix = "mnist");

// ---------------------------------------------------------------------------
// Persistence

inline constexpr int kManifestVersion = 1;

struct ManifestSummary {
  std::filesystem::path dir;
  std::size_t num_samples = 0;
  int num_classes = 0;
  std::vector<std::string> pos_sources;
  std::vector<std::string> neg_sources;
};

/// Writes the directory layout (manifest.json, images/, labels/,
/// coarse_pos/<source>/, coarse_neg/<source>/). Each file is written to a
/// temporary name and renamed into place.
ManifestSummary save_dataset(const SegDataset& ds,
                             const std::filesystem::path& dir);

SegDataset load_dataset(const std::filesystem::path& dir);

/// Partitions ds into len(fractions) datasets. Sizes are the rounded
/// cumulative fractions; assignment is a seeded shuffle of the samples.
std::vector<SegDataset> split(const SegDataset& ds,
                              std::span<const double> fractions,
                              std::uint64_t seed);

}  // namespace coarseseg
