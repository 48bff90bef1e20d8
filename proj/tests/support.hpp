#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "coarseseg/datasets.hpp"
#include "coarseseg/noise_synth.hpp"
#include "coarseseg/train.hpp"

namespace testing {

using namespace coarseseg;

// Bright ellipse on a dim noisy background; gt is the ellipse.
inline SegSample blob_sample(int h, int w, std::mt19937_64& rng, const std::string& id) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cy = h * (0.3 + 0.4 * u(rng)), cx = w * (0.3 + 0.4 * u(rng));
  const double ry = h * (0.15 + 0.15 * u(rng)), rx = w * (0.15 + 0.15 * u(rng));
  SegSample s;
  s.id = id;
  s.image = Image(h, w, 1);
  s.gt_label = LabelMap(h, w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d = std::pow((y - cy) / ry, 2) + std::pow((x - cx) / rx, 2);
      const bool fg = d <= 1.0;
      s.gt_label.at(y, x) = fg ? 1 : 0;
      const double v = fg ? 0.7 + 0.3 * u(rng) : 0.25 * u(rng);
      s.image.data[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(std::lround(v * 255));
    }
  return s;
}

inline SegDataset blob_dataset(int n, std::uint64_t seed, int h = 16, int w = 16,
                               const std::string& prefix = "toy") {
  SegDataset ds;
  ds.space = LabelSpace::binary();
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) ds.samples.push_back(blob_sample(h, w, rng, prefix + std::to_string(i)));
  return ds;
}

inline SegDataset noisy_blobs(int n, std::uint64_t seed, int level = 2) {
  SegDataset ds = blob_dataset(n, seed);
  noise::synthesize_dataset(ds, level, seed);
  return ds;
}

inline TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.loss.warmup_epochs = 0;
  c.arch.seg_base_channels = 4;
  c.arch.ann_channels = 4;
  return c;
}

// Fresh scratch directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("coarseseg_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

}  // namespace testing
