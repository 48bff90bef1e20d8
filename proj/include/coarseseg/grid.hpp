#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "coarseseg/error.hpp"

namespace coarseseg {

/// Label value meaning "no annotation here" in label and coarse maps.
inline constexpr std::uint8_t kIgnore = 255;

/// Row-major 2-D array, indexed (y, x).
template <typename V>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<V> data;

  Grid() = default;
  Grid(int h, int w, V fill = V{})
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  V& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  const V& at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }

  bool same_shape(const Grid& o) const {
    return height == o.height && width == o.width;
  }

  bool operator==(const Grid&) const = default;
};

/// Class indices in [0, L-1] or kIgnore.
using LabelMap = Grid<std::uint8_t>;

/// Binary foreground mask; 1 = foreground, 0 = background.
using Mask = Grid<std::uint8_t>;

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(what) + ": shape mismatch (" +
                     std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
  }
}

inline std::size_t count_foreground(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += (v != 0);
  return n;
}

}  // namespace coarseseg
