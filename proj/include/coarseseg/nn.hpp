#pragma once

// Minimal convolutional building blocks with hand-written backward passes.
//
// Feature maps are stored as a channels x pixels matrix where the pixel
// (column) index of batch item b at (y, x) is (b * h + y) * w + x. A 3x3
// convolution is then one GEMM against an im2col matrix whose rows are
// ordered (ky, kx, channel).

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace coarseseg::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

struct Spatial {
  int n = 0, h = 0, w = 0;
  Eigen::Index pixels() const { return static_cast<Eigen::Index>(n) * h * w; }
  bool operator==(const Spatial&) const = default;
};

template <typename T>
struct Feature {
  Spatial dims;
  Mat<T> x;  // channels x pixels
};

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Conv2d {
 public:
  struct Cache {
    Spatial dims;
    Mat<T> cols;  // im2col of the input
  };

  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel);

  /// He-normal weights, zero bias.
  void init_he(std::mt19937_64& rng);

  Feature<T> forward(const Feature<T>& in, Cache& cache) const;
  /// Accumulates weight/bias gradients and returns d(input).
  Mat<T> backward(const Cache& cache, const Mat<T>& dy);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Param<T> weight;  // out x (kernel*kernel*in)
  Param<T> bias;    // out x 1

 private:
  int in_ = 0, out_ = 0, kernel_ = 1;
};

/// In-place ReLU.
template <typename T>
void relu_inplace(Mat<T>& x);

/// Masks dy by the positive part of a ReLU output.
template <typename T>
Mat<T> relu_backward(const Mat<T>& out, const Mat<T>& dy);

/// 2x2 max pooling with floor semantics.
template <typename T>
struct MaxPool2 {
  std::vector<Eigen::Index> argmax;  // per output element, flat input index
  Spatial in_dims;

  Feature<T> forward(const Feature<T>& in);
  Mat<T> backward(const Mat<T>& dy, Eigen::Index channels) const;
};

/// Nearest-neighbour resize from `in` dims to `target` (h, w); batch kept.
template <typename T>
Feature<T> upsample_nearest(const Feature<T>& in, int target_h, int target_w);
template <typename T>
Mat<T> upsample_nearest_backward(const Mat<T>& dy, const Spatial& in_dims,
                                 int target_h, int target_w);

/// Stacks feature channels; all inputs share dims.
template <typename T>
Feature<T> concat_channels(const Feature<T>& a, const Feature<T>& b);

}  // namespace coarseseg::nn
