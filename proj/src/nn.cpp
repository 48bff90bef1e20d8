#include "coarseseg/nn.hpp"

#include <cmath>
#include <limits>

#include "coarseseg/error.hpp"

namespace coarseseg::nn {

template <typename T>
Conv2d<T>::Conv2d(std::string name, int in_channels, int out_channels, int kernel)
    : in_(in_channels), out_(out_channels), kernel_(kernel) {
  if (kernel != 1 && kernel != 3) throw ValidationError("conv: kernel must be 1 or 3");
  weight.name = name + ".weight";
  bias.name = name + ".bias";
  weight.value = Mat<T>::Zero(out_, kernel_ * kernel_ * in_);
  bias.value = Mat<T>::Zero(out_, 1);
  weight.zero_grad();
  bias.zero_grad();
}

template <typename T>
void Conv2d<T>::init_he(std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(kernel_ * kernel_ * in_);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index i = 0; i < weight.value.size(); ++i)
    weight.value.data()[i] = static_cast<T>(dist(rng));
  bias.value.setZero();
}

template <typename T>
Feature<T> Conv2d<T>::forward(const Feature<T>& in, Cache& cache) const {
  if (in.x.rows() != in_) {
    throw ShapeError("conv " + weight.name + ": expected " + std::to_string(in_) +
                     " channels, got " + std::to_string(in.x.rows()));
  }
  const Spatial d = in.dims;
  cache.dims = d;
  if (kernel_ == 1) {
    cache.cols = in.x;
  } else {
    const Eigen::Index c = in_;
    cache.cols.setZero(9 * c, d.pixels());
    for (int b = 0; b < d.n; ++b) {
      for (int y = 0; y < d.h; ++y) {
        for (int x = 0; x < d.w; ++x) {
          const Eigen::Index p = (static_cast<Eigen::Index>(b) * d.h + y) * d.w + x;
          T* dst = cache.cols.col(p).data();
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= d.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= d.w) continue;
              const Eigen::Index q = (static_cast<Eigen::Index>(b) * d.h + yy) * d.w + xx;
              const T* src = in.x.col(q).data();
              std::copy(src, src + c, dst + (ky * 3 + kx) * c);
            }
          }
        }
      }
    }
  }
  Feature<T> out;
  out.dims = d;
  out.x.noalias() = weight.value * cache.cols;
  out.x.colwise() += bias.value.col(0);
  return out;
}

template <typename T>
Mat<T> Conv2d<T>::backward(const Cache& cache, const Mat<T>& dy) {
  weight.grad.noalias() += dy * cache.cols.transpose();
  bias.grad.col(0) += dy.rowwise().sum();
  Mat<T> dcols;
  dcols.noalias() = weight.value.transpose() * dy;
  if (kernel_ == 1) return dcols;

  const Spatial d = cache.dims;
  const Eigen::Index c = in_;
  Mat<T> dx = Mat<T>::Zero(c, d.pixels());
  for (int b = 0; b < d.n; ++b) {
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        const Eigen::Index p = (static_cast<Eigen::Index>(b) * d.h + y) * d.w + x;
        const T* src = dcols.col(p).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int yy = y + ky - 1;
          if (yy < 0 || yy >= d.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int xx = x + kx - 1;
            if (xx < 0 || xx >= d.w) continue;
            const Eigen::Index q = (static_cast<Eigen::Index>(b) * d.h + yy) * d.w + xx;
            T* dst = dx.col(q).data();
            const T* s = src + (ky * 3 + kx) * c;
            for (Eigen::Index i = 0; i < c; ++i) dst[i] += s[i];
          }
        }
      }
    }
  }
  return dx;
}

template <typename T>
void relu_inplace(Mat<T>& x) {
  x = x.cwiseMax(T(0));
}

template <typename T>
Mat<T> relu_backward(const Mat<T>& out, const Mat<T>& dy) {
  return (out.array() > T(0)).select(dy, T(0));
}

template <typename T>
Feature<T> MaxPool2<T>::forward(const Feature<T>& in) {
  in_dims = in.dims;
  const Spatial d = in.dims;
  Feature<T> out;
  out.dims = {d.n, d.h / 2, d.w / 2};
  if (out.dims.h == 0 || out.dims.w == 0) {
    throw ShapeError("maxpool: input too small (" + std::to_string(d.h) + "x" +
                     std::to_string(d.w) + ")");
  }
  const Eigen::Index c = in.x.rows();
  out.x.resize(c, out.dims.pixels());
  argmax.resize(static_cast<std::size_t>(c * out.dims.pixels()));
  for (int b = 0; b < d.n; ++b) {
    for (int y = 0; y < out.dims.h; ++y) {
      for (int x = 0; x < out.dims.w; ++x) {
        const Eigen::Index po = (static_cast<Eigen::Index>(b) * out.dims.h + y) * out.dims.w + x;
        for (Eigen::Index ch = 0; ch < c; ++ch) {
          T best = -std::numeric_limits<T>::infinity();
          Eigen::Index best_idx = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const Eigen::Index pi =
                  (static_cast<Eigen::Index>(b) * d.h + 2 * y + dy) * d.w + 2 * x + dx;
              const T v = in.x(ch, pi);
              if (v > best) best = v, best_idx = pi * c + ch;
            }
          }
          out.x(ch, po) = best;
          argmax[static_cast<std::size_t>(po * c + ch)] = best_idx;
        }
      }
    }
  }
  return out;
}

template <typename T>
Mat<T> MaxPool2<T>::backward(const Mat<T>& dy, Eigen::Index channels) const {
  Mat<T> dx = Mat<T>::Zero(channels, in_dims.pixels());
  T* dst = dx.data();
  const T* src = dy.data();
  for (std::size_t i = 0; i < argmax.size(); ++i) dst[argmax[i]] += src[i];
  return dx;
}

namespace {

inline int nearest_src(int dst, int dst_len, int src_len) {
  return std::min(src_len - 1, static_cast<int>(static_cast<long>(dst) * src_len / dst_len));
}

}  // namespace

template <typename T>
Feature<T> upsample_nearest(const Feature<T>& in, int target_h, int target_w) {
  const Spatial d = in.dims;
  Feature<T> out;
  out.dims = {d.n, target_h, target_w};
  out.x.resize(in.x.rows(), out.dims.pixels());
  for (int b = 0; b < d.n; ++b)
    for (int y = 0; y < target_h; ++y)
      for (int x = 0; x < target_w; ++x) {
        const Eigen::Index po = (static_cast<Eigen::Index>(b) * target_h + y) * target_w + x;
        const Eigen::Index pi = (static_cast<Eigen::Index>(b) * d.h + nearest_src(y, target_h, d.h)) * d.w +
                                nearest_src(x, target_w, d.w);
        out.x.col(po) = in.x.col(pi);
      }
  return out;
}

template <typename T>
Mat<T> upsample_nearest_backward(const Mat<T>& dy, const Spatial& d, int target_h, int target_w) {
  Mat<T> dx = Mat<T>::Zero(dy.rows(), d.pixels());
  for (int b = 0; b < d.n; ++b)
    for (int y = 0; y < target_h; ++y)
      for (int x = 0; x < target_w; ++x) {
        const Eigen::Index po = (static_cast<Eigen::Index>(b) * target_h + y) * target_w + x;
        const Eigen::Index pi = (static_cast<Eigen::Index>(b) * d.h + nearest_src(y, target_h, d.h)) * d.w +
                                nearest_src(x, target_w, d.w);
        dx.col(pi) += dy.col(po);
      }
  return dx;
}

template <typename T>
Feature<T> concat_channels(const Feature<T>& a, const Feature<T>& b) {
  if (!(a.dims == b.dims)) throw ShapeError("concat: spatial dims differ");
  Feature<T> out;
  out.dims = a.dims;
  out.x.resize(a.x.rows() + b.x.rows(), a.x.cols());
  out.x.topRows(a.x.rows()) = a.x;
  out.x.bottomRows(b.x.rows()) = b.x;
  return out;
}

#define COARSESEG_NN_INSTANTIATE(T)                                                     \
  template class Conv2d<T>;                                                             \
  template struct MaxPool2<T>;                                                          \
  template void relu_inplace<T>(Mat<T>&);                                               \
  template Mat<T> relu_backward<T>(const Mat<T>&, const Mat<T>&);                       \
  template Feature<T> upsample_nearest<T>(const Feature<T>&, int, int);                 \
  template Mat<T> upsample_nearest_backward<T>(const Mat<T>&, const Spatial&, int, int); \
  template Feature<T> concat_channels<T>(const Feature<T>&, const Feature<T>&);

COARSESEG_NN_INSTANTIATE(float)
COARSESEG_NN_INSTANTIATE(double)

#undef COARSESEG_NN_INSTANTIATE

}  // namespace coarseseg::nn
