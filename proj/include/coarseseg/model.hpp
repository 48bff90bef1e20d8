#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "coarseseg/datasets.hpp"
#include "coarseseg/nn.hpp"

namespace coarseseg {

using nn::Mat;

// ---------------------------------------------------------------------------
// Per-pixel distributions

/// Per-pixel probability vectors. values is classes x pixels, pixel index
/// (b * height + y) * width + x.
template <typename T>
struct ProbMapT {
  int batch = 1, height = 0, width = 0, classes = 0;
  Mat<T> values;

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(batch) * height * width; }
  T at(Eigen::Index pixel, int cls) const { return values(cls, pixel); }
};

/// Per-pixel L x L matrices, entry (i, j) = p(noisy label i | true label j).
/// Stored as (L*L) x pixels with row index j * L + i, so every pixel holds
/// its matrix in column-major order and each column j is contiguous.
template <typename T>
struct ConfusionMapStackT {
  int batch = 1, height = 0, width = 0, classes = 0;
  Mat<T> values;

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(batch) * height * width; }
  T at(Eigen::Index pixel, int i, int j) const { return values(j * classes + i, pixel); }
  T& at(Eigen::Index pixel, int i, int j) { return values(j * classes + i, pixel); }
};

using ProbMap = ProbMapT<double>;
using ConfusionMapStack = ConfusionMapStackT<double>;

/// Global complementary-label transition matrix; entry (i, j) =
/// p(complementary label j | intermediate label i). Zero diagonal, rows sum
/// to one.
struct TransitionMatrix {
  Eigen::MatrixXd values;

  int classes() const { return static_cast<int>(values.rows()); }
};

enum class TransitionMode { uniform, custom };

/// uniform: off-diagonal 1/(L-1). custom: validates `values` (square, L x L,
/// zero diagonal within 1e-12, entries in [0,1], rows summing to 1 +- 1e-9).
TransitionMatrix build_transition_matrix(int num_classes, TransitionMode mode,
                                         const Eigen::MatrixXd& values = {});

/// out[:, p] = cm_p * p[:, p]
template <typename T>
ProbMapT<T> noisy_prediction(const ConfusionMapStackT<T>& cm, const ProbMapT<T>& p);

/// v[:, p] = M^T u[:, p]
template <typename T>
ProbMapT<T> complementary_prediction(const TransitionMatrix& m, const ProbMapT<T>& u);

/// Every entry in [-tol, 1 + tol] and each pixel vector sums to 1 +- tol.
template <typename T>
bool is_valid_prob_map(const ProbMapT<T>& p, double tol = 1e-5);

/// Every per-pixel column sums to 1 +- tol with entries in [-tol, 1 + tol].
template <typename T>
bool is_column_stochastic(const ConfusionMapStackT<T>& cm, double tol = 1e-5);

bool is_valid_transition(const TransitionMatrix& m, double tol = 1e-9);

// ---------------------------------------------------------------------------
// Softmax kernels shared by the networks and the loss tests

/// Softmax down each column of logits.
template <typename T>
Mat<T> softmax_columns(const Mat<T>& logits);

/// Given probabilities p and dL/dp, returns dL/dlogits.
template <typename T>
Mat<T> softmax_columns_backward(const Mat<T>& p, const Mat<T>& dp);

/// Softmax over i for every (pixel, column j) block of an (L*L) x pixels
/// logit matrix laid out as ConfusionMapStackT::values.
template <typename T>
Mat<T> cm_softmax(const Mat<T>& logits, int classes);

template <typename T>
Mat<T> cm_softmax_backward(const Mat<T>& cm, const Mat<T>& dcm, int classes);

// ---------------------------------------------------------------------------
// Architecture

/// Fixes every layer shape of both networks. Serialized into checkpoint
/// sidecars; resume refuses to continue when descriptors differ.
struct ArchDescriptor {
  int in_channels = 1;
  int height = 28;
  int width = 28;
  int num_classes = 2;
  int seg_base_channels = 8;
  int seg_depth = 2;       // downsampling stages in the segmentation net
  int ann_channels = 8;
  int ann_layers = 2;      // 3x3 conv layers in the shared annotation encoder
  double gamma = 4.0;      // diagonal logit bias of fresh confusion heads
  double head_init_std = 0.0;
  std::vector<std::string> pos_sources{"pos"};
  std::vector<std::string> neg_sources{"neg"};

  void validate() const;
  nlohmann::json to_json() const;
  static ArchDescriptor from_json(const nlohmann::json& j);
  /// Human-readable list of differing fields; empty when equal.
  std::string diff(const ArchDescriptor& other) const;

  bool operator==(const ArchDescriptor&) const = default;
};

template <typename T>
class SegNet {
 public:
  struct Tape;

  SegNet() = default;
  explicit SegNet(const ArchDescriptor& arch);

  void init(std::mt19937_64& rng);

  /// Returns class logits (L x pixels) and records what backward needs.
  Mat<T> forward(const nn::Feature<T>& input, Tape& tape) const;
  void backward(const Tape& tape, const Mat<T>& dlogits);

  std::vector<nn::Param<T>*> params();
  std::vector<const nn::Param<T>*> params() const;
  nn::Conv2d<T>& head() { return head_; }

 private:
  int depth_ = 0;
  std::vector<nn::Conv2d<T>> enc_;  // enc_[0] stem, then one per stage
  nn::Conv2d<T> stem2_;
  std::vector<nn::Conv2d<T>> dec_;  // dec_[d] merges stage d+1 into d
  nn::Conv2d<T> head_;
};

template <typename T>
struct SegNet<T>::Tape {
  std::vector<typename nn::Conv2d<T>::Cache> enc_cache, dec_cache;
  typename nn::Conv2d<T>::Cache stem2_cache, head_cache;
  std::vector<nn::Feature<T>> skips;           // post-ReLU stage outputs
  std::vector<nn::MaxPool2<T>> pools;
  std::vector<nn::Feature<T>> dec_out;         // post-ReLU decoder outputs
  nn::Feature<T> stem1_out;
};

enum class Branch { objective, complementary };

template <typename T>
class AnnotationNet {
 public:
  struct Tape;

  AnnotationNet() = default;
  explicit AnnotationNet(const ArchDescriptor& arch);

  void init(std::mt19937_64& rng);

  /// Confusion-matrix logits, one (L*L) x pixels matrix per head. Heads are
  /// ordered positive sources then negative sources.
  std::vector<Mat<T>> forward(const nn::Feature<T>& input, Tape& tape) const;
  /// dlogits may hold empty matrices for heads that received no gradient.
  void backward(const Tape& tape, const std::vector<Mat<T>>& dlogits);

  std::vector<nn::Param<T>*> params();
  std::vector<const nn::Param<T>*> params() const;
  int head_count() const { return static_cast<int>(heads_.size()); }

 private:
  ArchDescriptor arch_;
  std::vector<nn::Conv2d<T>> enc_;
  std::vector<nn::Conv2d<T>> heads_;
};

template <typename T>
struct AnnotationNet<T>::Tape {
  std::vector<typename nn::Conv2d<T>::Cache> enc_cache;
  std::vector<nn::Feature<T>> enc_out;
  std::vector<typename nn::Conv2d<T>::Cache> head_cache;
};

/// Both networks (segmentation theta, annotation phi) plus the descriptor
/// and seed that produced them.
template <typename T>
struct Model {
  ArchDescriptor arch;
  std::uint64_t seed = 0;
  SegNet<T> seg;
  AnnotationNet<T> ann;

  Model() = default;
  Model(const ArchDescriptor& a, std::uint64_t s);

  /// All parameters, segmentation first. Order is stable.
  std::vector<nn::Param<T>*> params();
  std::vector<const nn::Param<T>*> params() const;
  void zero_grad();
  std::size_t parameter_count() const;

  int head_index(Branch branch, int source_index = 0) const;
};

/// Packs images (all of the descriptor's shape) into a channels x pixels
/// feature, intensities in [0,1].
template <typename T>
nn::Feature<T> make_input(std::span<const Image* const> images);

template <typename T>
ProbMapT<T> seg_forward(const Model<T>& model, const Image& image);

template <typename T>
ConfusionMapStackT<T> cm_forward(const Model<T>& model, const Image& image, Branch branch,
                                 int source_index = 0);

namespace instrumentation {
/// Number of confusion-matrix / transition-matrix evaluations so far.
long cm_tm_calls();
void reset();
void count_cm_tm();
}  // namespace instrumentation

}  // namespace coarseseg
