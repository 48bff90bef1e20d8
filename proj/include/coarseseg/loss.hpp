#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "coarseseg/grid.hpp"
#include "coarseseg/model.hpp"

namespace coarseseg {

inline constexpr double kLogClamp = 1e-12;

struct LossConfig {
  double lambda = 0.01;  // trace weight
  int warmup_epochs = 5;  // lambda is 0 for the first warmup_epochs epochs
  double w_obj = 1.0;
  double w_comp = 1.0;
  // Test hook: drop the trace term from the confusion-matrix gradient while
  // keeping it in the loss value. Used to check that grad_check notices.
  bool break_trace_gradient = false;

  void validate() const;
  /// lambda in effect during 1-based epoch `epoch`.
  double lambda_at(int epoch) const { return epoch <= warmup_epochs ? 0.0 : lambda; }

  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

/// One branch (objective or complementary), summed over its sources.
struct LossFragment {
  double ce = 0.0;
  double trace = 0.0;
  long ce_pixels = 0;
  long trace_pixels = 0;
};

struct LossBreakdown {
  double total = 0.0;
  double ce_mask = 0.0;  // plain CE against dense masks (strong / semi)
  double ce_obj = 0.0;
  double trace_obj = 0.0;
  double ce_comp = 0.0;
  double trace_comp = 0.0;
  double lambda = 0.0;
  long pixels_mask = 0, pixels_obj = 0, pixels_comp = 0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator*=(double s);
};

/// Reads columns [begin, begin + count) of a map; T = float or double.
template <typename T>
using ColsRef = Eigen::Ref<const Mat<T>>;
template <typename T>
using GradRef = Eigen::Ref<Mat<T>>;

struct CeValue {
  double value = 0.0;
  long count = 0;
};

/// Mean over non-kIgnore pixels of -log(max(pred[target], 1e-12)).
/// When dpred is given, adds scale * dCE/dpred to it.
template <typename T>
CeValue masked_ce(ColsRef<T> pred, std::span<const std::uint8_t> target,
                  GradRef<T>* dpred = nullptr, double scale = 1.0);

template <typename T>
CeValue masked_ce(const ProbMapT<T>& pred, const LabelMap& target);

/// Mean over masked pixels (all pixels when mask is empty) of tr(cm_p).
template <typename T>
CeValue trace_mean(ColsRef<T> cm, int classes, std::span<const std::uint8_t> mask = {},
                   GradRef<T>* dcm = nullptr, double scale = 1.0);

template <typename T>
double trace_mean(const ConfusionMapStackT<T>& cm, const Mask* mask = nullptr);

/// Gradient sinks for one image; all optional.
template <typename T>
struct ImageGrads {
  GradRef<T>* dp = nullptr;
  std::vector<GradRef<T>*> dcm;  // one per confusion stack, same order
};

/// sum_o [ masked_ce(cm_o * p, t_o) + lambda * trace_mean(cm_o) ].
/// cms.size() must equal targets.size().
template <typename T>
LossFragment loss_obj(ColsRef<T> p, int classes, std::span<const ColsRef<T>> cms,
                      std::span<const LabelMap* const> targets, double lambda,
                      ImageGrads<T>* grads = nullptr, double scale = 1.0,
                      bool break_trace_gradient = false);

/// sum_c [ masked_ce(M^T (cm_c * p), t_c) + lambda * trace_mean(cm_c) ].
template <typename T>
LossFragment loss_comp(ColsRef<T> p, int classes, std::span<const ColsRef<T>> cms,
                       const TransitionMatrix& m, std::span<const LabelMap* const> targets,
                       double lambda, ImageGrads<T>* grads = nullptr, double scale = 1.0,
                       bool break_trace_gradient = false);

/// Convenience overloads on the map types.
template <typename T>
LossFragment loss_obj(const ProbMapT<T>& p, std::span<const ConfusionMapStackT<T>> cms,
                      std::span<const CoarseMap> targets, double lambda);
template <typename T>
LossFragment loss_comp(const ProbMapT<T>& p, std::span<const ConfusionMapStackT<T>> cms,
                       const TransitionMatrix& m, std::span<const CoarseMap> targets,
                       double lambda);

/// total = w_obj (ce_obj + lambda trace_obj) + w_comp (ce_comp + lambda trace_comp).
LossBreakdown loss_final(const LossFragment& obj, const LossFragment& comp,
                         const LossConfig& cfg, double lambda);

/// Serializes the metric fields (loss_total, ce_obj, trace_obj, ce_comp,
/// trace_comp, lambda).
nlohmann::json to_json(const LossBreakdown& b);

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

template <typename T>
struct GradSlot {
  T* value = nullptr;
  const T* grad = nullptr;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Evaluates `compute` once to fill analytic gradients, then compares up to
/// `samples` randomly chosen slots (0: all) against central differences
/// (f(w + eps) - f(w - eps)) / (w_plus - w_minus), using the representable
/// step. Relative error = |a - fd| / max(|a|, |fd|, 1e-12). Throws
/// NumericError if the loss is non-finite.
template <typename T>
GradCheckResult grad_check(const std::function<double()>& loss,
                           const std::function<void()>& compute_gradient,
                           std::span<const GradSlot<T>> slots, double eps,
                           std::size_t samples, std::uint64_t seed);

enum class Dtype { float32, float64 };

struct ToyGradCheckOptions {
  Dtype dtype = Dtype::float64;
  int classes = 3;
  int batch = 2;
  int height = 4;
  int width = 4;
  double lambda = 0.01;
  double logit_scale = 0.5;  // standard deviation of the random input logits
  double eps = 1e-5;
  std::size_t samples = 0;  // 0: every input
  std::uint64_t seed = 0;
  bool break_trace_gradient = false;
};

/// Checks the analytic gradient of loss_final (both branches, uniform M)
/// with respect to its inputs, the segmentation logits and both branches'
/// confusion logits, on a random toy batch with partially ignored targets.
/// With Dtype::float32 the analytic gradient comes from the float kernels
/// and the central differences from the float64 loss at the same point.
GradCheckResult grad_check_toy(const ToyGradCheckOptions& opt);

}  // namespace coarseseg
