#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coarseseg/datasets.hpp"
#include "coarseseg/grid.hpp"
#include "coarseseg/model.hpp"

namespace coarseseg {

/// Intersection and union pixel counts per class, accumulated over any
/// number of (prediction, ground truth) pairs. Ground-truth kIgnore pixels
/// are skipped.
struct IouCounts {
  std::vector<long> intersection;
  std::vector<long> uni;
  long evaluated_pixels = 0;

  explicit IouCounts(int num_classes = 0)
      : intersection(num_classes, 0), uni(num_classes, 0) {}

  void add(const LabelMap& pred, const LabelMap& gt);
  /// IoU per class; nullopt for classes absent from both maps.
  std::vector<std::optional<double>> per_class() const;
  /// Mean over present classes. Throws ValidationError ("E_EMPTY_REPORT")
  /// when nothing was evaluated.
  double miou() const;
};

struct EvalReport {
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  double gt_ce = 0.0;  // mean cross-entropy of the prediction against gt
  std::vector<double> per_image_miou;
  std::vector<std::string> image_ids;
  std::string dataset_id;
  std::string checkpoint_id;

  nlohmann::json to_json() const;
};

/// Single-image fragment: per-class IoU and mIoU of pred against gt.
EvalReport miou(const LabelMap& pred, const LabelMap& gt, int num_classes);

/// Per-pixel argmax of a probability map (batch 1).
template <typename T>
LabelMap argmax_labels(const ProbMapT<T>& p);

/// Argmax of the segmentation network on every sample; dataset-level mIoU
/// pools the counts of all images.
EvalReport evaluate(const Model<float>& model, const SegDataset& ds,
                    const std::string& dataset_id = {}, const std::string& checkpoint_id = {},
                    int batch_size = 64);

}  // namespace coarseseg
