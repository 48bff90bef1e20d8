#include "coarseseg/eval.hpp"

#include <algorithm>

#include "coarseseg/error.hpp"
#include "coarseseg/loss.hpp"

namespace coarseseg {

void IouCounts::add(const LabelMap& pred, const LabelMap& gt) {
  require_same_shape(pred, gt, "miou");
  const int l = static_cast<int>(intersection.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = gt.data[i];
    if (g == kIgnore) continue;
    const auto p = pred.data[i];
    if (g >= l || (p >= l && p != kIgnore)) {
      throw ValidationError("miou: label outside [0, " + std::to_string(l - 1) + "]");
    }
    ++evaluated_pixels;
    if (p == g) {
      ++intersection[g];
      ++uni[g];
    } else {
      ++uni[g];
      if (p != kIgnore) ++uni[p];
    }
  }
}

std::vector<std::optional<double>> IouCounts::per_class() const {
  std::vector<std::optional<double>> out(intersection.size());
  for (std::size_t c = 0; c < out.size(); ++c) {
    if (uni[c] > 0) out[c] = static_cast<double>(intersection[c]) / static_cast<double>(uni[c]);
  }
  return out;
}

double IouCounts::miou() const {
  if (evaluated_pixels == 0) {
    throw ValidationError("miou: no evaluable pixels (ground truth entirely ignored)",
                          "E_EMPTY_REPORT");
  }
  double sum = 0.0;
  int n = 0;
  for (const auto& v : per_class())
    if (v) sum += *v, ++n;
  return n ? sum / n : 0.0;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : per_class_iou) per_class.push_back(v ? nlohmann::json(*v) : nlohmann::json());
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < per_image_miou.size(); ++i) {
    images.push_back({{"id", i < image_ids.size() ? image_ids[i] : std::to_string(i)},
                      {"miou", per_image_miou[i]}});
  }
  return {{"miou", miou},
          {"gt_ce", gt_ce},
          {"per_class_iou", per_class},
          {"per_image", images},
          {"dataset", dataset_id},
          {"checkpoint", checkpoint_id}};
}

EvalReport miou(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  IouCounts counts(num_classes);
  counts.add(pred, gt);
  EvalReport r;
  r.per_class_iou = counts.per_class();
  r.miou = counts.miou();
  r.per_image_miou = {r.miou};
  return r;
}

template <typename T>
LabelMap argmax_labels(const ProbMapT<T>& p) {
  LabelMap out(p.height * p.batch, p.width);
  for (Eigen::Index px = 0; px < p.values.cols(); ++px) {
    Eigen::Index best = 0;
    p.values.col(px).maxCoeff(&best);
    out.data[px] = static_cast<std::uint8_t>(best);
  }
  return out;
}

template LabelMap argmax_labels<float>(const ProbMapT<float>&);
template LabelMap argmax_labels<double>(const ProbMapT<double>&);

EvalReport evaluate(const Model<float>& model, const SegDataset& ds, const std::string& dataset_id,
                    const std::string& checkpoint_id, int batch_size) {
  if (ds.space.num_classes != model.arch.num_classes) {
    throw ValidationError("evaluate: dataset has " + std::to_string(ds.space.num_classes) +
                              " classes, checkpoint " + std::to_string(model.arch.num_classes),
                          "E_CLASS_MISMATCH");
  }
  if (ds.samples.empty()) throw ValidationError("evaluate: empty dataset", "E_EMPTY_REPORT");
  const int l = model.arch.num_classes;
  IouCounts total(l);
  EvalReport r;
  r.dataset_id = dataset_id;
  r.checkpoint_id = checkpoint_id;
  double ce_sum = 0.0;
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t end = std::min(ds.samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Image*> images;
    for (std::size_t i = start; i < end; ++i) {
      const Image& im = ds.samples[i].image;
      if (im.height != model.arch.height || im.width != model.arch.width ||
          im.channels != model.arch.in_channels) {
        throw ShapeError("evaluate: sample '" + ds.samples[i].id + "' does not match the architecture");
      }
      images.push_back(&im);
    }
    const auto input = make_input<float>(images);
    typename SegNet<float>::Tape tape;
    const Mat<float> logits = model.seg.forward(input, tape);
    const Mat<float> prob = softmax_columns(logits);
    const Eigen::Index hw = static_cast<Eigen::Index>(model.arch.height) * model.arch.width;
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = ds.samples[i];
      LabelMap pred(model.arch.height, model.arch.width);
      const Eigen::Index base = static_cast<Eigen::Index>(i - start) * hw;
      for (Eigen::Index px = 0; px < hw; ++px) {
        Eigen::Index best = 0;
        logits.col(base + px).maxCoeff(&best);
        pred.data[px] = static_cast<std::uint8_t>(best);
      }
      const CeValue ce = masked_ce<float>(prob.middleCols(base, hw), s.gt_label.data);
      ce_sum += ce.value;
      IouCounts one(l);
      one.add(pred, s.gt_label);
      total.add(pred, s.gt_label);
      r.image_ids.push_back(s.id);
      r.per_image_miou.push_back(one.evaluated_pixels ? one.miou() : 0.0);
    }
  }
  r.per_class_iou = total.per_class();
  r.miou = total.miou();
  r.gt_ce = ce_sum / static_cast<double>(ds.samples.size());
  return r;
}

}  // namespace coarseseg
