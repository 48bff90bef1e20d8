#include "coarseseg/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <array>
#include <optional>
#include <random>
#include <type_traits>

#include "coarseseg/error.hpp"

namespace coarseseg {

void LossConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("loss: lambda must be >= 0");
  if (warmup_epochs < 0) throw ValidationError("loss: warmup_epochs must be >= 0");
  if (!(w_obj >= 0.0) || !(w_comp >= 0.0)) {
    throw ValidationError("loss: branch weights must be non-negative");
  }
}

nlohmann::json LossConfig::to_json() const {
  return {{"lambda", lambda}, {"warmup_epochs", warmup_epochs}, {"branch_weights", {w_obj, w_comp}}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  if (j.contains("branch_weights")) {
    const auto& w = j.at("branch_weights");
    if (!w.is_array() || w.size() != 2) {
      throw ValidationError("loss.branch_weights must be [w_obj, w_comp]");
    }
    c.w_obj = w[0].get<double>();
    c.w_comp = w[1].get<double>();
  }
  c.validate();
  return c;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  total += o.total;
  ce_mask += o.ce_mask;
  ce_obj += o.ce_obj;
  trace_obj += o.trace_obj;
  ce_comp += o.ce_comp;
  trace_comp += o.trace_comp;
  pixels_mask += o.pixels_mask;
  pixels_obj += o.pixels_obj;
  pixels_comp += o.pixels_comp;
  return *this;
}

LossBreakdown& LossBreakdown::operator*=(double s) {
  total *= s;
  ce_mask *= s;
  ce_obj *= s;
  trace_obj *= s;
  ce_comp *= s;
  trace_comp *= s;
  return *this;
}

template <typename T>
CeValue masked_ce(ColsRef<T> pred, std::span<const std::uint8_t> target, GradRef<T>* dpred,
                  double scale) {
  if (static_cast<Eigen::Index>(target.size()) != pred.cols()) {
    throw ShapeError("masked_ce: target has " + std::to_string(target.size()) +
                     " pixels, prediction " + std::to_string(pred.cols()));
  }
  CeValue out;
  for (auto t : target) out.count += (t != kIgnore);
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  double sum = 0.0;
  for (Eigen::Index px = 0; px < pred.cols(); ++px) {
    const auto t = target[px];
    if (t == kIgnore) continue;
    if (t >= pred.rows()) throw ValidationError("masked_ce: target class out of range");
    const double y = static_cast<double>(pred(t, px));
    sum -= std::log(std::max(y, kLogClamp));
    if (dpred && y >= kLogClamp) (*dpred)(t, px) += static_cast<T>(-scale * inv / y);
  }
  out.value = sum * inv;
  return out;
}

template <typename T>
CeValue masked_ce(const ProbMapT<T>& pred, const LabelMap& target) {
  if (static_cast<Eigen::Index>(target.size()) != pred.pixels() ||
      target.height * target.width != pred.height * pred.width * pred.batch) {
    throw ShapeError("masked_ce: shapes disagree");
  }
  return masked_ce<T>(pred.values, target.data);
}

template <typename T>
CeValue trace_mean(ColsRef<T> cm, int classes, std::span<const std::uint8_t> mask,
                   GradRef<T>* dcm, double scale) {
  if (cm.rows() != static_cast<Eigen::Index>(classes) * classes) {
    throw ShapeError("trace_mean: confusion stack rows do not match L*L");
  }
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != cm.cols()) {
    throw ShapeError("trace_mean: mask size mismatch");
  }
  CeValue out;
  for (Eigen::Index px = 0; px < cm.cols(); ++px) out.count += mask.empty() || mask[px] != 0;
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  double sum = 0.0;
  for (Eigen::Index px = 0; px < cm.cols(); ++px) {
    if (!mask.empty() && mask[px] == 0) continue;
    for (int i = 0; i < classes; ++i) {
      sum += static_cast<double>(cm(i * classes + i, px));
      if (dcm) (*dcm)(i * classes + i, px) += static_cast<T>(scale * inv);
    }
  }
  out.value = sum * inv;
  return out;
}

template <typename T>
double trace_mean(const ConfusionMapStackT<T>& cm, const Mask* mask) {
  if (mask && static_cast<Eigen::Index>(mask->size()) != cm.pixels()) {
    throw ShapeError("trace_mean: mask shape mismatch");
  }
  return trace_mean<T>(cm.values, cm.classes,
                       mask ? std::span<const std::uint8_t>(mask->data)
                            : std::span<const std::uint8_t>())
      .value;
}

namespace {

// CE of a per-pixel linear transform of p: y_px = B_px p_px with
// B_px = W^T A_px (W = I for the objective branch, W = M for the
// complementary one). Gradients flow to p and A.
template <typename T>
CeValue transformed_ce(ColsRef<T> p, int l, ColsRef<T> cm, const Eigen::MatrixXd* m,
                       std::span<const std::uint8_t> target, GradRef<T>* dp, GradRef<T>* dcm,
                       double scale) {
  if (static_cast<Eigen::Index>(target.size()) != p.cols() || cm.cols() != p.cols() ||
      cm.rows() != static_cast<Eigen::Index>(l) * l || p.rows() != l) {
    throw ShapeError("loss: prediction, confusion stack and target disagree in shape");
  }
  CeValue out;
  for (auto t : target) out.count += (t != kIgnore);
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  std::vector<double> u(l), du(l);
  double sum = 0.0;
  for (Eigen::Index px = 0; px < p.cols(); ++px) {
    const auto t = target[px];
    if (t == kIgnore) continue;
    if (t >= l) throw ValidationError("loss: target class out of range");
    const T* a = cm.col(px).data();  // a[j * l + i] = A_ij
    const T* pp = p.col(px).data();
    double y = 0.0;
    if (m == nullptr) {
      for (int j = 0; j < l; ++j) y += static_cast<double>(a[j * l + t]) * pp[j];
    } else {
      for (int i = 0; i < l; ++i) {
        double ui = 0.0;
        for (int j = 0; j < l; ++j) ui += static_cast<double>(a[j * l + i]) * pp[j];
        u[i] = ui;
        y += (*m)(i, t) * ui;
      }
    }
    sum -= std::log(std::max(y, kLogClamp));
    if (y < kLogClamp || (!dp && !dcm)) continue;
    const double g = -scale * inv / y;  // dL/dy
    if (m == nullptr) {
      std::fill(du.begin(), du.end(), 0.0);
      du[t] = g;
    } else {
      for (int i = 0; i < l; ++i) du[i] = (*m)(i, t) * g;
    }
    if (dp) {
      auto col = (*dp).col(px);
      for (int j = 0; j < l; ++j) {
        double s = 0.0;
        for (int i = 0; i < l; ++i) s += static_cast<double>(a[j * l + i]) * du[i];
        col(j) += static_cast<T>(s);
      }
    }
    if (dcm) {
      auto col = (*dcm).col(px);
      for (int j = 0; j < l; ++j)
        for (int i = 0; i < l; ++i) col(j * l + i) += static_cast<T>(du[i] * pp[j]);
    }
  }
  out.value = sum * inv;
  return out;
}

template <typename T>
LossFragment branch_loss(ColsRef<T> p, int classes, std::span<const ColsRef<T>> cms,
                         const Eigen::MatrixXd* m, std::span<const LabelMap* const> targets,
                         double lambda, ImageGrads<T>* grads, double scale,
                         bool break_trace_gradient) {
  if (cms.size() != targets.size()) {
    throw ValidationError("loss: " + std::to_string(cms.size()) + " confusion stacks for " +
                          std::to_string(targets.size()) + " annotation sources");
  }
  if (grads && grads->dcm.size() < cms.size()) {
    throw ValidationError("loss: missing gradient sinks for confusion stacks");
  }
  LossFragment frag;
  for (std::size_t k = 0; k < cms.size(); ++k) {
    GradRef<T>* dcm = grads ? grads->dcm[k] : nullptr;
    const CeValue ce = transformed_ce<T>(p, classes, cms[k], m, targets[k]->data,
                                         grads ? grads->dp : nullptr, dcm, scale);
    GradRef<T>* dtrace = break_trace_gradient ? nullptr : dcm;
    const CeValue tr = trace_mean<T>(cms[k], classes, {}, dtrace, scale * lambda);
    frag.ce += ce.value;
    frag.ce_pixels += ce.count;
    frag.trace += tr.value;
    frag.trace_pixels += tr.count;
  }
  return frag;
}

}  // namespace

template <typename T>
LossFragment loss_obj(ColsRef<T> p, int classes, std::span<const ColsRef<T>> cms,
                      std::span<const LabelMap* const> targets, double lambda,
                      ImageGrads<T>* grads, double scale, bool break_trace_gradient) {
  return branch_loss<T>(p, classes, cms, nullptr, targets, lambda, grads, scale,
                        break_trace_gradient);
}

template <typename T>
LossFragment loss_comp(ColsRef<T> p, int classes, std::span<const ColsRef<T>> cms,
                       const TransitionMatrix& m, std::span<const LabelMap* const> targets,
                       double lambda, ImageGrads<T>* grads, double scale,
                       bool break_trace_gradient) {
  if (m.classes() != classes) {
    throw ValidationError("loss_comp: transition matrix has " + std::to_string(m.classes()) +
                          " classes, model has " + std::to_string(classes));
  }
  instrumentation::count_cm_tm();
  return branch_loss<T>(p, classes, cms, &m.values, targets, lambda, grads, scale,
                        break_trace_gradient);
}

namespace {

template <typename T>
void collect(const ProbMapT<T>& p, std::span<const ConfusionMapStackT<T>> cms,
             std::span<const CoarseMap> targets, CoarseKind kind, std::vector<ColsRef<T>>& refs,
             std::vector<const LabelMap*>& labels) {
  if (cms.size() != targets.size()) {
    throw ValidationError("loss: " + std::to_string(cms.size()) + " confusion stacks for " +
                          std::to_string(targets.size()) + " annotation sources");
  }
  for (std::size_t k = 0; k < cms.size(); ++k) {
    if (cms[k].classes != p.classes || cms[k].pixels() != p.pixels()) {
      throw ShapeError("loss: confusion stack shape differs from prediction");
    }
    if (targets[k].kind != kind) throw ValidationError("loss: coarse map of the wrong kind");
    refs.emplace_back(cms[k].values);
    labels.push_back(&targets[k].labels);
  }
}

}  // namespace

template <typename T>
LossFragment loss_obj(const ProbMapT<T>& p, std::span<const ConfusionMapStackT<T>> cms,
                      std::span<const CoarseMap> targets, double lambda) {
  std::vector<ColsRef<T>> refs;
  std::vector<const LabelMap*> labels;
  collect(p, cms, targets, CoarseKind::positive, refs, labels);
  return loss_obj<T>(p.values, p.classes, refs, labels, lambda);
}

template <typename T>
LossFragment loss_comp(const ProbMapT<T>& p, std::span<const ConfusionMapStackT<T>> cms,
                       const TransitionMatrix& m, std::span<const CoarseMap> targets,
                       double lambda) {
  std::vector<ColsRef<T>> refs;
  std::vector<const LabelMap*> labels;
  collect(p, cms, targets, CoarseKind::negative, refs, labels);
  return loss_comp<T>(p.values, p.classes, refs, m, labels, lambda);
}

LossBreakdown loss_final(const LossFragment& obj, const LossFragment& comp, const LossConfig& cfg,
                         double lambda) {
  LossBreakdown b;
  b.ce_obj = obj.ce;
  b.trace_obj = obj.trace;
  b.ce_comp = comp.ce;
  b.trace_comp = comp.trace;
  b.lambda = lambda;
  b.pixels_obj = obj.ce_pixels;
  b.pixels_comp = comp.ce_pixels;
  b.total = cfg.w_obj * (obj.ce + lambda * obj.trace) + cfg.w_comp * (comp.ce + lambda * comp.trace);
  return b;
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"loss_total", b.total}, {"ce_obj", b.ce_obj},       {"trace_obj", b.trace_obj},
          {"ce_comp", b.ce_comp},  {"trace_comp", b.trace_comp}, {"lambda", b.lambda}};
}

// ---------------------------------------------------------------------------

template <typename T>
GradCheckResult grad_check(const std::function<double()>& loss,
                           const std::function<void()>& compute_gradient,
                           std::span<const GradSlot<T>> slots, double eps, std::size_t samples,
                           std::uint64_t seed) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be > 0");
  if (slots.empty()) throw ValidationError("grad_check: no parameters to check");
  const double base = loss();
  if (!std::isfinite(base)) throw NumericError("grad_check: loss is not finite");
  compute_gradient();

  std::vector<std::size_t> order(slots.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  if (samples > 0) order.resize(std::min(samples, order.size()));

  GradCheckResult r;
  for (std::size_t idx : order) {
    const GradSlot<T>& s = slots[idx];
    const double analytic = static_cast<double>(*s.grad);
    const T orig = *s.value;
    const T plus = static_cast<T>(static_cast<double>(orig) + eps);
    const T minus = static_cast<T>(static_cast<double>(orig) - eps);
    *s.value = plus;
    const double fp = loss();
    *s.value = minus;
    const double fm = loss();
    *s.value = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: loss is not finite at a perturbed point");
    }
    const double step = static_cast<double>(plus) - static_cast<double>(minus);
    const double numeric = (fp - fm) / step;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    const double rel = std::abs(analytic - numeric) / denom;
    ++r.checked;
    if (r.checked == 1 || rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = idx;
      r.worst_analytic = analytic;
      r.worst_numeric = numeric;
    }
  }
  return r;
}

namespace {

struct Toy {
  int l = 0, b = 0, hw = 0;
  std::vector<LabelMap> pos, neg;
  TransitionMatrix m;
};

// Loss of the toy batch; fills input gradients when dz is non-null.
template <typename T>
double toy_loss(const Toy& toy, const Mat<T>& z, const Mat<T>& cp, const Mat<T>& cn, double lambda,
                bool break_trace, Mat<T>* dz, Mat<T>* dcp, Mat<T>* dcn) {
  const Mat<T> p = softmax_columns(z);
  const Mat<T> a = cm_softmax(cp, toy.l);
  const Mat<T> c = cm_softmax(cn, toy.l);
  Mat<T> dp, da, dc;
  if (dz) {
    dp = Mat<T>::Zero(p.rows(), p.cols());
    da = Mat<T>::Zero(a.rows(), a.cols());
    dc = Mat<T>::Zero(c.rows(), c.cols());
  }
  LossConfig cfg;
  cfg.lambda = lambda;
  double total = 0.0;
  const double inv_b = 1.0 / toy.b;
  for (int k = 0; k < toy.b; ++k) {
    const Eigen::Index base = static_cast<Eigen::Index>(k) * toy.hw;
    const ColsRef<T> pk = p.middleCols(base, toy.hw);
    const std::array<ColsRef<T>, 1> ak{ColsRef<T>(a.middleCols(base, toy.hw))};
    const std::array<ColsRef<T>, 1> ck{ColsRef<T>(c.middleCols(base, toy.hw))};
    const std::array<const LabelMap*, 1> tp{&toy.pos[k]}, tn{&toy.neg[k]};
    std::optional<GradRef<T>> dpk, dak, dck;
    ImageGrads<T> go, gc;
    if (dz) {
      dpk.emplace(dp.middleCols(base, toy.hw));
      dak.emplace(da.middleCols(base, toy.hw));
      dck.emplace(dc.middleCols(base, toy.hw));
      go.dp = gc.dp = &*dpk;
      go.dcm = {&*dak};
      gc.dcm = {&*dck};
    }
    const LossFragment obj = loss_obj<T>(pk, toy.l, ak, tp, lambda, dz ? &go : nullptr,
                                         inv_b * cfg.w_obj, break_trace);
    const LossFragment comp = loss_comp<T>(pk, toy.l, ck, toy.m, tn, lambda, dz ? &gc : nullptr,
                                           inv_b * cfg.w_comp, break_trace);
    total += inv_b * loss_final(obj, comp, cfg, lambda).total;
  }
  if (dz) {
    // Copy into the existing buffers: callers hold pointers into them.
    dz->noalias() = softmax_columns_backward(p, dp);
    dcp->noalias() = cm_softmax_backward(a, da, toy.l);
    dcn->noalias() = cm_softmax_backward(c, dc, toy.l);
  }
  return total;
}

}  // namespace

GradCheckResult grad_check_toy(const ToyGradCheckOptions& opt) {
  if (opt.classes < 2 || opt.batch < 1 || opt.height < 1 || opt.width < 1) {
    throw ValidationError("grad_check_toy: sizes must be positive and L >= 2");
  }
  Toy toy;
  toy.l = opt.classes;
  toy.b = opt.batch;
  toy.hw = opt.height * opt.width;
  toy.m = build_transition_matrix(toy.l, TransitionMode::uniform);
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, toy.l - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Eigen::Index px = static_cast<Eigen::Index>(toy.b) * toy.hw;
  Mat<double> z(toy.l, px), cp(toy.l * toy.l, px), cn(toy.l * toy.l, px);
  for (auto* m : {&z, &cp, &cn})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = opt.logit_scale * normal(rng);
  for (int k = 0; k < toy.b; ++k) {
    LabelMap tp(opt.height, opt.width), tn(opt.height, opt.width);
    for (auto& v : tp.data) v = unit(rng) < 0.2 ? kIgnore : static_cast<std::uint8_t>(cls(rng));
    for (auto& v : tn.data) v = unit(rng) < 0.5 ? kIgnore : static_cast<std::uint8_t>(cls(rng));
    toy.pos.push_back(std::move(tp));
    toy.neg.push_back(std::move(tn));
  }

  const double eps = opt.eps > 0.0 ? opt.eps : 1e-5;
  Mat<double> dz, dcp, dcn;
  if (opt.dtype == Dtype::float32) {
    // Inputs rounded to float so both precisions see the same point.
    z = z.cast<float>().cast<double>();
    cp = cp.cast<float>().cast<double>();
    cn = cn.cast<float>().cast<double>();
  }
  std::vector<GradSlot<double>> slots;
  for (auto [v, g] : {std::pair{&z, &dz}, std::pair{&cp, &dcp}, std::pair{&cn, &dcn}}) {
    g->resize(v->rows(), v->cols());
    for (Eigen::Index i = 0; i < v->size(); ++i) slots.push_back({v->data() + i, g->data() + i});
  }
  auto loss = [&] {
    return toy_loss<double>(toy, z, cp, cn, opt.lambda, opt.break_trace_gradient, nullptr,
                            nullptr, nullptr);
  };
  auto grad = [&] {
    if (opt.dtype == Dtype::float64) {
      toy_loss<double>(toy, z, cp, cn, opt.lambda, opt.break_trace_gradient, &dz, &dcp, &dcn);
      return;
    }
    Mat<float> fz(z.rows(), z.cols()), fcp(cp.rows(), cp.cols()), fcn(cn.rows(), cn.cols());
    toy_loss<float>(toy, z.cast<float>(), cp.cast<float>(), cn.cast<float>(), opt.lambda,
                    opt.break_trace_gradient, &fz, &fcp, &fcn);
    dz.noalias() = fz.cast<double>();
    dcp.noalias() = fcp.cast<double>();
    dcn.noalias() = fcn.cast<double>();
  };
  return grad_check<double>(loss, grad, slots, eps, opt.samples ? opt.samples : slots.size(),
                            opt.seed);
}

#define COARSESEG_LOSS_INSTANTIATE(T)                                                          \
  template CeValue masked_ce<T>(ColsRef<T>, std::span<const std::uint8_t>, GradRef<T>*, double); \
  template CeValue masked_ce<T>(const ProbMapT<T>&, const LabelMap&);                          \
  template CeValue trace_mean<T>(ColsRef<T>, int, std::span<const std::uint8_t>, GradRef<T>*,  \
                                 double);                                                      \
  template double trace_mean<T>(const ConfusionMapStackT<T>&, const Mask*);                    \
  template LossFragment loss_obj<T>(ColsRef<T>, int, std::span<const ColsRef<T>>,              \
                                    std::span<const LabelMap* const>, double, ImageGrads<T>*,  \
                                    double, bool);                                             \
  template LossFragment loss_comp<T>(ColsRef<T>, int, std::span<const ColsRef<T>>,             \
                                     const TransitionMatrix&, std::span<const LabelMap* const>, \
                                     double, ImageGrads<T>*, double, bool);                    \
  template LossFragment loss_obj<T>(const ProbMapT<T>&, std::span<const ConfusionMapStackT<T>>, \
                                    std::span<const CoarseMap>, double);                       \
  template LossFragment loss_comp<T>(const ProbMapT<T>&,                                       \
                                     std::span<const ConfusionMapStackT<T>>,                   \
                                     const TransitionMatrix&, std::span<const CoarseMap>,      \
                                     double);                                                  \
  template GradCheckResult grad_check<T>(const std::function<double()>&,                       \
                                         const std::function<void()>&,                         \
                                         std::span<const GradSlot<T>>, double, std::size_t,    \
                                         std::uint64_t);

COARSESEG_LOSS_INSTANTIATE(float)
COARSESEG_LOSS_INSTANTIATE(double)

#undef COARSESEG_LOSS_INSTANTIATE

}  // namespace coarseseg
