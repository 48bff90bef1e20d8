#include <doctest.h>

#include <cmath>

#include "coarseseg/loss.hpp"

using namespace coarseseg;

namespace {

ProbMap pixel(std::initializer_list<double> p) {
  ProbMap m;
  m.height = m.width = 1;
  m.classes = static_cast<int>(p.size());
  m.values.resize(m.classes, 1);
  int i = 0;
  for (double v : p) m.values(i++, 0) = v;
  return m;
}

ConfusionMapStack identity_cm(int l) {
  ConfusionMapStack cm;
  cm.height = cm.width = 1;
  cm.classes = l;
  cm.values = Mat<double>::Zero(l * l, 1);
  for (int i = 0; i < l; ++i) cm.at(0, i, i) = 1.0;
  return cm;
}

ConfusionMapStack example_cm() {
  ConfusionMapStack cm = identity_cm(2);
  cm.at(0, 0, 0) = 0.9;
  cm.at(0, 0, 1) = 0.2;
  cm.at(0, 1, 0) = 0.1;
  cm.at(0, 1, 1) = 0.8;
  return cm;
}

CoarseMap coarse(CoarseKind kind, std::uint8_t label) {
  CoarseMap c;
  c.kind = kind;
  c.labels = LabelMap(1, 1, label);
  return c;
}

}  // namespace

TEST_CASE("masked cross-entropy of one pixel") {
  const ProbMap p = pixel({0.69, 0.31});
  const CeValue ce = masked_ce(p, LabelMap(1, 1, 0));
  CHECK(ce.count == 1);
  CHECK(std::abs(ce.value - (-std::log(0.69))) < 1e-9);
  CHECK(std::abs(ce.value - 0.37106) < 1e-5);
  CHECK(masked_ce(p, LabelMap(1, 1, kIgnore)).count == 0);
}

TEST_CASE("cross-entropy clamps zero probabilities") {
  const CeValue ce = masked_ce(pixel({1.0, 0.0}), LabelMap(1, 1, 1));
  CHECK(std::isfinite(ce.value));
  CHECK(std::abs(ce.value - (-std::log(kLogClamp))) < 1e-9);
}

TEST_CASE("trace of one pixel") {
  CHECK(std::abs(trace_mean(example_cm()) - 1.7) < 1e-9);
  CHECK(std::abs(trace_mean(identity_cm(3)) - 3.0) < 1e-9);
}

TEST_CASE("objective fragment composes CE and trace") {
  const ProbMap p = pixel({0.7, 0.3});
  const ConfusionMapStack cms[] = {example_cm()};
  const CoarseMap targets[] = {coarse(CoarseKind::positive, 0)};
  const LossFragment f = loss_obj(p, std::span<const ConfusionMapStack>(cms), targets, 0.01);
  CHECK(std::abs(f.ce - (-std::log(0.69))) < 1e-9);
  CHECK(std::abs(f.trace - 1.7) < 1e-9);
  CHECK(std::abs(f.ce + 0.01 * f.trace - 0.38806) < 1e-5);
}

TEST_CASE("complementary fragment flips the binary prediction") {
  const TransitionMatrix m = build_transition_matrix(2, TransitionMode::uniform);
  const ProbMap p = pixel({0.7, 0.3});
  const ConfusionMapStack cms[] = {identity_cm(2)};
  const CoarseMap targets[] = {coarse(CoarseKind::negative, 1)};
  const LossFragment f = loss_comp(p, std::span<const ConfusionMapStack>(cms), m, targets, 0.0);
  CHECK(std::abs(f.ce - (-std::log(0.7))) < 1e-9);
  CHECK(std::abs(f.ce - 0.35667) < 1e-5);
}

TEST_CASE("complementary fragment with three classes") {
  const TransitionMatrix m = build_transition_matrix(3, TransitionMode::uniform);
  const ProbMap p = pixel({1.0, 0.0, 0.0});
  const ConfusionMapStack cms[] = {identity_cm(3)};
  const CoarseMap targets[] = {coarse(CoarseKind::negative, 1)};
  const LossFragment f = loss_comp(p, std::span<const ConfusionMapStack>(cms), m, targets, 0.0);
  CHECK(std::abs(f.ce - (-std::log(0.5))) < 1e-9);
}

TEST_CASE("final loss sums both fragments") {
  const ProbMap p = pixel({0.7, 0.3});
  const TransitionMatrix m = build_transition_matrix(2, TransitionMode::uniform);
  const ConfusionMapStack obj_cm[] = {example_cm()};
  const ConfusionMapStack comp_cm[] = {identity_cm(2)};
  const CoarseMap pos[] = {coarse(CoarseKind::positive, 0)};
  const CoarseMap neg[] = {coarse(CoarseKind::negative, 1)};
  const LossFragment obj = loss_obj(p, std::span<const ConfusionMapStack>(obj_cm), pos, 0.01);
  const LossFragment comp = loss_comp(p, std::span<const ConfusionMapStack>(comp_cm), m, neg, 0.01);
  LossConfig cfg;
  const LossBreakdown b = loss_final(obj, comp, cfg, 0.01);
  const double oracle = (-std::log(0.69) + 0.01 * 1.7) + (-std::log(0.7) + 0.01 * 2.0);
  CHECK(std::abs(b.total - oracle) < 1e-9);
  CHECK(std::abs(b.total - 0.76473) < 1e-5);

  LossConfig no_comp;
  no_comp.w_comp = 0.0;
  const LossBreakdown only = loss_final(obj, comp, no_comp, 0.01);
  CHECK(std::abs(only.total - (obj.ce + 0.01 * obj.trace)) < 1e-12);
  const LossBreakdown zero = loss_final(obj, LossFragment{}, cfg, 0.01);
  CHECK(std::abs(zero.total - (obj.ce + 0.01 * obj.trace)) < 1e-12);
}

TEST_CASE("breakdown additivity over random weights") {
  LossFragment obj{0.4, 1.9, 10, 10}, comp{0.2, 1.6, 8, 10};
  for (double w1 : {0.0, 0.5, 1.0, 2.0})
    for (double w2 : {0.0, 0.3, 1.0})
      for (double lam : {0.0, 0.01, 0.1}) {
        LossConfig cfg;
        cfg.w_obj = w1;
        cfg.w_comp = w2;
        const LossBreakdown b = loss_final(obj, comp, cfg, lam);
        CHECK(std::abs(b.total - (w1 * (b.ce_obj + lam * b.trace_obj) +
                                  w2 * (b.ce_comp + lam * b.trace_comp))) < 1e-6);
      }
}

TEST_CASE("lambda warmup") {
  LossConfig cfg;
  cfg.lambda = 0.05;
  cfg.warmup_epochs = 2;
  CHECK(cfg.lambda_at(1) == 0.0);
  CHECK(cfg.lambda_at(2) == 0.0);
  CHECK(cfg.lambda_at(3) == 0.05);
  LossConfig neg;
  neg.lambda = -1.0;
  CHECK_THROWS_AS(neg.validate(), ValidationError);
  CHECK(LossConfig::from_json(cfg.to_json()).lambda == 0.05);
}

TEST_CASE("grad check of a square") {
  double w = 3.0, g = 0.0;
  const GradSlot<double> slots[] = {{&w, &g}};
  const auto r = grad_check<double>([&] { return w * w; }, [&] { g = 2.0 * w; }, slots, 1e-5, 0, 0);
  CHECK(r.max_rel_err < 1e-8);
  CHECK(r.checked == 1);
  CHECK(std::abs(r.worst_analytic - 6.0) < 1e-12);

  const auto nan = [&] { return std::nan(""); };
  CHECK_THROWS_AS(grad_check<double>(nan, [] {}, slots, 1e-5, 0, 0), NumericError);
}

TEST_CASE("toy loss gradient, float64") {
  ToyGradCheckOptions o;
  o.samples = 50;
  CHECK(grad_check_toy(o).max_rel_err < 1e-5);
  o.samples = 0;
  const auto all = grad_check_toy(o);
  CHECK(all.checked > 50);
  CHECK(all.max_rel_err < 1e-5);
}

TEST_CASE("toy loss gradient, float32") {
  ToyGradCheckOptions o;
  o.dtype = Dtype::float32;
  CHECK(grad_check_toy(o).max_rel_err < 1e-3);
}

TEST_CASE("broken trace gradient is detected") {
  ToyGradCheckOptions o;
  o.break_trace_gradient = true;
  CHECK(grad_check_toy(o).max_rel_err > 1e-2);
}
