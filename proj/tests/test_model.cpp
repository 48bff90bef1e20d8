#include <doctest.h>

#include <cmath>
#include <random>

#include "coarseseg/model.hpp"
#include "support.hpp"

using namespace coarseseg;

namespace {

ProbMap single_pixel(std::initializer_list<double> p) {
  ProbMap m;
  m.height = m.width = 1;
  m.classes = static_cast<int>(p.size());
  m.values.resize(m.classes, 1);
  int i = 0;
  for (double v : p) m.values(i++, 0) = v;
  return m;
}

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image im(h, w, 1);
  for (auto& v : im.data) v = static_cast<std::uint8_t>(rng() % 256);
  return im;
}

}  // namespace

TEST_CASE("noisy prediction of one pixel is the 2x2 matvec") {
  ConfusionMapStack cm;
  cm.height = cm.width = 1;
  cm.classes = 2;
  cm.values.resize(4, 1);
  cm.at(0, 0, 0) = 0.9;
  cm.at(0, 0, 1) = 0.2;
  cm.at(0, 1, 0) = 0.1;
  cm.at(0, 1, 1) = 0.8;
  const ProbMap p = single_pixel({0.7, 0.3});
  const ProbMap q = noisy_prediction(cm, p);
  const double e0 = 0.9 * 0.7 + 0.2 * 0.3, e1 = 0.1 * 0.7 + 0.8 * 0.3;
  CHECK(std::abs(q.values(0, 0) - e0) < 1e-9);
  CHECK(std::abs(q.values(1, 0) - e1) < 1e-9);
  CHECK(std::abs(q.values(0, 0) - 0.69) < 1e-9);
  CHECK(std::abs(q.values(1, 0) - 0.31) < 1e-9);
}

TEST_CASE("uniform transition matrix maps a one-hot to the other classes") {
  const TransitionMatrix m = build_transition_matrix(3, TransitionMode::uniform);
  const ProbMap u = single_pixel({1.0, 0.0, 0.0});
  const ProbMap v = complementary_prediction(m, u);
  for (int j = 0; j < 3; ++j) {
    double oracle = 0.0;
    for (int i = 0; i < 3; ++i) oracle += m.values(i, j) * u.values(i, 0);
    CHECK(std::abs(v.values(j, 0) - oracle) < 1e-9);
  }
  CHECK(std::abs(v.values(0, 0)) < 1e-9);
  CHECK(std::abs(v.values(1, 0) - 0.5) < 1e-9);
  CHECK(std::abs(v.values(2, 0) - 0.5) < 1e-9);
}

TEST_CASE("binary uniform transition matrix flips") {
  const TransitionMatrix m = build_transition_matrix(2, TransitionMode::uniform);
  CHECK(m.values(0, 1) == 1.0);
  CHECK(m.values(1, 0) == 1.0);
  CHECK(m.values(0, 0) == 0.0);
}

TEST_CASE("custom transition matrices are validated") {
  Eigen::MatrixXd good(3, 3);
  good << 0, 0.3, 0.7, 0.5, 0, 0.5, 0.9, 0.1, 0;
  const TransitionMatrix m = build_transition_matrix(3, TransitionMode::custom, good);
  CHECK(is_valid_transition(m));
  Eigen::MatrixXd bad(2, 2);
  bad << 0.1, 0.9, 1, 0;
  CHECK_THROWS_AS(build_transition_matrix(2, TransitionMode::custom, bad), ValidationError);
  Eigen::MatrixXd rows(2, 2);
  rows << 0, 0.5, 1, 0;
  CHECK_THROWS_AS(build_transition_matrix(2, TransitionMode::custom, rows), ValidationError);
  CHECK_THROWS_AS(build_transition_matrix(3, TransitionMode::custom, bad), ValidationError);
}

TEST_CASE("fresh confusion heads put e^g/(e^g+1) on the diagonal") {
  ArchDescriptor a;
  a.height = a.width = 8;
  a.num_classes = 2;
  a.gamma = 4.0;
  const Model<double> model(a, 3);
  const auto cm = cm_forward(model, random_image(8, 8, 1), Branch::objective);
  const double expected = std::exp(4.0) / (std::exp(4.0) + 1.0);
  CHECK(std::abs(expected - 0.9820) < 1e-4);
  for (Eigen::Index p = 0; p < cm.pixels(); ++p) {
    CHECK(std::abs(cm.at(p, 0, 0) - expected) < 1e-9);
    CHECK(std::abs(cm.at(p, 1, 1) - expected) < 1e-9);
  }
}

TEST_CASE("objective and complementary heads are separate parameters") {
  ArchDescriptor a;
  a.height = a.width = 8;
  a.head_init_std = 0.1;
  const Model<double> model(a, 5);
  const Image im = random_image(8, 8, 2);
  const auto obj = cm_forward(model, im, Branch::objective);
  const auto comp = cm_forward(model, im, Branch::complementary);
  CHECK((obj.values - comp.values).cwiseAbs().maxCoeff() > 1e-6);
  CHECK(model.head_index(Branch::objective) != model.head_index(Branch::complementary));
}

TEST_CASE("same seed gives the same network output") {
  ArchDescriptor a;
  a.height = a.width = 28;
  const Image im = random_image(28, 28, 9);
  const Model<float> m1(a, 42), m2(a, 42), m3(a, 43);
  const auto p1 = seg_forward(m1, im), p2 = seg_forward(m2, im), p3 = seg_forward(m3, im);
  CHECK(p1.values == p2.values);
  CHECK_FALSE(p1.values == p3.values);
  CHECK(is_valid_prob_map(p1));
}

TEST_CASE("architecture descriptor round trip and diff") {
  ArchDescriptor a;
  a.num_classes = 3;
  const ArchDescriptor b = ArchDescriptor::from_json(a.to_json());
  CHECK(a == b);
  CHECK(a.diff(b).empty());
  ArchDescriptor c = a;
  c.num_classes = 2;
  CHECK(a.diff(c).find("num_classes") != std::string::npos);
  ArchDescriptor bad = a;
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("parameter count matches the tensors") {
  ArchDescriptor a;
  Model<float> m(a, 0);
  std::size_t n = 0;
  for (const auto* p : m.params()) n += static_cast<std::size_t>(p->value.size());
  CHECK(n == m.parameter_count());
}

// Normalization of every per-pixel distribution over random draws.
TEST_CASE("stochasticity properties over 1000 random trials") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g(0.0, 3.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const int l = 2 + static_cast<int>(rng() % 5);
    const int pixels = 1 + static_cast<int>(rng() % 9);

    ProbMap p;
    p.width = pixels;
    p.height = 1;
    p.classes = l;
    p.values = softmax_columns<double>(Mat<double>::NullaryExpr(l, pixels, [&] { return g(rng); }));
    REQUIRE(is_valid_prob_map(p, 1e-5));

    ConfusionMapStack cm;
    cm.width = pixels;
    cm.height = 1;
    cm.classes = l;
    cm.values = cm_softmax<double>(Mat<double>::NullaryExpr(l * l, pixels, [&] { return g(rng); }), l);
    REQUIRE(is_column_stochastic(cm, 1e-5));

    Eigen::MatrixXd mv(l, l);
    for (int i = 0; i < l; ++i) {
      double s = 0.0;
      for (int j = 0; j < l; ++j) s += (mv(i, j) = i == j ? 0.0 : u(rng) + 1e-3);
      mv.row(i) /= s;
    }
    const TransitionMatrix m = build_transition_matrix(
        l, rng() % 2 ? TransitionMode::custom : TransitionMode::uniform, mv);
    REQUIRE(is_valid_transition(m, 1e-9));
    for (int i = 0; i < l; ++i) REQUIRE(m.values(i, i) == 0.0);

    const ProbMap q = noisy_prediction(cm, p);
    REQUIRE(is_valid_prob_map(q, 1e-5));
    const ProbMap v = complementary_prediction(m, q);
    REQUIRE(is_valid_prob_map(v, 1e-5));
  }
}
