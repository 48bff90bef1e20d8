#include "coarseseg/model.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "coarseseg/error.hpp"

namespace coarseseg {

namespace instrumentation {
namespace {
std::atomic<long> g_cm_tm_calls{0};
}
long cm_tm_calls() { return g_cm_tm_calls.load(); }
void reset() { g_cm_tm_calls.store(0); }
void count_cm_tm() { g_cm_tm_calls.fetch_add(1, std::memory_order_relaxed); }
}  // namespace instrumentation

// ---------------------------------------------------------------------------
// Transition matrix and per-pixel products

TransitionMatrix build_transition_matrix(int num_classes, TransitionMode mode,
                                         const Eigen::MatrixXd& values) {
  if (num_classes < 2) throw ValidationError("transition matrix needs L >= 2");
  TransitionMatrix m;
  if (mode == TransitionMode::uniform) {
    m.values = Eigen::MatrixXd::Constant(num_classes, num_classes, 1.0 / (num_classes - 1));
    m.values.diagonal().setZero();
    return m;
  }
  if (values.rows() != num_classes || values.cols() != num_classes) {
    throw ValidationError("custom transition matrix must be " + std::to_string(num_classes) +
                          "x" + std::to_string(num_classes));
  }
  for (int i = 0; i < num_classes; ++i) {
    if (std::abs(values(i, i)) > 1e-12) {
      throw ValidationError("custom transition matrix: nonzero diagonal at row " +
                            std::to_string(i));
    }
    double row = 0.0;
    for (int j = 0; j < num_classes; ++j) {
      const double v = values(i, j);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ValidationError("custom transition matrix: entry outside [0,1]");
      }
      row += v;
    }
    if (std::abs(row - 1.0) > 1e-9) {
      throw ValidationError("custom transition matrix: row " + std::to_string(i) +
                            " sums to " + std::to_string(row));
    }
  }
  m.values = values;
  m.values.diagonal().setZero();
  return m;
}

template <typename T>
ProbMapT<T> noisy_prediction(const ConfusionMapStackT<T>& cm, const ProbMapT<T>& p) {
  if (cm.classes != p.classes || cm.values.cols() != p.values.cols() ||
      cm.values.rows() != static_cast<Eigen::Index>(p.classes) * p.classes) {
    throw ShapeError("noisy_prediction: confusion stack and probability map disagree");
  }
  instrumentation::count_cm_tm();
  const int l = p.classes;
  ProbMapT<T> out{p.batch, p.height, p.width, l, Mat<T>(l, p.values.cols())};
  for (Eigen::Index px = 0; px < p.values.cols(); ++px) {
    Eigen::Map<const Mat<T>> a(cm.values.col(px).data(), l, l);
    out.values.col(px).noalias() = a * p.values.col(px);
  }
  return out;
}

template <typename T>
ProbMapT<T> complementary_prediction(const TransitionMatrix& m, const ProbMapT<T>& u) {
  if (m.classes() != u.classes) {
    throw ShapeError("complementary_prediction: transition matrix is " +
                     std::to_string(m.classes()) + " classes, map has " +
                     std::to_string(u.classes));
  }
  instrumentation::count_cm_tm();
  const Mat<T> mt = m.values.transpose().cast<T>();
  ProbMapT<T> out{u.batch, u.height, u.width, u.classes, Mat<T>()};
  out.values.noalias() = mt * u.values;
  return out;
}

template <typename T>
bool is_valid_prob_map(const ProbMapT<T>& p, double tol) {
  if (p.values.rows() != p.classes) return false;
  for (Eigen::Index c = 0; c < p.values.cols(); ++c) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
      const double v = p.values(i, c);
      if (!(v >= -tol && v <= 1.0 + tol)) return false;
      s += v;
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

template <typename T>
bool is_column_stochastic(const ConfusionMapStackT<T>& cm, double tol) {
  const int l = cm.classes;
  if (cm.values.rows() != static_cast<Eigen::Index>(l) * l) return false;
  for (Eigen::Index px = 0; px < cm.values.cols(); ++px) {
    for (int j = 0; j < l; ++j) {
      double s = 0.0;
      for (int i = 0; i < l; ++i) {
        const double v = cm.at(px, i, j);
        if (!(v >= -tol && v <= 1.0 + tol)) return false;
        s += v;
      }
      if (std::abs(s - 1.0) > tol) return false;
    }
  }
  return true;
}

bool is_valid_transition(const TransitionMatrix& m, double tol) {
  const auto l = m.values.rows();
  if (l < 2 || m.values.cols() != l) return false;
  for (Eigen::Index i = 0; i < l; ++i) {
    if (m.values(i, i) != 0.0) return false;
    double s = 0.0;
    for (Eigen::Index j = 0; j < l; ++j) {
      if (m.values(i, j) < 0.0 || m.values(i, j) > 1.0) return false;
      s += m.values(i, j);
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Softmax kernels

template <typename T>
Mat<T> softmax_columns(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const T mx = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - mx).exp();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

template <typename T>
Mat<T> softmax_columns_backward(const Mat<T>& p, const Mat<T>& dp) {
  Mat<T> out(p.rows(), p.cols());
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    const T dot = p.col(c).dot(dp.col(c));
    out.col(c) = p.col(c).array() * (dp.col(c).array() - dot);
  }
  return out;
}

template <typename T>
Mat<T> cm_softmax(const Mat<T>& logits, int classes) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    for (int j = 0; j < classes; ++j) {
      const auto in = logits.col(c).segment(j * classes, classes);
      auto o = out.col(c).segment(j * classes, classes);
      const T mx = in.maxCoeff();
      o = (in.array() - mx).exp();
      o /= o.sum();
    }
  }
  return out;
}

template <typename T>
Mat<T> cm_softmax_backward(const Mat<T>& cm, const Mat<T>& dcm, int classes) {
  Mat<T> out(cm.rows(), cm.cols());
  for (Eigen::Index c = 0; c < cm.cols(); ++c) {
    for (int j = 0; j < classes; ++j) {
      const auto p = cm.col(c).segment(j * classes, classes);
      const auto g = dcm.col(c).segment(j * classes, classes);
      const T dot = p.dot(g);
      out.col(c).segment(j * classes, classes) = p.array() * (g.array() - dot);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Architecture descriptor

void ArchDescriptor::validate() const {
  if (in_channels < 1 || height < 1 || width < 1) {
    throw ValidationError("arch: input shape must be positive");
  }
  if (num_classes < 2) throw ValidationError("arch: num_classes must be >= 2");
  if (seg_base_channels < 1 || seg_depth < 0 || ann_channels < 1 || ann_layers < 1) {
    throw ValidationError("arch: channel counts and depths must be positive");
  }
  if ((height >> seg_depth) < 1 || (width >> seg_depth) < 1) {
    throw ValidationError("arch: input too small for " + std::to_string(seg_depth) +
                          " downsampling stages");
  }
  if (!(head_init_std >= 0.0) || !std::isfinite(gamma)) {
    throw ValidationError("arch: gamma must be finite and head_init_std >= 0");
  }
}

nlohmann::json ArchDescriptor::to_json() const {
  return {{"in_channels", in_channels},
          {"height", height},
          {"width", width},
          {"num_classes", num_classes},
          {"seg_base_channels", seg_base_channels},
          {"seg_depth", seg_depth},
          {"ann_channels", ann_channels},
          {"ann_layers", ann_layers},
          {"gamma", gamma},
          {"head_init_std", head_init_std},
          {"pos_sources", pos_sources},
          {"neg_sources", neg_sources}};
}

ArchDescriptor ArchDescriptor::from_json(const nlohmann::json& j) {
  ArchDescriptor a;
  a.in_channels = j.value("in_channels", a.in_channels);
  a.height = j.value("height", a.height);
  a.width = j.value("width", a.width);
  a.num_classes = j.value("num_classes", a.num_classes);
  a.seg_base_channels = j.value("seg_base_channels", a.seg_base_channels);
  a.seg_depth = j.value("seg_depth", a.seg_depth);
  a.ann_channels = j.value("ann_channels", a.ann_channels);
  a.ann_layers = j.value("ann_layers", a.ann_layers);
  a.gamma = j.value("gamma", a.gamma);
  a.head_init_std = j.value("head_init_std", a.head_init_std);
  a.pos_sources = j.value("pos_sources", a.pos_sources);
  a.neg_sources = j.value("neg_sources", a.neg_sources);
  return a;
}

std::string ArchDescriptor::diff(const ArchDescriptor& other) const {
  const auto a = to_json(), b = other.to_json();
  std::ostringstream os;
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (!b.contains(it.key()) || b[it.key()] != it.value()) {
      os << it.key() << ": " << it.value().dump() << " != "
         << (b.contains(it.key()) ? b[it.key()].dump() : "<missing>") << "; ";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Segmentation network

template <typename T>
SegNet<T>::SegNet(const ArchDescriptor& arch) : depth_(arch.seg_depth) {
  const int c = arch.seg_base_channels;
  enc_.emplace_back("seg.stem1", arch.in_channels, c, 3);
  stem2_ = nn::Conv2d<T>("seg.stem2", c, c, 3);
  for (int d = 1; d <= depth_; ++d) {
    enc_.emplace_back("seg.enc" + std::to_string(d), c << (d - 1), c << d, 3);
  }
  dec_.resize(depth_);
  for (int d = depth_ - 1; d >= 0; --d) {
    dec_[d] = nn::Conv2d<T>("seg.dec" + std::to_string(d), (c << (d + 1)) + (c << d), c << d, 3);
  }
  head_ = nn::Conv2d<T>("seg.head", c, arch.num_classes, 1);
}

template <typename T>
void SegNet<T>::init(std::mt19937_64& rng) {
  for (auto& l : enc_) l.init_he(rng);
  stem2_.init_he(rng);
  for (auto& l : dec_) l.init_he(rng);
  head_.init_he(rng);
}

template <typename T>
Mat<T> SegNet<T>::forward(const nn::Feature<T>& input, Tape& tape) const {
  tape.enc_cache.assign(enc_.size(), {});
  tape.dec_cache.assign(dec_.size(), {});
  tape.skips.assign(depth_ + 1, {});
  tape.pools.assign(depth_, {});
  tape.dec_out.assign(depth_, {});

  tape.stem1_out = enc_[0].forward(input, tape.enc_cache[0]);
  nn::relu_inplace(tape.stem1_out.x);
  tape.skips[0] = stem2_.forward(tape.stem1_out, tape.stem2_cache);
  nn::relu_inplace(tape.skips[0].x);
  for (int d = 1; d <= depth_; ++d) {
    const nn::Feature<T> pooled = tape.pools[d - 1].forward(tape.skips[d - 1]);
    tape.skips[d] = enc_[d].forward(pooled, tape.enc_cache[d]);
    nn::relu_inplace(tape.skips[d].x);
  }
  const nn::Feature<T>* cur = &tape.skips[depth_];
  for (int d = depth_ - 1; d >= 0; --d) {
    const auto& skip = tape.skips[d];
    const nn::Feature<T> cat =
        nn::concat_channels(nn::upsample_nearest(*cur, skip.dims.h, skip.dims.w), skip);
    tape.dec_out[d] = dec_[d].forward(cat, tape.dec_cache[d]);
    nn::relu_inplace(tape.dec_out[d].x);
    cur = &tape.dec_out[d];
  }
  return head_.forward(*cur, tape.head_cache).x;
}

template <typename T>
void SegNet<T>::backward(const Tape& tape, const Mat<T>& dlogits) {
  std::vector<Mat<T>> gskip(depth_ + 1);
  for (int d = 0; d <= depth_; ++d) gskip[d] = Mat<T>::Zero(tape.skips[d].x.rows(), tape.skips[d].x.cols());

  Mat<T> g = head_.backward(tape.head_cache, dlogits);
  for (int d = 0; d < depth_; ++d) {
    g = nn::relu_backward(tape.dec_out[d].x, g);
    const Mat<T> gcat = dec_[d].backward(tape.dec_cache[d], g);
    const auto& skip = tape.skips[d];
    const nn::Feature<T>& below = d == depth_ - 1 ? tape.skips[depth_] : tape.dec_out[d + 1];
    const Eigen::Index up_channels = below.x.rows();
    gskip[d] += gcat.bottomRows(skip.x.rows());
    g = nn::upsample_nearest_backward<T>(gcat.topRows(up_channels), below.dims, skip.dims.h,
                                         skip.dims.w);
  }
  if (depth_ == 0) {
    gskip[0] += g;
  } else {
    gskip[depth_] += g;
  }
  for (int d = depth_; d >= 1; --d) {
    const Mat<T> gr = nn::relu_backward(tape.skips[d].x, gskip[d]);
    const Mat<T> gpool = enc_[d].backward(tape.enc_cache[d], gr);
    gskip[d - 1] += tape.pools[d - 1].backward(gpool, tape.skips[d - 1].x.rows());
  }
  Mat<T> g0 = nn::relu_backward(tape.skips[0].x, gskip[0]);
  g0 = stem2_.backward(tape.stem2_cache, g0);
  g0 = nn::relu_backward(tape.stem1_out.x, g0);
  enc_[0].backward(tape.enc_cache[0], g0);
}

template <typename T>
std::vector<nn::Param<T>*> SegNet<T>::params() {
  std::vector<nn::Param<T>*> out;
  auto add = [&](nn::Conv2d<T>& l) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  };
  add(enc_[0]);
  add(stem2_);
  for (std::size_t d = 1; d < enc_.size(); ++d) add(enc_[d]);
  for (auto& l : dec_) add(l);
  add(head_);
  return out;
}

template <typename T>
std::vector<const nn::Param<T>*> SegNet<T>::params() const {
  auto mut = const_cast<SegNet*>(this)->params();
  return {mut.begin(), mut.end()};
}

// ---------------------------------------------------------------------------
// Annotation (confusion-matrix) network

template <typename T>
AnnotationNet<T>::AnnotationNet(const ArchDescriptor& arch) : arch_(arch) {
  const int a = arch.ann_channels;
  for (int k = 0; k < arch.ann_layers; ++k) {
    enc_.emplace_back("ann.enc" + std::to_string(k), k == 0 ? arch.in_channels : a, a, 3);
  }
  const int l = arch.num_classes;
  for (const auto& s : arch.pos_sources) heads_.emplace_back("ann.pos." + s, a, l * l, 1);
  for (const auto& s : arch.neg_sources) heads_.emplace_back("ann.neg." + s, a, l * l, 1);
}

template <typename T>
void AnnotationNet<T>::init(std::mt19937_64& rng) {
  for (auto& l : enc_) l.init_he(rng);
  const int l = arch_.num_classes;
  std::normal_distribution<double> dist(0.0, arch_.head_init_std > 0 ? arch_.head_init_std : 1.0);
  for (auto& h : heads_) {
    if (arch_.head_init_std > 0) {
      for (Eigen::Index i = 0; i < h.weight.value.size(); ++i)
        h.weight.value.data()[i] = static_cast<T>(dist(rng));
    } else {
      h.weight.value.setZero();
    }
    h.bias.value.setZero();
    for (int j = 0; j < l; ++j) h.bias.value(j * l + j, 0) = static_cast<T>(arch_.gamma);
  }
}

template <typename T>
std::vector<Mat<T>> AnnotationNet<T>::forward(const nn::Feature<T>& input, Tape& tape) const {
  instrumentation::count_cm_tm();
  tape.enc_cache.assign(enc_.size(), {});
  tape.enc_out.assign(enc_.size(), {});
  tape.head_cache.assign(heads_.size(), {});
  const nn::Feature<T>* cur = &input;
  for (std::size_t k = 0; k < enc_.size(); ++k) {
    tape.enc_out[k] = enc_[k].forward(*cur, tape.enc_cache[k]);
    nn::relu_inplace(tape.enc_out[k].x);
    cur = &tape.enc_out[k];
  }
  std::vector<Mat<T>> out;
  out.reserve(heads_.size());
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    out.push_back(heads_[h].forward(*cur, tape.head_cache[h]).x);
  }
  return out;
}

template <typename T>
void AnnotationNet<T>::backward(const Tape& tape, const std::vector<Mat<T>>& dlogits) {
  const auto& top = tape.enc_out.back();
  Mat<T> g = Mat<T>::Zero(top.x.rows(), top.x.cols());
  bool any = false;
  for (std::size_t h = 0; h < heads_.size() && h < dlogits.size(); ++h) {
    if (dlogits[h].size() == 0) continue;
    g += heads_[h].backward(tape.head_cache[h], dlogits[h]);
    any = true;
  }
  if (!any) return;
  for (std::size_t k = enc_.size(); k-- > 0;) {
    g = nn::relu_backward(tape.enc_out[k].x, g);
    g = enc_[k].backward(tape.enc_cache[k], g);
  }
}

template <typename T>
std::vector<nn::Param<T>*> AnnotationNet<T>::params() {
  std::vector<nn::Param<T>*> out;
  for (auto& l : enc_) out.insert(out.end(), {&l.weight, &l.bias});
  for (auto& l : heads_) out.insert(out.end(), {&l.weight, &l.bias});
  return out;
}

template <typename T>
std::vector<const nn::Param<T>*> AnnotationNet<T>::params() const {
  auto mut = const_cast<AnnotationNet*>(this)->params();
  return {mut.begin(), mut.end()};
}

// ---------------------------------------------------------------------------
// Model

namespace {
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace

template <typename T>
Model<T>::Model(const ArchDescriptor& a, std::uint64_t s) : arch(a), seed(s), seg(a), ann(a) {
  arch.validate();
  std::mt19937_64 seg_rng(derive_seed(s, 1));
  std::mt19937_64 ann_rng(derive_seed(s, 2));
  seg.init(seg_rng);
  ann.init(ann_rng);
}

template <typename T>
std::vector<nn::Param<T>*> Model<T>::params() {
  auto out = seg.params();
  auto a = ann.params();
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

template <typename T>
std::vector<const nn::Param<T>*> Model<T>::params() const {
  auto out = seg.params();
  auto a = ann.params();
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : params()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename T>
int Model<T>::head_index(Branch branch, int source_index) const {
  const int npos = static_cast<int>(arch.pos_sources.size());
  const int nneg = static_cast<int>(arch.neg_sources.size());
  const int limit = branch == Branch::objective ? npos : nneg;
  if (source_index < 0 || source_index >= limit) {
    throw ValidationError("no confusion head for source index " + std::to_string(source_index));
  }
  return branch == Branch::objective ? source_index : npos + source_index;
}

template <typename T>
nn::Feature<T> make_input(std::span<const Image* const> images) {
  if (images.empty()) throw ValidationError("make_input: empty batch");
  const Image& first = *images.front();
  nn::Feature<T> f;
  f.dims = {static_cast<int>(images.size()), first.height, first.width};
  f.x.resize(first.channels, f.dims.pixels());
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& im = *images[b];
    if (im.height != first.height || im.width != first.width || im.channels != first.channels) {
      throw ShapeError("make_input: images in a batch must share a shape");
    }
    const Eigen::Index base = static_cast<Eigen::Index>(b) * im.height * im.width;
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x)
        for (int c = 0; c < im.channels; ++c)
          f.x(c, base + y * im.width + x) = static_cast<T>(im.intensity(y, x, c));
  }
  return f;
}

namespace {
void check_image(const ArchDescriptor& a, const Image& im) {
  if (im.height != a.height || im.width != a.width || im.channels != a.in_channels) {
    throw ShapeError("image is " + std::to_string(im.height) + "x" + std::to_string(im.width) +
                     "x" + std::to_string(im.channels) + ", architecture expects " +
                     std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                     std::to_string(a.in_channels));
  }
}
}  // namespace

template <typename T>
ProbMapT<T> seg_forward(const Model<T>& model, const Image& image) {
  check_image(model.arch, image);
  const Image* ptr = &image;
  const auto input = make_input<T>(std::span<const Image* const>(&ptr, 1));
  typename SegNet<T>::Tape tape;
  const Mat<T> logits = model.seg.forward(input, tape);
  return {1, image.height, image.width, model.arch.num_classes, softmax_columns(logits)};
}

template <typename T>
ConfusionMapStackT<T> cm_forward(const Model<T>& model, const Image& image, Branch branch,
                                 int source_index) {
  check_image(model.arch, image);
  const int head = model.head_index(branch, source_index);
  const Image* ptr = &image;
  const auto input = make_input<T>(std::span<const Image* const>(&ptr, 1));
  typename AnnotationNet<T>::Tape tape;
  const auto logits = model.ann.forward(input, tape);
  return {1, image.height, image.width, model.arch.num_classes,
          cm_softmax(logits[head], model.arch.num_classes)};
}

#define COARSESEG_MODEL_INSTANTIATE(T)                                                      \
  template ProbMapT<T> noisy_prediction<T>(const ConfusionMapStackT<T>&, const ProbMapT<T>&); \
  template ProbMapT<T> complementary_prediction<T>(const TransitionMatrix&, const ProbMapT<T>&); \
  template bool is_valid_prob_map<T>(const ProbMapT<T>&, double);                           \
  template bool is_column_stochastic<T>(const ConfusionMapStackT<T>&, double);              \
  template Mat<T> softmax_columns<T>(const Mat<T>&);                                        \
  template Mat<T> softmax_columns_backward<T>(const Mat<T>&, const Mat<T>&);                \
  template Mat<T> cm_softmax<T>(const Mat<T>&, int);                                        \
  template Mat<T> cm_softmax_backward<T>(const Mat<T>&, const Mat<T>&, int);                \
  template class SegNet<T>;                                                                 \
  template class AnnotationNet<T>;                                                          \
  template struct Model<T>;                                                                 \
  template nn::Feature<T> make_input<T>(std::span<const Image* const>);                     \
  template ProbMapT<T> seg_forward<T>(const Model<T>&, const Image&);                       \
  template ConfusionMapStackT<T> cm_forward<T>(const Model<T>&, const Image&, Branch, int);

COARSESEG_MODEL_INSTANTIATE(float)
COARSESEG_MODEL_INSTANTIATE(double)

#undef COARSESEG_MODEL_INSTANTIATE

}  // namespace coarseseg
