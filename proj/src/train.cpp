#include "coarseseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "coarseseg/io.hpp"

namespace coarseseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

}  // namespace

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::weak: return "weak";
    case TrainMode::strong: return "strong";
    case TrainMode::semi: return "semi";
  }
  return "weak";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "weak") return TrainMode::weak;
  if (s == "strong") return TrainMode::strong;
  if (s == "semi") return TrainMode::semi;
  throw ValidationError("unknown mode '" + s + "' (expected weak, strong or semi)");
}

// ---------------------------------------------------------------------------
// Config

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("optimizer.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ValidationError("optimizer.momentum must be in [0, 1)");
  }
  if (!(ann_lr_scale >= 0.0) || !std::isfinite(ann_lr_scale)) {
    throw ValidationError("optimizer.ann_lr_scale must be >= 0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
    throw ValidationError("optimizer: betas must be in [0, 1) and eps > 0");
  }
}

json OptimizerConfig::to_json() const {
  if (kind == Kind::sgd) {
    return {{"type", "sgd"}, {"lr", lr}, {"momentum", momentum}, {"ann_lr_scale", ann_lr_scale}};
  }
  return {{"type", "adam"}, {"lr", lr},   {"beta1", beta1},
          {"beta2", beta2}, {"eps", eps}, {"ann_lr_scale", ann_lr_scale}};
}

OptimizerConfig OptimizerConfig::from_json(const json& j) {
  OptimizerConfig c;
  const std::string type = j.value("type", std::string("adam"));
  if (type == "adam") {
    c.kind = Kind::adam;
  } else if (type == "sgd") {
    c.kind = Kind::sgd;
  } else {
    throw ValidationError("optimizer.type must be adam or sgd, got '" + type + "'");
  }
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.ann_lr_scale = j.value("ann_lr_scale", c.ann_lr_scale);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  loss.validate();
  optimizer.validate();
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (eval_every < 1) throw ValidationError("eval_every must be >= 1");
  if (seeds.empty()) throw ValidationError("seeds must not be empty");
  for (int l : levels) {
    if (l < 1 || l > 5) throw ValidationError("levels must lie in 1..5");
  }
  if (transition == TransitionMode::custom && transition_values.size() == 0) {
    throw ValidationError("transition.mode custom needs transition.values");
  }
}

json TrainConfig::to_json() const {
  json tm = {{"mode", transition == TransitionMode::uniform ? "uniform" : "custom"}};
  if (transition == TransitionMode::custom) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < transition_values.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index k = 0; k < transition_values.cols(); ++k) row.push_back(transition_values(i, k));
      rows.push_back(row);
    }
    tm["values"] = rows;
  }
  return {{"dataset", dataset.string()},
          {"val_dataset", val_dataset.string()},
          {"test_dataset", test_dataset.string()},
          {"output", output.string()},
          {"mode", to_string(mode)},
          {"loss", loss.to_json()},
          {"optimizer", optimizer.to_json()},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"eval_every", eval_every},
          {"arch",
           {{"seg_base_channels", arch.seg_base_channels},
            {"seg_depth", arch.seg_depth},
            {"ann_channels", arch.ann_channels},
            {"ann_layers", arch.ann_layers},
            {"gamma", arch.gamma},
            {"head_init_std", arch.head_init_std}}},
          {"transition", tm},
          {"pos_sources", pos_sources},
          {"neg_sources", neg_sources},
          {"freeze_identity_cm", freeze_identity_cm},
          {"deterministic", deterministic},
          {"seeds", seeds},
          {"levels", levels},
          {"noise_seed", noise_seed}};
}

TrainConfig TrainConfig::from_json(const json& j, const fs::path& base_dir) {
  static const std::set<std::string> known = {
      "dataset", "val_dataset", "test_dataset", "output",      "mode",       "loss",
      "optimizer", "epochs",    "batch_size",   "seed",        "eval_every", "arch",
      "transition", "pos_sources", "neg_sources", "freeze_identity_cm", "deterministic",
      "seeds",    "levels",     "noise_seed"};
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ValidationError("unknown config key '" + it.key() + "'");
  }
  TrainConfig c;
  try {
    c.dataset = resolve(j.value("dataset", std::string()), base_dir);
    c.val_dataset = resolve(j.value("val_dataset", std::string()), base_dir);
    c.test_dataset = resolve(j.value("test_dataset", std::string()), base_dir);
    const fs::path out = j.value("output", std::string("runs/default"));
    const char* root = std::getenv("COARSESEG_OUTPUT_ROOT");
    c.output = (root && *root && out.is_relative()) ? fs::path(root) / out : resolve(out, base_dir);
    c.mode = train_mode_from_string(j.value("mode", std::string("weak")));
    if (j.contains("loss")) c.loss = LossConfig::from_json(j.at("loss"));
    if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    if (j.contains("arch")) {
      const auto& a = j.at("arch");
      c.arch.seg_base_channels = a.value("seg_base_channels", c.arch.seg_base_channels);
      c.arch.seg_depth = a.value("seg_depth", c.arch.seg_depth);
      c.arch.ann_channels = a.value("ann_channels", c.arch.ann_channels);
      c.arch.ann_layers = a.value("ann_layers", c.arch.ann_layers);
      c.arch.gamma = a.value("gamma", c.arch.gamma);
      c.arch.head_init_std = a.value("head_init_std", c.arch.head_init_std);
    }
    if (j.contains("transition")) {
      const auto& t = j.at("transition");
      const std::string mode = t.value("mode", std::string("uniform"));
      if (mode == "uniform") {
        c.transition = TransitionMode::uniform;
      } else if (mode == "custom") {
        c.transition = TransitionMode::custom;
        const auto& rows = t.at("values");
        const auto n = static_cast<Eigen::Index>(rows.size());
        c.transition_values.resize(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
          if (static_cast<Eigen::Index>(rows[r].size()) != n) {
            throw ValidationError("transition.values must be square");
          }
          for (Eigen::Index k = 0; k < n; ++k) c.transition_values(r, k) = rows[r][k].get<double>();
        }
      } else {
        throw ValidationError("transition.mode must be uniform or custom");
      }
    }
    c.pos_sources = j.value("pos_sources", c.pos_sources);
    c.neg_sources = j.value("neg_sources", c.neg_sources);
    c.freeze_identity_cm = j.value("freeze_identity_cm", c.freeze_identity_cm);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.seeds = j.value("seeds", c.seeds);
    c.levels = j.value("levels", c.levels);
    c.noise_seed = j.value("noise_seed", c.noise_seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what(), "E_CONFIG");
  }
  c.validate();
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  json* node = &config;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ValidationError("--set: '" + key + "' crosses a non-object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ValidationError("--set: '" + key + "' crosses a non-object");
  (*node)[parts.back()] = parsed;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
Optimizer<T>::Optimizer(const OptimizerConfig& cfg, const std::vector<nn::Param<T>*>& params)
    : cfg_(cfg) {
  cfg_.validate();
  for (const auto* p : params) {
    m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    if (cfg_.kind == OptimizerConfig::Kind::adam) {
      v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  scale_.assign(params.size(), T(1));
}

template <typename T>
void Optimizer<T>::set_lr_scale(std::size_t index, double scale) {
  scale_.at(index) = static_cast<T>(scale);
}

template <typename T>
void Optimizer<T>::step(const std::vector<nn::Param<T>*>& params) {
  if (params.size() != m_.size()) throw ValidationError("optimizer: parameter list changed");
  ++steps_;
  const T lr = static_cast<T>(cfg_.lr);
  if (cfg_.kind == OptimizerConfig::Kind::sgd) {
    const T mu = static_cast<T>(cfg_.momentum);
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = mu * m_[k] + params[k]->grad;
      params[k]->value -= (lr * scale_[k]) * m_[k];
    }
    return;
  }
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)));
  const T eps = static_cast<T>(cfg_.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& g = params[k]->grad;
    m_[k] = b1 * m_[k] + (T(1) - b1) * g;
    v_[k] = b2 * v_[k] + (T(1) - b2) * g.cwiseProduct(g);
    params[k]->value.array() -=
        (lr * scale_[k]) * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps);
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

// ---------------------------------------------------------------------------
// Trainer

ArchDescriptor derive_arch(const TrainConfig& cfg, const SegDataset& train) {
  if (train.samples.empty()) throw ValidationError("training dataset is empty", "E_EMPTY");
  ArchDescriptor a = cfg.arch;
  const Image& im = train.samples.front().image;
  a.in_channels = im.channels;
  a.height = im.height;
  a.width = im.width;
  a.num_classes = train.space.num_classes;
  if (cfg.mode == TrainMode::strong) {
    a.pos_sources.clear();
    a.neg_sources.clear();
  } else {
    const auto available_pos = train.pos_sources();
    const auto available_neg = train.neg_sources();
    a.pos_sources = cfg.pos_sources.empty() ? available_pos : cfg.pos_sources;
    a.neg_sources = cfg.neg_sources.empty() ? available_neg : cfg.neg_sources;
    for (const auto& s : a.pos_sources) {
      if (!std::binary_search(available_pos.begin(), available_pos.end(), s)) {
        throw ValidationError("positive source '" + s + "' not present in the dataset",
                              "E_UNKNOWN_SOURCE");
      }
    }
    for (const auto& s : a.neg_sources) {
      if (!std::binary_search(available_neg.begin(), available_neg.end(), s)) {
        throw ValidationError("negative source '" + s + "' not present in the dataset",
                              "E_UNKNOWN_SOURCE");
      }
    }
  }
  a.validate();
  return a;
}

namespace {

bool uses_coarse(const SegSample& s, const ArchDescriptor& arch) {
  for (const auto& name : arch.pos_sources)
    if (s.find_pos(name)) return true;
  for (const auto& name : arch.neg_sources)
    if (s.find_neg(name)) return true;
  return false;
}

bool has_dense_gt(const SegSample& s) {
  if (s.gt_label.height != s.image.height || s.gt_label.width != s.image.width) return false;
  return std::any_of(s.gt_label.data.begin(), s.gt_label.data.end(),
                     [](std::uint8_t v) { return v != kIgnore; });
}

}  // namespace

void check_dataset_for_mode(const SegDataset& ds, TrainMode mode, const ArchDescriptor& arch) {
  if (ds.samples.empty()) throw ValidationError("training dataset is empty", "E_EMPTY");
  for (const auto& s : ds.samples) {
    if (s.image.height != arch.height || s.image.width != arch.width ||
        s.image.channels != arch.in_channels) {
      throw ShapeError("sample '" + s.id + "' differs in shape from the first sample");
    }
  }
  std::size_t coarse = 0, dense_only = 0;
  for (const auto& s : ds.samples) {
    const bool c = uses_coarse(s, arch);
    coarse += c;
    if (!c) {
      if (mode != TrainMode::weak && !has_dense_gt(s)) {
        throw ValidationError("sample '" + s.id + "' has no dense mask", "E_MODE_DATA");
      }
      ++dense_only;
    }
  }
  if (mode == TrainMode::strong) return;
  if (coarse == 0) {
    throw ValidationError(to_string(mode) + " mode needs coarse annotations", "E_MODE_DATA");
  }
  if (mode == TrainMode::semi && dense_only == 0) {
    throw ValidationError("semi mode needs samples labelled by dense masks only", "E_MODE_DATA");
  }
}

Trainer::Trainer(const TrainConfig& cfg, const SegDataset& train)
    : cfg_(cfg), data_(train) {
  cfg_.validate();
  const ArchDescriptor arch = derive_arch(cfg_, data_);
  check_dataset_for_mode(data_, cfg_.mode, arch);
  model_ = Model<float>(arch, cfg_.seed);
  opt_ = Optimizer<float>(cfg_.optimizer, model_.params());
  apply_lr_scales();
  tm_ = build_transition_matrix(arch.num_classes, cfg_.transition, cfg_.transition_values);
}

Trainer::Trainer(const TrainConfig& cfg, const SegDataset& train, Model<float> model,
                 Optimizer<float> opt, int completed_epochs)
    : cfg_(cfg), data_(train), model_(std::move(model)), opt_(std::move(opt)),
      epoch_(completed_epochs) {
  cfg_.validate();
  const ArchDescriptor arch = derive_arch(cfg_, data_);
  if (!(arch == model_.arch)) {
    throw ValidationError("architecture descriptor mismatch: " + model_.arch.diff(arch),
                          "E_ARCH_MISMATCH");
  }
  check_dataset_for_mode(data_, cfg_.mode, arch);
  apply_lr_scales();
  tm_ = build_transition_matrix(arch.num_classes, cfg_.transition, cfg_.transition_values);
}

void Trainer::apply_lr_scales() {
  const std::size_t nseg = model_.seg.params().size();
  const std::size_t total = model_.params().size();
  for (std::size_t k = nseg; k < total; ++k) opt_.set_lr_scale(k, cfg_.optimizer.ann_lr_scale);
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
  std::vector<std::size_t> order(data_.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(mix(cfg_.seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t k = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[k]);
  }
  return order;
}

BatchLoss Trainer::batch_loss(std::span<const std::size_t> indices, double lambda, bool backward) {
  const ArchDescriptor& arch = model_.arch;
  const int l = arch.num_classes;
  const Eigen::Index hw = static_cast<Eigen::Index>(arch.height) * arch.width;
  const std::size_t b = indices.size();
  if (b == 0) throw ValidationError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(b);

  std::vector<const Image*> images;
  std::vector<bool> weak(b);
  bool any_weak = false;
  for (std::size_t k = 0; k < b; ++k) {
    const SegSample& s = data_.samples[indices[k]];
    images.push_back(&s.image);
    weak[k] = cfg_.mode == TrainMode::weak ||
              (cfg_.mode == TrainMode::semi && uses_coarse(s, arch));
    any_weak = any_weak || weak[k];
  }
  if (backward) model_.zero_grad();

  const auto input = make_input<float>(images);
  typename SegNet<float>::Tape seg_tape;
  const Mat<float> logits = model_.seg.forward(input, seg_tape);
  const Mat<float> p = softmax_columns(logits);
  Mat<float> dp;
  if (backward) dp = Mat<float>::Zero(p.rows(), p.cols());

  const int npos = static_cast<int>(arch.pos_sources.size());
  const int nneg = static_cast<int>(arch.neg_sources.size());
  const bool frozen = cfg_.freeze_identity_cm;
  const bool run_ann = any_weak && !frozen && (npos + nneg) > 0;
  typename AnnotationNet<float>::Tape ann_tape;
  std::vector<Mat<float>> cms, dcms;
  Mat<float> identity;
  if (run_ann) {
    instrumentation::count_cm_tm();
    const auto cm_logits = model_.ann.forward(input, ann_tape);
    for (const auto& lg : cm_logits) {
      cms.push_back(cm_softmax(lg, l));
      if (backward) dcms.push_back(Mat<float>::Zero(lg.rows(), lg.cols()));
    }
  } else if (any_weak) {
    identity = Mat<float>::Zero(static_cast<Eigen::Index>(l) * l, hw);
    for (int i = 0; i < l; ++i) identity.row(i * l + i).setOnes();
  }

  BatchLoss out;
  const double w_obj = cfg_.loss.w_obj, w_comp = cfg_.loss.w_comp;
  for (std::size_t k = 0; k < b; ++k) {
    const SegSample& s = data_.samples[indices[k]];
    const Eigen::Index base = static_cast<Eigen::Index>(k) * hw;
    ColsRef<float> pk = p.middleCols(base, hw);
    std::optional<GradRef<float>> dpk;
    if (backward) dpk.emplace(dp.middleCols(base, hw));
    GradRef<float>* dp_ptr = dpk ? &*dpk : nullptr;

    if (!weak[k]) {
      const CeValue ce = masked_ce<float>(pk, s.gt_label.data, dp_ptr, inv_b);
      out.strong_part += inv_b * ce.value;
      out.breakdown.ce_mask += inv_b * ce.value;
      out.breakdown.pixels_mask += ce.count;
      continue;
    }

    auto branch = [&](bool positive, double weight) {
      LossFragment frag;
      if (weight == 0.0) return frag;
      const auto& names = positive ? arch.pos_sources : arch.neg_sources;
      std::vector<ColsRef<float>> refs;
      std::vector<const LabelMap*> targets;
      std::vector<std::optional<GradRef<float>>> dslots;
      refs.reserve(names.size());
      dslots.reserve(names.size());
      ImageGrads<float> grads;
      grads.dp = dp_ptr;
      for (std::size_t n = 0; n < names.size(); ++n) {
        const CoarseMap* cm = positive ? s.find_pos(names[n]) : s.find_neg(names[n]);
        if (!cm) continue;
        const int head = positive ? static_cast<int>(n) : npos + static_cast<int>(n);
        targets.push_back(&cm->labels);
        if (run_ann) {
          refs.emplace_back(cms[head].middleCols(base, hw));
          if (backward) dslots.emplace_back(dcms[head].middleCols(base, hw));
          else dslots.emplace_back();
        } else {
          refs.emplace_back(identity);
          dslots.emplace_back();
        }
      }
      if (targets.empty()) return frag;
      for (auto& slot : dslots) grads.dcm.push_back(slot ? &*slot : nullptr);
      const double scale = inv_b * weight;
      ImageGrads<float>* g = backward ? &grads : nullptr;
      if (positive) {
        frag = loss_obj<float>(pk, l, refs, targets, lambda, g, scale,
                               cfg_.loss.break_trace_gradient);
      } else {
        frag = loss_comp<float>(pk, l, refs, tm_, targets, lambda, g, scale,
                                cfg_.loss.break_trace_gradient);
      }
      return frag;
    };
    const LossFragment obj = branch(true, w_obj);
    const LossFragment comp = branch(false, w_comp);
    LossBreakdown bd = loss_final(obj, comp, cfg_.loss, lambda);
    bd *= inv_b;
    out.weak_part += bd.total;
    out.breakdown += bd;
  }
  out.breakdown.total = out.strong_part + out.weak_part;
  out.breakdown.lambda = lambda;

  if (!std::isfinite(out.breakdown.total)) {
    std::vector<std::string> ids;
    for (auto i : indices) ids.push_back(data_.samples[i].id);
    std::string joined;
    for (const auto& id : ids) joined += (joined.empty() ? "" : ",") + id;
    throw NonFiniteLossError(epoch_ + 1, ids,
                             "non-finite loss in epoch " + std::to_string(epoch_ + 1) +
                                 ", batch samples [" + joined + "]");
  }

  if (backward) {
    model_.seg.backward(seg_tape, softmax_columns_backward(p, dp));
    if (run_ann) {
      std::vector<Mat<float>> dlogits(cms.size());
      for (int h = 0; h < static_cast<int>(cms.size()); ++h) {
        const bool active = h < npos ? w_obj != 0.0 : w_comp != 0.0;
        if (active) dlogits[h] = cm_softmax_backward(cms[h], dcms[h], l);
      }
      model_.ann.backward(ann_tape, dlogits);
    }
  }
  return out;
}

LossBreakdown Trainer::run_epoch(const std::function<void(const BatchLoss&)>& on_step) {
  const int epoch = epoch_ + 1;
  const auto order = epoch_order(epoch);
  const double lambda = cfg_.loss.lambda_at(epoch);
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  LossBreakdown mean;
  std::size_t batches = 0;
  const auto params = model_.params();
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t n = std::min(bs, order.size() - start);
    const BatchLoss bl =
        batch_loss(std::span<const std::size_t>(order.data() + start, n), lambda, true);
    opt_.step(params);
    mean += bl.breakdown;
    ++batches;
    if (on_step) on_step(bl);
  }
  mean *= 1.0 / static_cast<double>(batches);
  mean.lambda = lambda;
  epoch_ = epoch;
  return mean;
}

LossBreakdown Trainer::dataset_loss(double lambda) {
  LossBreakdown sum;
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  const std::size_t n_total = data_.samples.size();
  std::vector<std::size_t> idx(n_total);
  for (std::size_t i = 0; i < n_total; ++i) idx[i] = i;
  for (std::size_t start = 0; start < n_total; start += bs) {
    const std::size_t n = std::min(bs, n_total - start);
    LossBreakdown bd =
        batch_loss(std::span<const std::size_t>(idx.data() + start, n), lambda, false).breakdown;
    bd *= static_cast<double>(n);
    sum += bd;
  }
  sum *= 1.0 / static_cast<double>(n_total);
  sum.lambda = lambda;
  return sum;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

template <typename V>
void put(std::vector<std::uint8_t>& buf, V v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(V));
}

void put_matrix(std::vector<std::uint8_t>& buf, const Mat<float>& m) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.cols()));
  const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
  buf.insert(buf.end(), p, p + sizeof(float) * static_cast<std::size_t>(m.size()));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  std::string where;

  void need(std::size_t n) {
    if (pos + n > buf.size()) throw IoError(where + ": truncated checkpoint", "E_CHECKPOINT");
  }
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  Mat<float> matrix() {
    const auto r = get<std::uint32_t>(), c = get<std::uint32_t>();
    const std::size_t bytes = sizeof(float) * static_cast<std::size_t>(r) * c;
    need(bytes);
    Mat<float> m(r, c);
    std::memcpy(m.data(), buf.data() + pos, bytes);
    pos += bytes;
    return m;
  }
};

}  // namespace

void save_checkpoint(const fs::path& path, const Model<float>& model, Optimizer<float>& opt,
                     int epoch) {
  std::vector<std::uint8_t> buf(kMagic, kMagic + 8);
  put<std::uint32_t>(buf, kCheckpointFormat);
  put<std::int32_t>(buf, epoch);
  put<std::uint64_t>(buf, model.seed);
  put<std::int64_t>(buf, opt.steps());
  const auto params = model.params();
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p->name.size()));
    buf.insert(buf.end(), p->name.begin(), p->name.end());
    put_matrix(buf, p->value);
  }
  for (auto* state : {&opt.first(), &opt.second()}) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(state->size()));
    for (const auto& m : *state) put_matrix(buf, m);
  }
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  io::write_bytes_atomic(path, buf);
  const json sidecar = {{"format", kCheckpointFormat},
                        {"L", model.arch.num_classes},
                        {"arch", model.arch.to_json()},
                        {"seed", model.seed},
                        {"epoch", epoch},
                        {"dtype", "float32"},
                        {"optimizer", opt.config().to_json()},
                        {"parameter_count", model.parameter_count()}};
  io::write_text_atomic(fs::path(path.string() + ".json"), sidecar.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path side = path.string() + ".json";
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string(), "E_CHECKPOINT");
  if (!fs::exists(side)) {
    throw IoError("checkpoint sidecar not found: " + side.string(), "E_CHECKPOINT");
  }
  json meta;
  try {
    meta = json::parse(io::read_text(side));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint sidecar " + side.string() + ": " + e.what(), "E_CHECKPOINT");
  }
  if (meta.value("format", -1) != kCheckpointFormat) {
    throw IoError("unsupported checkpoint format in " + side.string(), "E_CHECKPOINT");
  }
  const auto bytes = io::read_bytes(path);
  Reader rd{bytes, 0, path.string()};
  rd.need(8);
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw IoError(path.string() + ": not a checkpoint file", "E_CHECKPOINT");
  }
  rd.pos = 8;
  if (rd.get<std::uint32_t>() != kCheckpointFormat) {
    throw IoError(path.string() + ": unsupported checkpoint format", "E_CHECKPOINT");
  }
  Checkpoint ck;
  ck.epoch = rd.get<std::int32_t>();
  const auto seed = rd.get<std::uint64_t>();
  const auto steps = rd.get<std::int64_t>();
  ck.model = Model<float>(ArchDescriptor::from_json(meta.at("arch")), seed);
  auto params = ck.model.params();
  if (rd.get<std::uint32_t>() != params.size()) {
    throw IoError(path.string() + ": parameter count disagrees with descriptor", "E_CHECKPOINT");
  }
  for (auto* p : params) {
    const auto len = rd.get<std::uint32_t>();
    rd.need(len);
    const std::string name(reinterpret_cast<const char*>(bytes.data() + rd.pos), len);
    rd.pos += len;
    Mat<float> m = rd.matrix();
    if (name != p->name || m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw IoError(path.string() + ": parameter '" + name + "' disagrees with descriptor",
                    "E_CHECKPOINT");
    }
    p->value = std::move(m);
  }
  ck.optimizer = Optimizer<float>(OptimizerConfig::from_json(meta.at("optimizer")), params);
  for (auto* state : {&ck.optimizer.first(), &ck.optimizer.second()}) {
    const auto n = rd.get<std::uint32_t>();
    if (n != state->size()) throw IoError(path.string() + ": optimizer state mismatch", "E_CHECKPOINT");
    for (auto& m : *state) m = rd.matrix();
  }
  ck.optimizer.set_steps(steps);
  return ck;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

json train_row(int epoch, const LossBreakdown& b) {
  json row = {{"epoch", epoch}, {"split", "train"}, {"miou", nullptr}};
  row.update(to_json(b));
  return row;
}

json val_row(int epoch, const EvalReport& r, double lambda) {
  return {{"epoch", epoch},   {"split", "val"},  {"miou", r.miou},   {"loss_total", r.gt_ce},
          {"ce_obj", 0.0},    {"trace_obj", 0.0}, {"ce_comp", 0.0},  {"trace_comp", 0.0},
          {"lambda", lambda}};
}

std::string jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> rows;
  if (!fs::exists(path)) return rows;
  std::istringstream in(io::read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

std::string ckpt_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", epoch);
  return buf;
}

struct Sink {
  fs::path dir;
  std::vector<json> rows;
  std::optional<double> best_miou;
  fs::path best;
  fs::path last;
  std::vector<fs::path> checkpoints;
  std::optional<double> initial_loss;
};

RunResult execute(Trainer& tr, const SegDataset* val, const SegDataset* test, bool keep_steps,
                  Sink* sink) {
  const TrainConfig& cfg = tr.config();
  RunResult r;
  const double lam_final = cfg.loss.lambda_at(cfg.epochs);
  r.initial_train_loss = (sink && sink->initial_loss) ? *sink->initial_loss
                                                      : tr.dataset_loss(lam_final).total;
  if (sink) sink->initial_loss = r.initial_train_loss;
  std::function<void(const BatchLoss&)> on_step;
  if (keep_steps) on_step = [&r](const BatchLoss& b) { r.steps.push_back(b); };

  for (int e = tr.completed_epochs() + 1; e <= cfg.epochs; ++e) {
    LossBreakdown bd;
    try {
      bd = tr.run_epoch(on_step);
    } catch (const NonFiniteLossError& err) {
      if (sink) {
        const json dump = {{"epoch", err.epoch()}, {"sample_ids", err.sample_ids()},
                           {"message", err.what()}};
        io::write_text_atomic(sink->dir / "nan_dump.json", dump.dump(2) + "\n");
      }
      throw;
    }
    r.metrics.push_back(train_row(e, bd));
    const bool eval_point = e % cfg.eval_every == 0 || e == cfg.epochs;
    std::optional<EvalReport> rep;
    if (val && eval_point) {
      rep = evaluate(tr.model(), *val, "val");
      r.metrics.push_back(val_row(e, *rep, bd.lambda));
      r.final_val = rep;
    }
    if (sink) {
      if (eval_point) {
        const fs::path ck = sink->dir / "checkpoints" / ckpt_name(e);
        save_checkpoint(ck, tr.model(), tr.optimizer(), e);
        sink->checkpoints.push_back(ck);
        sink->last = ck;
        if (!rep) {
          sink->best = ck;
        } else if (!sink->best_miou || rep->miou > *sink->best_miou) {
          sink->best_miou = rep->miou;
          sink->best = ck;
        }
      }
      for (std::size_t k = r.metrics.size() - (rep ? 2 : 1); k < r.metrics.size(); ++k) {
        sink->rows.push_back(r.metrics[k]);
      }
      io::write_text_atomic(sink->dir / "metrics.jsonl", jsonl(sink->rows));
    }
  }
  r.final_train_loss = tr.dataset_loss(lam_final).total;
  if (test) r.test = evaluate(tr.model(), *test, "test");
  r.model = tr.model();
  return r;
}

struct LoadedData {
  SegDataset train, val, test;
  bool has_val = false, has_test = false;
};

LoadedData load_run_data(const TrainConfig& cfg) {
  if (cfg.dataset.empty()) throw ValidationError("config: dataset path is required");
  LoadedData d;
  d.train = load_dataset(cfg.dataset);
  if (!cfg.val_dataset.empty()) d.val = load_dataset(cfg.val_dataset), d.has_val = true;
  if (!cfg.test_dataset.empty()) d.test = load_dataset(cfg.test_dataset), d.has_test = true;
  return d;
}

json report_json(const TrainConfig& cfg, const RunResult& r, const Sink& sink,
                 const Model<float>& model) {
  auto rel = [&](const fs::path& p) {
    return p.empty() ? json(nullptr) : json(fs::relative(p, sink.dir).string());
  };
  return {{"format", 1},
          {"mode", to_string(cfg.mode)},
          {"seed", cfg.seed},
          {"epochs", cfg.epochs},
          {"parameter_count", model.parameter_count()},
          {"arch", model.arch.to_json()},
          {"initial_train_loss", r.initial_train_loss},
          {"final_train_loss", r.final_train_loss},
          {"best_checkpoint", rel(sink.best)},
          {"best_val_miou", sink.best_miou ? json(*sink.best_miou) : json(nullptr)},
          {"final_checkpoint", rel(sink.last)},
          {"final_val", r.final_val ? r.final_val->to_json() : json(nullptr)},
          {"test", r.test ? r.test->to_json() : json(nullptr)}};
}

RunArtifacts finish(const TrainConfig& cfg, const RunResult& r, Sink& sink,
                    const Model<float>& model) {
  RunArtifacts a;
  a.dir = sink.dir;
  a.metrics = sink.dir / "metrics.jsonl";
  a.report = sink.dir / "report.json";
  a.resolved_config = sink.dir / "config.resolved.json";
  a.checkpoints = sink.checkpoints;
  a.best_checkpoint = sink.best;
  a.final_checkpoint = sink.last;
  a.report_json = report_json(cfg, r, sink, model);
  io::write_text_atomic(a.report, a.report_json.dump(2) + "\n");
  return a;
}

}  // namespace

RunResult run_in_memory(const TrainConfig& cfg, const SegDataset& train, const SegDataset* val,
                        const SegDataset* test, bool keep_steps) {
  Trainer tr(cfg, train);
  return execute(tr, val, test, keep_steps, nullptr);
}

RunArtifacts train(const TrainConfig& cfg, bool force) {
  cfg.validate();
  if (cfg.output.empty()) throw ValidationError("config: output directory is required");
  if (fs::exists(cfg.output) && !fs::is_empty(cfg.output)) {
    if (!force) {
      throw ValidationError("output directory " + cfg.output.string() +
                                " is not empty (use --force to overwrite)",
                            "E_EXISTS");
    }
    fs::remove_all(cfg.output);
  }
  const LoadedData d = load_run_data(cfg);
  Trainer tr(cfg, d.train);
  fs::create_directories(cfg.output / "checkpoints");
  io::write_text_atomic(cfg.output / "config.resolved.json", cfg.to_json().dump(2) + "\n");
  Sink sink;
  sink.dir = cfg.output;
  const RunResult r = execute(tr, d.has_val ? &d.val : nullptr, d.has_test ? &d.test : nullptr,
                              false, &sink);
  return finish(cfg, r, sink, tr.model());
}

RunArtifacts resume(const fs::path& checkpoint, const TrainConfig& cfg) {
  cfg.validate();
  Checkpoint ck = load_checkpoint(checkpoint);
  const LoadedData d = load_run_data(cfg);
  const ArchDescriptor expected = derive_arch(cfg, d.train);
  if (!(expected == ck.model.arch)) {
    throw ValidationError("checkpoint descriptor differs from config: " + ck.model.arch.diff(expected),
                          "E_ARCH_MISMATCH");
  }
  Sink sink;
  sink.dir = checkpoint.parent_path().parent_path();
  for (auto& row : read_jsonl(sink.dir / "metrics.jsonl")) {
    if (row.value("epoch", 0) > ck.epoch) continue;
    if (row.value("split", std::string()) == "val" && row["miou"].is_number()) {
      const double m = row["miou"].get<double>();
      const fs::path p = sink.dir / "checkpoints" / ckpt_name(row["epoch"].get<int>());
      if (fs::exists(p) && (!sink.best_miou || m > *sink.best_miou)) sink.best_miou = m, sink.best = p;
    }
    sink.rows.push_back(std::move(row));
  }
  for (int e = 1; e <= ck.epoch; ++e) {
    const fs::path p = sink.dir / "checkpoints" / ckpt_name(e);
    if (fs::exists(p)) sink.checkpoints.push_back(p);
  }
  sink.last = checkpoint;
  if (sink.best.empty()) sink.best = checkpoint;
  const fs::path report = sink.dir / "report.json";
  if (fs::exists(report)) {
    const json old = json::parse(io::read_text(report));
    if (old.contains("initial_train_loss") && old["initial_train_loss"].is_number()) {
      sink.initial_loss = old["initial_train_loss"].get<double>();
    }
  }
  io::write_text_atomic(sink.dir / "config.resolved.json", cfg.to_json().dump(2) + "\n");

  if (ck.epoch >= cfg.epochs) {
    sink.rows.push_back({{"epoch", ck.epoch},
                         {"split", "warning"},
                         {"miou", nullptr},
                         {"message", "checkpoint already at epoch " + std::to_string(ck.epoch) +
                                         " >= epochs " + std::to_string(cfg.epochs) +
                                         "; nothing to do"}});
    io::write_text_atomic(sink.dir / "metrics.jsonl", jsonl(sink.rows));
    RunArtifacts a;
    a.dir = sink.dir;
    a.metrics = sink.dir / "metrics.jsonl";
    a.report = report;
    a.resolved_config = sink.dir / "config.resolved.json";
    a.checkpoints = sink.checkpoints;
    a.best_checkpoint = sink.best;
    a.final_checkpoint = checkpoint;
    if (fs::exists(report)) a.report_json = json::parse(io::read_text(report));
    return a;
  }
  Trainer tr(cfg, d.train, std::move(ck.model), std::move(ck.optimizer), ck.epoch);
  const RunResult r = execute(tr, d.has_val ? &d.val : nullptr, d.has_test ? &d.test : nullptr,
                              false, &sink);
  return finish(cfg, r, sink, tr.model());
}

// ---------------------------------------------------------------------------
// Ablation

std::string to_string(AblationArm a) {
  switch (a) {
    case AblationArm::full: return "full";
    case AblationArm::without_negative: return "without_negative";
    case AblationArm::naive: return "naive";
  }
  return "full";
}

TrainConfig arm_config(const TrainConfig& base, AblationArm arm) {
  TrainConfig c = base;
  c.mode = TrainMode::weak;
  c.freeze_identity_cm = false;
  switch (arm) {
    case AblationArm::full: break;
    case AblationArm::without_negative: c.loss.w_comp = 0.0; break;
    case AblationArm::naive:
      c.loss.w_comp = 0.0;
      c.loss.lambda = 0.0;
      c.freeze_identity_cm = true;
      break;
  }
  return c;
}

SeedStats seed_stats(std::vector<double> values) {
  SeedStats s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  double sum = 0.0;
  for (double v : s.values) sum += v;
  s.mean = sum / static_cast<double>(s.values.size());
  if (s.values.size() > 1) {
    double ss = 0.0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.values.size() - 1));
  }
  return s;
}

std::vector<AblationRow> ablation_suite(const TrainConfig& base, const SegDataset& train,
                                        const SegDataset& test) {
  base.validate();
  std::vector<AblationRow> rows;
  for (AblationArm arm : {AblationArm::full, AblationArm::without_negative, AblationArm::naive}) {
    AblationRow row{arm, {}, {}, {}};
    std::vector<double> mious;
    for (std::uint64_t seed : base.seeds) {
      TrainConfig c = arm_config(base, arm);
      c.seed = seed;
      const RunResult r = run_in_memory(c, train, nullptr, &test);
      mious.push_back(r.test->miou);
      row.initial_train_loss.push_back(r.initial_train_loss);
      row.final_train_loss.push_back(r.final_train_loss);
    }
    row.miou = seed_stats(std::move(mious));
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<AblationRow>& table) {
  json rows = json::array();
  for (const auto& r : table) {
    rows.push_back({{"arm", to_string(r.arm)},
                    {"miou_mean", r.miou.mean},
                    {"miou_std", r.miou.std},
                    {"miou_per_seed", r.miou.values},
                    {"initial_train_loss", r.initial_train_loss},
                    {"final_train_loss", r.final_train_loss}});
  }
  return {{"rows", rows}};
}

json ablation_suite(const TrainConfig& base, bool force) {
  base.validate();
  if (base.test_dataset.empty()) throw ValidationError("ablate: config needs test_dataset");
  if (fs::exists(base.output / "ablation.json") && !force) {
    throw ValidationError(base.output.string() + "/ablation.json exists (use --force)", "E_EXISTS");
  }
  std::vector<AblationRow> rows;
  for (AblationArm arm : {AblationArm::full, AblationArm::without_negative, AblationArm::naive}) {
    AblationRow row{arm, {}, {}, {}};
    std::vector<double> mious;
    for (std::uint64_t seed : base.seeds) {
      TrainConfig c = arm_config(base, arm);
      c.seed = seed;
      c.output = base.output / to_string(arm) / ("seed_" + std::to_string(seed));
      const RunArtifacts a = train(c, force);
      mious.push_back(a.report_json.at("test").at("miou").get<double>());
      row.initial_train_loss.push_back(a.report_json.at("initial_train_loss").get<double>());
      row.final_train_loss.push_back(a.report_json.at("final_train_loss").get<double>());
    }
    row.miou = seed_stats(std::move(mious));
    rows.push_back(std::move(row));
  }
  json out = to_json(rows);
  out["seeds"] = base.seeds;
  io::write_text_atomic(base.output / "ablation.json", out.dump(2) + "\n");
  return out;
}

}  // namespace coarseseg
