#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coarseseg/datasets.hpp"
#include "coarseseg/error.hpp"
#include "coarseseg/eval.hpp"
#include "coarseseg/loss.hpp"
#include "coarseseg/model.hpp"

namespace coarseseg {

enum class TrainMode { weak, strong, semi };
std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct OptimizerConfig {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd only
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam only
  double ann_lr_scale = 0.01;  // step-size multiplier for annotation-network parameters

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  std::filesystem::path dataset;
  std::filesystem::path val_dataset;   // optional
  std::filesystem::path test_dataset;  // optional, evaluated once at the end
  std::filesystem::path output;
  TrainMode mode = TrainMode::weak;
  LossConfig loss;
  OptimizerConfig optimizer;
  int epochs = 20;
  int batch_size = 32;
  std::uint64_t seed = 0;
  int eval_every = 1;
  // Network widths. Input shape, class count and source lists are filled in
  // from the training data.
  ArchDescriptor arch;
  TransitionMode transition = TransitionMode::uniform;
  Eigen::MatrixXd transition_values;  // custom mode only
  std::vector<std::string> pos_sources;  // empty: every source in the dataset
  std::vector<std::string> neg_sources;
  bool freeze_identity_cm = false;
  bool deterministic = true;
  std::vector<std::uint64_t> seeds{0, 1, 2};  // ablate / sweep
  std::vector<int> levels{1, 2, 3, 4, 5};     // sweep
  int noise_seed = 0;                          // sweep: coarse-label synthesis

  void validate() const;
  nlohmann::json to_json() const;
  /// Relative paths are resolved against base_dir. Unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Applies a dot-path override such as "loss.lambda=0.05" to a JSON config.
/// The value is parsed as JSON when possible, otherwise kept as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

template <typename T>
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const OptimizerConfig& cfg, const std::vector<nn::Param<T>*>& params);

  /// Per-parameter step-size multipliers (default 1).
  void set_lr_scale(std::size_t index, double scale);
  void step(const std::vector<nn::Param<T>*>& params);
  long steps() const { return steps_; }

  const OptimizerConfig& config() const { return cfg_; }
  // State access for checkpoints: first moment / velocity, then second moment.
  std::vector<Mat<T>>& first() { return m_; }
  std::vector<Mat<T>>& second() { return v_; }
  void set_steps(long s) { steps_ = s; }

 private:
  OptimizerConfig cfg_;
  long steps_ = 0;
  std::vector<Mat<T>> m_, v_;
  std::vector<T> scale_;
};

class NonFiniteLossError : public NumericError {
 public:
  NonFiniteLossError(int epoch, std::vector<std::string> ids, const std::string& what)
      : NumericError(what), epoch_(epoch), ids_(std::move(ids)) {}
  int epoch() const { return epoch_; }
  const std::vector<std::string>& sample_ids() const { return ids_; }

 private:
  int epoch_;
  std::vector<std::string> ids_;
};

/// Loss of one batch, split into the dense-mask part and the coarse part.
struct BatchLoss {
  LossBreakdown breakdown;  // breakdown.total = strong_part + weak_part
  double strong_part = 0.0;
  double weak_part = 0.0;
};

/// Fills in the data-dependent fields of cfg.arch.
ArchDescriptor derive_arch(const TrainConfig& cfg, const SegDataset& train);

/// Checks the dataset can drive the configured mode. Throws ValidationError.
void check_dataset_for_mode(const SegDataset& ds, TrainMode mode, const ArchDescriptor& arch);

/// In-memory training loop over one dataset.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const SegDataset& train);
  /// Continues from a restored model and optimizer after `completed_epochs`.
  Trainer(const TrainConfig& cfg, const SegDataset& train, Model<float> model,
          Optimizer<float> opt, int completed_epochs);

  /// Runs one epoch. on_step sees every batch loss in order. Returns the
  /// mean breakdown over batches. Throws NonFiniteLossError naming
  /// the batch's sample ids when a loss is not finite.
  LossBreakdown run_epoch(const std::function<void(const BatchLoss&)>& on_step = {});

  /// Loss (and optionally gradients into the model) of the given samples.
  BatchLoss batch_loss(std::span<const std::size_t> indices, double lambda, bool backward);

  /// Mean batch loss over the whole dataset without updating anything.
  LossBreakdown dataset_loss(double lambda);

  /// Sample order of a 1-based epoch.
  std::vector<std::size_t> epoch_order(int epoch) const;

  int completed_epochs() const { return epoch_; }
  const TrainConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  Optimizer<float>& optimizer() { return opt_; }
  const TransitionMatrix& transition() const { return tm_; }

 private:
  void apply_lr_scales();

  TrainConfig cfg_;
  const SegDataset& data_;
  Model<float> model_;
  Optimizer<float> opt_;
  TransitionMatrix tm_;
  int epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormat = 1;

struct Checkpoint {
  Model<float> model;
  Optimizer<float> optimizer;
  int epoch = 0;
};

/// Writes `<path>` (binary) and `<path>.json` (descriptor sidecar).
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     Optimizer<float>& opt, int epoch);
/// Throws IoError ("E_CHECKPOINT") on malformed or unknown-format files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Runs

struct RunArtifacts {
  std::filesystem::path dir;
  std::filesystem::path metrics;
  std::filesystem::path report;
  std::filesystem::path resolved_config;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  nlohmann::json report_json;
};

/// Result of a run kept in memory.
struct RunResult {
  std::vector<nlohmann::json> metrics;
  std::vector<BatchLoss> steps;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::optional<EvalReport> final_val;
  std::optional<EvalReport> test;  // final model on the test set
  std::optional<Model<float>> model;
};

/// Trains without touching the filesystem.
RunResult run_in_memory(const TrainConfig& cfg, const SegDataset& train,
                        const SegDataset* val = nullptr, const SegDataset* test = nullptr,
                        bool keep_steps = false);

/// Trains from cfg.dataset into cfg.output (config.resolved.json,
/// metrics.jsonl, checkpoints/, report.json). Refuses a non-empty output
/// directory unless force is set (ValidationError "E_EXISTS").
RunArtifacts train(const TrainConfig& cfg, bool force = false);

/// Continues the run that wrote `checkpoint` up to cfg.epochs, appending to
/// its metrics. Refuses (ValidationError "E_ARCH_MISMATCH") when the
/// checkpoint descriptor differs from the one cfg and the data imply.
RunArtifacts resume(const std::filesystem::path& checkpoint, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Ablation

enum class AblationArm { full, without_negative, naive };
std::string to_string(AblationArm a);
TrainConfig arm_config(const TrainConfig& base, AblationArm arm);

struct SeedStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for one seed
  std::vector<double> values;
};
SeedStats seed_stats(std::vector<double> values);

struct AblationRow {
  AblationArm arm;
  SeedStats miou;
  std::vector<double> initial_train_loss;
  std::vector<double> final_train_loss;
};

/// Runs the three arms over base.seeds on shared data; mIoU is that of the
/// final model on `test`.
std::vector<AblationRow> ablation_suite(const TrainConfig& base, const SegDataset& train,
                                        const SegDataset& test);
nlohmann::json to_json(const std::vector<AblationRow>& table);

/// File-based variant: loads base.dataset / base.test_dataset and writes one
/// run directory per arm and seed plus ablation.json under base.output.
nlohmann::json ablation_suite(const TrainConfig& base, bool force = false);

}  // namespace coarseseg
