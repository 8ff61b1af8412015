#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "eocount/metrics.hpp"
#include "eocount/model.hpp"
#include "eocount/scenegen.hpp"
#include "eocount/tensor.hpp"

namespace eoc {

/// How the mask branch output is supervised.
enum class MaskSupervision { bce, none, density_mse };

struct TrainConfig {
  int epochs = 300;
  std::size_t batch_size = 8;
  double lr = 1e-5;
  int lr_decay_every = 100;  // incremental stages only
  double lr_decay_factor = 10.0;
  double weight_decay = 5e-5;
  double lambda = 0.15;
  double delta = 1e-3;
  std::size_t memory = 150;  // support bank capacity
  std::uint64_t seed = 0;
  bool gate_with_truth = false;  // diagnosis only
  MaskSupervision mask_supervision = MaskSupervision::bce;

  static TrainConfig paper();
  static TrainConfig desk();
  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
  /// Learning rate for `epoch` (0-based); decay applies only when incremental.
  double lr_at(int epoch, bool incremental) const;
};

struct StageLossBreakdown {
  double l_a = 0.0;
  double l_c = 0.0;
  double l_d = 0.0;
  double l_kd = 0.0;
  double l_total = 0.0;
  double lambda = 0.0;  // effective weight (0 when no teacher)
  double mask_weight = 1.0;
};

// ---- Loss terms over a batch of per-sample outputs ----

/// Mean cross-entropy over the batch.
Tensor loss_classifier(std::span<const Tensor> logits, std::span<const std::size_t> labels);

/// (1/2n) sum_i ||density_i[g_i] - target_i||^2 where g_i is the gating class
/// and target_i is the sample's density when g_i is its true class, else zero.
Tensor loss_density(std::span<const Tensor> densities, std::span<const Tensor> gt_densities,
                    std::span<const std::size_t> true_classes, std::span<const std::size_t> gating);

/// Mean BCE over every pixel of the batch.
Tensor loss_mask(std::span<const Tensor> mask_probs, std::span<const Tensor> gt_masks);

/// (1/2n) sum_i ||student_i[0..t-1] - teacher_i||^2 over the teacher's channels.
/// The teacher must have exactly one channel fewer than the student.
Tensor loss_distill(std::span<const Tensor> student_densities, std::span<const Tensor> teacher_densities);

/// Composite loss of one batch: L_a + L_c + (1-lambda) L_d + lambda L_kd.
/// Pass no teacher densities at the base stage; lambda is then 0. Samples
/// carry full-resolution densities and are used as given (no augmentation).
Tensor batch_loss(const ModelState& model, std::span<const Sample> batch, std::span<const Tensor> teacher_densities,
                  const TrainConfig& cfg, StageLossBreakdown* breakdown = nullptr);

// ---- Support sample bank ----

struct BankEntry {
  Sample sample;
  std::vector<double> feature;
  double distance = 0.0;
};

/// Fixed-capacity exemplar memory split evenly across seen classes.
class SupportSampleBank {
 public:
  explicit SupportSampleBank(std::size_t capacity = 150) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const;
  bool contains(int class_id) const { return classes_.count(class_id) > 0; }
  const std::map<int, std::vector<BankEntry>>& classes() const { return classes_; }
  std::vector<Sample> samples() const;

  /// floor(capacity / n) each, remainder one apiece to the lowest indices.
  static std::vector<std::size_t> allotments(std::size_t capacity, std::size_t num_classes);

  /// Adds a class whose entries are already sorted by distance, then trims
  /// every class list to its allotment by dropping list tails.
  void add_class(int class_id, std::vector<BankEntry> ranked);

 private:
  std::size_t capacity_;
  std::map<int, std::vector<BankEntry>> classes_;
};

/// Indices of `features` ordered by ascending Euclidean distance to their mean
/// (ties by index), paired with the distances.
std::vector<std::pair<std::size_t, double>> rank_by_center(std::span<const std::vector<double>> features);

/// Ranks the class's samples by their given features and stores them.
void update_bank_with_features(SupportSampleBank& bank, std::span<const Sample> samples,
                               std::span<const std::vector<double>> features, int class_id);

/// Feature vectors come from `model`; only samples of `class_id` are used.
void update_bank(SupportSampleBank& bank, const ModelState& model, std::span<const Sample> samples,
                 int class_id);

// ---- Training ----

struct EpochRecord {
  int epoch = 0;
  int stage = 0;
  StageLossBreakdown mean;
  double val_mae = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
};

struct StageHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StageLossBreakdown> batches;
};

/// One stage of training. `teacher` is the frozen previous-stage model, or
/// null at the base stage / for baselines without distillation.
StageHistory train_stage(ModelState& model, std::span<const Sample> new_data, const SupportSampleBank& bank,
                         const ModelState* teacher, const TrainConfig& cfg, std::span<const Sample> val,
                         bool incremental);

enum class Method { full, ft, joint };

enum class MaskVariant { full, no_mask, unsupervised, density_supervised, no_feedback };
MaskVariant parse_mask_variant(const std::string& name);
std::string to_string(MaskVariant v);
/// Architecture and supervision implied by an ablation variant.
void apply_mask_variant(MaskVariant v, ArchConfig& arch, TrainConfig& cfg);

struct RunResult {
  std::vector<ModelState> models;  // one per stage (one for joint)
  std::vector<StageHistory> histories;
  std::vector<StageReport> reports;
  std::vector<SupportSampleBank> banks;  // bank after each stage (empty for ft/joint)
};

/// Called after each stage with (stage index, result so far).
using StageCallback = std::function<void(int, const RunResult&)>;

RunResult run_incremental(std::span<const StageDataset> benchmark, const ArchConfig& arch,
                          const TrainConfig& cfg, Method method, const StageCallback& on_stage = {});
/// Stage-1 training is the same for every incremental method; pass a finished
/// run as `first_stage` to reuse its stage-1 model instead of retraining.
RunResult run_baseline_ft(std::span<const StageDataset> benchmark, const ArchConfig& arch,
                          const TrainConfig& cfg, const StageCallback& on_stage = {},
                          const RunResult* first_stage = nullptr);
RunResult run_baseline_joint(std::span<const StageDataset> benchmark, const ArchConfig& arch,
                             const TrainConfig& cfg);
RunResult run_ablation_mask(std::span<const StageDataset> benchmark, ArchConfig arch, TrainConfig cfg,
                            MaskVariant variant, const StageCallback& on_stage = {});

/// Columns: epoch,stage,L_a,L_c,L_d,L_kd,L_total,val_MAE,val_MSE,lr
void write_history_csv(std::ostream& os, const StageHistory& history);

}  // namespace eoc
