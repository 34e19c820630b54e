#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dain/data.hpp"
#include "dain/models.hpp"

namespace dain::train {

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct OptimizerState {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::map<std::string, Tensor> velocity;  // keyed by parameter name, created lazily
};

/// v <- mu*v - lr*(g + wd*p); p <- p + v. Parameters with requires_grad == false are skipped.
/// Throws NumericError naming the parameter if a gradient holds NaN/Inf.
void sgd_step(std::span<ad::Parameter* const> params, OptimizerState& state);

struct ScheduleState {
  double lr = 0.01;
  double factor = 0.1;
  std::size_t window = 3;
  double tau = 0.002;
  std::size_t decays = 0;
  std::size_t last_decay_len = 0;  // history length at the last decay
};

/// Decays lr when max(history[-E:]) - max(history[:-E]) <= tau, at most once per window.
/// Returns true if a decay happened.
bool lr_schedule_update(std::span<const double> history, ScheduleState& state);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// Stage 1 trains the classifier group, stage 2 adds the head group, stage 3 trains everything.
  std::size_t stage1_epochs = 3;
  std::size_t stage2_epochs = 3;
  std::size_t decay_window = 3;
  double decay_tau = 0.002;
  double decay_factor = 0.1;
  /// Stop after this many decays; 0 never stops early.
  std::size_t max_decays = 2;
  /// Stop once eval-mode train accuracy reaches this value; 0 disables.
  double target_train_acc = 0.0;
  double stretch_pct = 10.0;
  double flip_prob = 0.5;
  /// Train on windows of consecutive views through the feature-level multiview path.
  bool multiview = false;
  std::size_t windows_per_sample = 1;
  std::uint64_t seed = 0;
  /// Evaluate the test set after every epoch when test items are supplied.
  bool eval_test_each_epoch = true;
  std::optional<std::filesystem::path> metrics_csv;
  /// Last-good checkpoint written here if training diverges.
  std::optional<std::filesystem::path> divergence_checkpoint;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  int stage = 1;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t decays = 0;
  std::string stop_reason;
};

class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

int stage_of_epoch(const TrainConfig& cfg, std::size_t epoch);
/// Sets requires_grad on every parameter according to the stage plan.
void apply_stage(models::ModelGraph& model, int stage);

/// Augmentation matching a model: crop = input size, normalization from the model config.
data::AugmentConfig augment_config(const models::ModelGraph& model, double stretch_pct = 0.0, double flip_prob = 0.0);

/// Fills the model's normalization stats from the training images if they are unset.
TrainResult train(models::ModelGraph& model, const std::vector<data::Item>& train_items,
                  const std::vector<data::Item>* test_items, const TrainConfig& cfg);

std::string metrics_csv_text(const std::vector<EpochMetrics>& epochs);

/// Mean cross-entropy of a fixed batch, eval mode (used for loss-decrease checks).
double batch_loss(models::ModelGraph& model, const std::vector<data::Item>& items);

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalMode { SingleView, Multiview };

struct EvalConfig {
  EvalMode mode = EvalMode::SingleView;
  /// Multiview only; defaults to the model's fusion settings when unset.
  std::optional<angular::MultiviewMode> multiview_mode;
  std::optional<angular::VotingRule> voting_rule;
  std::optional<std::size_t> n_views;
  std::uint64_t seed = 0;
  /// Reverses the view order inside every window (order-invariance checks).
  bool reverse_windows = false;
  std::size_t batch_size = 32;
};

struct AngleAccuracy {
  double theta_deg = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  std::size_t n_classes = 0;
  std::size_t total = 0;
  std::size_t correct = 0;
  double overall = 0.0;
  std::vector<double> per_class;             // accuracy per true class
  std::vector<std::size_t> per_class_count;  // test records per class
  std::vector<AngleAccuracy> per_angle;      // sorted by theta; single-view only
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::vector<std::string> warnings;

  /// Row sums equal per-class counts and overall == trace / total.
  void check_consistency() const;
};

struct Prediction {
  int label = 0;
  int predicted = 0;
  double theta_deg = 0.0;
};

EvalReport make_report(const std::vector<Prediction>& preds, std::size_t n_classes, bool with_angles);

EvalReport evaluate(models::ModelGraph& model, const std::vector<data::Item>& items, const EvalConfig& cfg);

/// Single-view class probabilities [N, K] in eval mode.
Tensor predict_proba(models::ModelGraph& model, const std::vector<const data::Item*>& items);

// ---------------------------------------------------------------------------
// Reports

void write_confusion_csv(const std::filesystem::path& file, const EvalReport& r);
void write_per_angle_csv(const std::filesystem::path& file, const EvalReport& r);
std::string eval_summary_text(const EvalReport& r);

/// "mean±std" of percentages with one decimal (sample std; 0 for a single value).
std::string mean_std_string(std::span<const double> values_percent);
/// Multi-split table: one line per split and a final mean±std line.
std::string multi_split_summary(std::span<const EvalReport> reports);

struct FeatureRow {
  std::string sample_id;
  int view_index = 0;
  std::vector<double> features;
};

/// Pre-classifier features in eval mode, one row per item, in item order.
std::vector<FeatureRow> export_features(models::ModelGraph& model, const std::vector<data::Item>& items);
/// Header "sample_id,view_index,f_0,...,f_k".
void write_feature_csv(const std::filesystem::path& file, const std::vector<FeatureRow>& rows);

}  // namespace dain::train
