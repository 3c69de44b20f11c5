#pragma once

#include "fusionunet/data.hpp"
#include "fusionunet/losses.hpp"
#include "fusionunet/model.hpp"
#include "fusionunet/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace fusionunet {

struct SchedulerConfig {
  std::int64_t t0 = 10;
  double t_mult = 2.0;
  double eta_min = 1e-5;
};

struct TrainConfig {
  Index epochs = 30;
  Index batch_size = 4;
  Index eval_batch_size = 10;
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamConfig adam;
  SgdConfig sgd;
  SchedulerConfig scheduler;
  LossKind loss = LossKind::ce_dice;
  std::uint64_t seed = 1;
  bool augment = true;

  void validate() const;
};

/// Synthetic data for one experiment: samples [0, n_train) train, the next
/// n_val validate, the next n_test test.
struct DataConfig {
  SynthSpec spec;
  Index n_train = 200;
  Index n_val = 50;
  Index n_test = 0;

  void validate() const;
};

/// Everything a run depends on; parsed from one JSON object with optional
/// "model", "train" and "data" members. Missing keys keep their defaults.
struct ExperimentConfig {
  FusionConfig model;
  TrainConfig train;
  DataConfig data;

  /// Desk-scale defaults: C=16, S=64, nuclei, 200/50 split.
  static ExperimentConfig desk();
  void validate() const;
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text, const ExperimentConfig& base);
};

struct DatasetSplit {
  std::vector<SegSample> train, val, test;
};

DatasetSplit make_datasets(const DataConfig& data, Index n_classes);

struct EvalResult {
  double dice = 0.0;  // mean over samples of the mean over present classes
  double iou = 0.0;
  double foreground_dice = 0.0;  // same, restricted to classes >= 1
  double foreground_iou = 0.0;
};

/// Eval-mode forward without recording; metrics per sample, then averaged.
template <typename Scalar>
EvalResult evaluate(FusionUNet<Scalar>& model, std::span<const SegSample> samples, Index batch_size = 10);

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
  double val_iou = 0.0;
  double lr = 0.0;
};

struct RunReport {
  ExperimentConfig config;
  Index params = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::vector<EpochRecord> epochs;
  Index best_epoch = -1;
  double best_val_dice = 0.0;
  std::string final_split;  // "test", or "val" when there is no test split
  EvalResult final;
  double wall_clock_seconds = 0.0;  // kept out of to_json() so reports stay byte-stable

  std::string to_json() const;
};

/// Files written under out_dir by train().
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path metrics() const { return dir / "metrics.csv"; }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path timing() const { return dir / "timing.json"; }
  std::filesystem::path checkpoint() const { return dir / "best.funw"; }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains a fresh model built from config.model with seed-derived streams for
/// init, shuffling and augmentation. Keeps the best-validation weights
/// (checkpoint and in memory) and reports final metrics with them. Throws
/// NumericError naming the epoch and batch when the loss diverges.
template <typename Scalar>
RunReport train(const ExperimentConfig& config, const DatasetSplit& data, const std::filesystem::path& out_dir,
                const EpochCallback& on_epoch = {});

/// Dispatches on config.model.precision.
RunReport train_any(const ExperimentConfig& config, const DatasetSplit& data, const std::filesystem::path& out_dir,
                    const EpochCallback& on_epoch = {});

struct AblationArm {
  std::string name;
  FusionMode fusion_mode;
  ResampleMode resample_mode;
};

/// Distinct configurations trained by the ablation: the four fusion modes
/// with reorganize+group-conv, then both rounds with pooling+conv.
std::vector<AblationArm> ablation_arms();

struct AblationRow {
  std::string name;
  std::string arm;  // AblationArm::name whose runs fill this row
  Index seeds = 0;
  double dice_mean = 0.0, dice_std = 0.0;
  double iou_mean = 0.0, iou_std = 0.0;
  std::vector<double> dice;  // per seed, in seed order
  std::vector<double> iou;
};

struct AblationTable {
  std::vector<AblationRow> fusion_rows;    // No Fusion .. DownFuse + UpFuse
  std::vector<AblationRow> resample_rows;  // Pooling+Conv, Reorganize+Group-Conv

  const AblationRow& row(const std::string& name) const;
  std::string to_json() const;
  std::string to_csv() const;
};

/// Run seed for (arm, index): derive_seed(derive_seed(base, hash_label(arm)), index).
std::uint64_t ablation_seed(std::uint64_t base_seed, const std::string& arm, Index index);

using RunCallback = std::function<void(const std::string& arm, Index seed_index, const RunReport&)>;

/// Trains every arm for `seeds` seeds on one shared dataset. Each run lives in
/// out_dir/<arm>/seed_<i>. The Reorganize+Group-Conv row reuses the
/// DownFuse + UpFuse runs, which have the same configuration.
AblationTable run_ablation(const ExperimentConfig& base, Index seeds, const std::filesystem::path& out_dir,
                           const RunCallback& on_run = {});

}  // namespace fusionunet
