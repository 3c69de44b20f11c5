#include "fusionunet/train.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

using namespace fusionunet;
using fusionunet::testing::read_file;
using fusionunet::testing::scratch_dir;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c = ExperimentConfig::desk();
  c.model.base_width = 4;
  c.model.input_side = 32;
  c.data.spec.side = 32;
  c.data.n_train = 8;
  c.data.n_val = 4;
  c.train.epochs = 3;
  return c;
}

TEST(ExperimentConfig, DeskDefaults) {
  const auto c = ExperimentConfig::desk();
  EXPECT_EQ(c.model.base_width, 16);
  EXPECT_EQ(c.model.input_side, 64);
  EXPECT_EQ(c.data.spec.side, 64);
  EXPECT_EQ(c.data.n_train, 200);
  EXPECT_EQ(c.data.n_val, 50);
  EXPECT_EQ(c.train.epochs, 30);
  EXPECT_EQ(c.train.loss, LossKind::ce_dice);
  EXPECT_NO_THROW(c.validate());
}

TEST(ExperimentConfig, JsonMergesOntoBase) {
  const auto base = ExperimentConfig::desk();
  const auto c = ExperimentConfig::from_json(R"({"train": {"epochs": 3, "adam": {"lr": 0.01}}})", base);
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_DOUBLE_EQ(c.train.adam.lr, 0.01);
  EXPECT_DOUBLE_EQ(c.train.adam.beta2, base.train.adam.beta2);
  EXPECT_EQ(c.model, base.model);
  EXPECT_EQ(c.data.spec, base.data.spec);
  const auto again = ExperimentConfig::from_json(c.to_json(), ExperimentConfig{});
  EXPECT_EQ(again.to_json(), c.to_json());
}

TEST(ExperimentConfig, RejectsBadInput) {
  const auto base = ExperimentConfig::desk();
  EXPECT_THROW(ExperimentConfig::from_json(R"({"trian": {}})", base), std::invalid_argument);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"train": {"epochz": 1}})", base), std::invalid_argument);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"model": {"input_side": 32}})", base), std::invalid_argument);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"train": {"epochs": 0}})", base), std::invalid_argument);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"train": {"loss": "hinge"}})", base), std::invalid_argument);
  EXPECT_ANY_THROW(ExperimentConfig::from_json("{not json", base));
}

TEST(Datasets, SplitsAreConsecutiveSamples) {
  auto c = tiny_config();
  c.data.n_test = 2;
  const auto split = make_datasets(c.data, c.model.n_classes);
  ASSERT_EQ(split.train.size(), 8u);
  ASSERT_EQ(split.val.size(), 4u);
  ASSERT_EQ(split.test.size(), 2u);
  const auto all = generate_dataset(c.data.spec, 14);
  EXPECT_EQ(split.val[0].mask, all[8].mask);
  EXPECT_EQ(split.test[1].mask, all[13].mask);
}

TEST(Train, RunsAreByteIdentical) {
  const auto dir = scratch_dir("train_determinism");
  const auto c = tiny_config();
  const auto data = make_datasets(c.data, c.model.n_classes);
  const auto a = train_any(c, data, dir / "a");
  const auto b = train_any(c, data, dir / "b");
  EXPECT_EQ(read_file(dir / "a" / "metrics.csv"), read_file(dir / "b" / "metrics.csv"));
  EXPECT_EQ(read_file(dir / "a" / "best.funw"), read_file(dir / "b" / "best.funw"));
  EXPECT_EQ(read_file(dir / "a" / "report.json"), read_file(dir / "b" / "report.json"));
  EXPECT_EQ(a.to_json(), b.to_json());

  auto other = c;
  other.train.seed = 2;
  train_any(other, data, dir / "c");
  EXPECT_NE(read_file(dir / "a" / "metrics.csv"), read_file(dir / "c" / "metrics.csv"));
}

TEST(Train, MetricsCsvAndReportAgree) {
  const auto dir = scratch_dir("train_outputs");
  const auto c = tiny_config();
  const auto data = make_datasets(c.data, c.model.n_classes);
  std::vector<EpochRecord> seen;
  const auto report = train_any(c, data, dir, [&](const EpochRecord& e) { seen.push_back(e); });
  ASSERT_EQ(report.epochs.size(), 3u);
  ASSERT_EQ(seen.size(), 3u);

  std::istringstream csv(read_file(dir / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,train_loss,val_dice,val_iou,lr");
  Index rows = 0;
  while (std::getline(csv, line)) {
    std::istringstream fields(line);
    std::string f;
    std::vector<double> v;
    while (std::getline(fields, f, ',')) v.push_back(std::stod(f));
    ASSERT_EQ(v.size(), 5u);
    const auto& e = report.epochs[static_cast<std::size_t>(rows)];
    EXPECT_EQ(static_cast<Index>(v[0]), e.epoch);
    EXPECT_NEAR(v[1], e.train_loss, 1e-7 * std::abs(e.train_loss));
    const double lr = cosine_warm_restart_lr(rows, 10, 2.0, 1e-3, 1e-5);
    EXPECT_NEAR(v[4], lr, 1e-8 * lr);
    ++rows;
  }
  EXPECT_EQ(rows, 3);

  Index best = 0;
  for (std::size_t i = 1; i < report.epochs.size(); ++i) {
    if (report.epochs[i].val_dice > report.epochs[static_cast<std::size_t>(best)].val_dice) best = static_cast<Index>(i);
  }
  EXPECT_EQ(report.best_epoch, best);
  EXPECT_DOUBLE_EQ(report.best_val_dice, report.epochs[static_cast<std::size_t>(best)].val_dice);
  EXPECT_EQ(report.final_split, "val");
  EXPECT_DOUBLE_EQ(report.final.dice, report.best_val_dice);
  EXPECT_TRUE(std::filesystem::exists(dir / "timing.json"));

  auto model = load_checkpoint<float>(dir / "best.funw");
  const auto r = evaluate(model, data.val, 3);
  EXPECT_DOUBLE_EQ(r.dice, report.best_val_dice);
}

TEST(Train, LossFallsOverTheFirstEpochs) {
  const auto dir = scratch_dir("train_loss");
  auto c = tiny_config();
  c.model.base_width = 8;
  c.data.n_train = 24;
  c.train.epochs = 5;
  const auto report = train_any(c, make_datasets(c.data, c.model.n_classes), dir);
  EXPECT_LT(report.epochs[4].train_loss, report.epochs[0].train_loss);
}

TEST(Train, DivergenceIsANumericError) {
  const auto dir = scratch_dir("train_divergence");
  auto c = tiny_config();
  c.train.adam.lr = 1e300;
  c.train.scheduler.eta_min = 0;
  const auto data = make_datasets(c.data, c.model.n_classes);
  try {
    train_any(c, data, dir);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, MetricsAreBoundedAndOrdered) {
  auto c = tiny_config();
  c.model.precision = Precision::f64;
  auto model = FusionUNet<double>::build(c.model, 1);
  const auto data = make_datasets(c.data, c.model.n_classes);
  const auto r = evaluate(model, data.val, 2);
  EXPECT_GE(r.dice, 0.0);
  EXPECT_LE(r.dice, 1.0);
  EXPECT_GE(r.foreground_iou, 0.0);
  EXPECT_LE(r.iou, r.dice + 1e-12);
}

TEST(Ablation, SeedsAreDistinctPerArmAndIndex) {
  std::set<std::uint64_t> seeds;
  for (const auto& arm : ablation_arms())
    for (Index i = 0; i < 5; ++i) seeds.insert(ablation_seed(1, arm.name, i));
  EXPECT_EQ(seeds.size(), 25u);
  EXPECT_EQ(ablation_seed(1, "both", 0), derive_seed(derive_seed(1, hash_label("both")), 0));
}

TEST(Ablation, TableAggregatesRuns) {
  const auto dir = scratch_dir("ablation");
  auto c = tiny_config();
  c.train.epochs = 1;
  std::vector<std::string> order;
  const auto table = run_ablation(c, 2, dir, [&](const std::string& arm, Index, const RunReport&) { order.push_back(arm); });
  EXPECT_EQ(order.size(), 10u);
  ASSERT_EQ(table.fusion_rows.size(), 4u);
  ASSERT_EQ(table.resample_rows.size(), 2u);
  EXPECT_EQ(table.fusion_rows[0].name, "No Fusion");
  EXPECT_EQ(table.fusion_rows[3].name, "DownFuse + UpFuse");
  EXPECT_EQ(table.resample_rows[0].name, "Pooling+Conv");
  const auto& both = table.row("DownFuse + UpFuse");
  const auto& reorg = table.row("Reorganize+Group-Conv");
  EXPECT_EQ(both.dice, reorg.dice);
  for (const auto* r : {&table.fusion_rows[0], &table.resample_rows[0], &both}) {
    ASSERT_EQ(r->dice.size(), 2u);
    const double mean = (r->dice[0] + r->dice[1]) / 2;
    EXPECT_NEAR(r->dice_mean, mean, 1e-15);
    EXPECT_NEAR(r->dice_std, std::abs(r->dice[0] - r->dice[1]) / std::sqrt(2.0), 1e-15);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "ablation.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ablation.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "pool_conv" / "seed_1" / "metrics.csv"));
  EXPECT_THROW(table.row("Nonexistent"), std::out_of_range);
}

}  // namespace
