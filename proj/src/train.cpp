#include "fusionunet/train.hpp"

#include "fusionunet/metrics.hpp"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

namespace fusionunet {

namespace {

using ordered_json = nlohmann::ordered_json;

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) throw std::invalid_argument("unknown key '" + item.key() + "' in " + where);
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

ordered_json eval_json(const EvalResult& r) {
  ordered_json j;
  j["dice"] = r.dice;
  j["iou"] = r.iou;
  j["foreground_dice"] = r.foreground_dice;
  j["foreground_iou"] = r.foreground_iou;
  return j;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || eval_batch_size < 1) {
    throw std::invalid_argument("epochs and batch sizes must be positive");
  }
  if (!(adam.lr > 0) || !(adam.eps > 0) || adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1) {
    throw std::invalid_argument("invalid Adam hyperparameters");
  }
  if (!(sgd.lr > 0) || sgd.momentum < 0 || sgd.momentum >= 1) throw std::invalid_argument("invalid SGD hyperparameters");
  if (scheduler.t0 < 1 || !(scheduler.t_mult >= 1)) throw std::invalid_argument("scheduler needs T_0 >= 1 and T_mult >= 1");
  const double lr_max = optimizer == OptimizerKind::adam ? adam.lr : sgd.lr;
  if (!(scheduler.eta_min >= 0) || scheduler.eta_min > lr_max) {
    throw std::invalid_argument("eta_min must be in [0, lr]");
  }
}

void DataConfig::validate() const {
  spec.validate();
  if (n_train < 1 || n_val < 1 || n_test < 0) throw std::invalid_argument("need at least one train and one val sample");
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.model.base_width = 16;
  c.model.input_side = 64;
  c.data.spec = SynthSpec::defaults(SynthStyle::nuclei);
  c.data.spec.side = 64;
  c.data.spec.seed = 7;
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (data.spec.side != model.input_side || data.spec.channels != model.in_channels) {
    throw std::invalid_argument("data side/channels do not match the model input");
  }
}

std::string ExperimentConfig::to_json() const {
  ordered_json j;
  j["model"] = ordered_json::parse(model.to_json());
  ordered_json t;
  t["epochs"] = train.epochs;
  t["batch_size"] = train.batch_size;
  t["eval_batch_size"] = train.eval_batch_size;
  t["optimizer"] = std::string(fusionunet::to_string(train.optimizer));
  t["adam"] = {{"lr", train.adam.lr}, {"beta1", train.adam.beta1}, {"beta2", train.adam.beta2}, {"eps", train.adam.eps}};
  t["sgd"] = {{"lr", train.sgd.lr}, {"momentum", train.sgd.momentum}};
  t["scheduler"] = {{"t0", train.scheduler.t0}, {"t_mult", train.scheduler.t_mult}, {"eta_min", train.scheduler.eta_min}};
  t["loss"] = std::string(fusionunet::to_string(train.loss));
  t["seed"] = train.seed;
  t["augment"] = train.augment;
  j["train"] = std::move(t);
  ordered_json d;
  d["spec"] = ordered_json::parse(data.spec.to_json());
  d["n_train"] = data.n_train;
  d["n_val"] = data.n_val;
  d["n_test"] = data.n_test;
  j["data"] = std::move(d);
  return j.dump();
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text, const ExperimentConfig& base) {
  const auto j = nlohmann::json::parse(text);
  reject_unknown_keys(j, {"model", "train", "data"}, "config");
  ExperimentConfig c = base;
  if (j.contains("model")) {
    auto merged = nlohmann::json::parse(base.model.to_json());
    merged.merge_patch(j["model"]);
    c.model = FusionConfig::from_json(merged.dump());
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown_keys(t, {"epochs", "batch_size", "eval_batch_size", "optimizer", "adam", "sgd", "scheduler", "loss",
                            "seed", "augment"},
                        "train");
    auto& tr = c.train;
    tr.epochs = t.value("epochs", tr.epochs);
    tr.batch_size = t.value("batch_size", tr.batch_size);
    tr.eval_batch_size = t.value("eval_batch_size", tr.eval_batch_size);
    if (t.contains("optimizer")) tr.optimizer = parse_optimizer_kind(t["optimizer"].get<std::string>());
    if (t.contains("adam")) {
      const auto& a = t["adam"];
      reject_unknown_keys(a, {"lr", "beta1", "beta2", "eps"}, "train.adam");
      tr.adam.lr = a.value("lr", tr.adam.lr);
      tr.adam.beta1 = a.value("beta1", tr.adam.beta1);
      tr.adam.beta2 = a.value("beta2", tr.adam.beta2);
      tr.adam.eps = a.value("eps", tr.adam.eps);
    }
    if (t.contains("sgd")) {
      const auto& s = t["sgd"];
      reject_unknown_keys(s, {"lr", "momentum"}, "train.sgd");
      tr.sgd.lr = s.value("lr", tr.sgd.lr);
      tr.sgd.momentum = s.value("momentum", tr.sgd.momentum);
    }
    if (t.contains("scheduler")) {
      const auto& s = t["scheduler"];
      reject_unknown_keys(s, {"t0", "t_mult", "eta_min"}, "train.scheduler");
      tr.scheduler.t0 = s.value("t0", tr.scheduler.t0);
      tr.scheduler.t_mult = s.value("t_mult", tr.scheduler.t_mult);
      tr.scheduler.eta_min = s.value("eta_min", tr.scheduler.eta_min);
    }
    if (t.contains("loss")) tr.loss = parse_loss_kind(t["loss"].get<std::string>());
    tr.seed = t.value("seed", tr.seed);
    tr.augment = t.value("augment", tr.augment);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown_keys(d, {"spec", "n_train", "n_val", "n_test"}, "data");
    if (d.contains("spec")) {
      reject_unknown_keys(d["spec"], {"style", "side", "channels", "min_objects", "max_objects", "noise", "seed"},
                          "data.spec");
      auto merged = nlohmann::json::parse(base.data.spec.to_json());
      // A style change without explicit counts picks up that style's defaults.
      if (d["spec"].contains("style")) {
        const auto style = parse_synth_style(d["spec"]["style"].get<std::string>());
        const SynthSpec styled = SynthSpec::defaults(style);
        merged["min_objects"] = styled.min_objects;
        merged["max_objects"] = styled.max_objects;
      }
      merged.merge_patch(d["spec"]);
      c.data.spec = SynthSpec::from_json(merged.dump());
    }
    c.data.n_train = d.value("n_train", c.data.n_train);
    c.data.n_val = d.value("n_val", c.data.n_val);
    c.data.n_test = d.value("n_test", c.data.n_test);
  }
  c.validate();
  return c;
}

DatasetSplit make_datasets(const DataConfig& data, Index n_classes) {
  data.validate();
  auto all = generate_dataset(data.spec, data.n_train + data.n_val + data.n_test);
  for (const auto& s : all) validate_sample(s, n_classes);
  DatasetSplit split;
  auto it = std::make_move_iterator(all.begin());
  split.train.assign(it, it + data.n_train);
  split.val.assign(it + data.n_train, it + data.n_train + data.n_val);
  split.test.assign(it + data.n_train + data.n_val, std::make_move_iterator(all.end()));
  return split;
}

template <typename Scalar>
EvalResult evaluate(FusionUNet<Scalar>& model, std::span<const SegSample> samples, Index batch_size) {
  if (samples.empty()) throw std::invalid_argument("cannot evaluate on an empty set");
  if (batch_size < 1) throw std::invalid_argument("evaluation batch size must be positive");
  NoGradGuard no_grad;
  const Index K = model.config().n_classes;
  const Index n = static_cast<Index>(samples.size());
  EvalResult total;
  std::vector<Index> indices;
  for (Index start = 0; start < n; start += batch_size) {
    indices.resize(static_cast<std::size_t>(std::min(batch_size, n - start)));
    std::iota(indices.begin(), indices.end(), start);
    const Tensor<Scalar> logits = model.forward(stack_images<Scalar>(samples, indices), Mode::eval);
    const Index H = logits.dim(2), W = logits.dim(3);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const LabelMap pred = argmax_classes(logits.data() + static_cast<Index>(b) * K * H * W, K, H, W);
      const auto overlaps = class_overlaps(pred, samples[indices[b]].mask, K);
      double dice = 0, iou = 0, fg_dice = 0, fg_iou = 0;
      int present = 0, fg_present = 0;
      for (std::size_t k = 0; k < overlaps.size(); ++k) {
        if (!overlaps[k].present()) continue;
        dice += overlaps[k].dice();
        iou += overlaps[k].iou();
        ++present;
        if (k == 0) continue;
        fg_dice += overlaps[k].dice();
        fg_iou += overlaps[k].iou();
        ++fg_present;
      }
      total.dice += present ? dice / present : 1.0;
      total.iou += present ? iou / present : 1.0;
      total.foreground_dice += fg_present ? fg_dice / fg_present : 1.0;
      total.foreground_iou += fg_present ? fg_iou / fg_present : 1.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  total.dice *= inv;
  total.iou *= inv;
  total.foreground_dice *= inv;
  total.foreground_iou *= inv;
  return total;
}

std::string RunReport::to_json() const {
  ordered_json j;
  j["config"] = ordered_json::parse(config.to_json());
  j["params"] = params;
  j["macs"] = macs;
  j["flops"] = flops;
  auto& rows = j["epochs"] = ordered_json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dice", e.val_dice}, {"val_iou", e.val_iou},
                    {"lr", e.lr}});
  }
  j["best_epoch"] = best_epoch;
  j["best_val_dice"] = best_val_dice;
  j["final_split"] = final_split;
  j["final"] = eval_json(final);
  return j.dump(2) + "\n";
}

template <typename Scalar>
RunReport train(const ExperimentConfig& config, const DatasetSplit& data, const std::filesystem::path& out_dir,
                const EpochCallback& on_epoch) {
  config.validate();
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("training needs train and val samples");
  const auto started = std::chrono::steady_clock::now();
  const TrainConfig& tc = config.train;
  std::filesystem::create_directories(out_dir);
  const RunPaths paths{out_dir};

  auto model = FusionUNet<Scalar>::build(config.model, derive_seed(tc.seed, hash_label("init")));
  auto params = model.trainable();
  Optimizer<Scalar> optimizer(tc.optimizer, tc.adam, tc.sgd);

  RunReport report;
  report.config = config;
  const CostReport cost =
      count_cost(config.model, {1, config.model.in_channels, config.model.input_side, config.model.input_side});
  report.params = cost.params;
  report.macs = cost.macs;
  report.flops = cost.flops;

  std::ofstream csv(paths.metrics(), std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + paths.metrics().string());
  csv << "epoch,train_loss,val_dice,val_iou,lr\n";

  Rng shuffle_rng(derive_seed(tc.seed, hash_label("shuffle")));
  const std::uint64_t augment_seed = derive_seed(tc.seed, hash_label("augment"));
  const Index n = static_cast<Index>(data.train.size());
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<Vector<Scalar>> best_state;

  for (Index epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = cosine_warm_restart_lr(epoch, tc.scheduler.t0, tc.scheduler.t_mult, optimizer.base_lr(),
                                             tc.scheduler.eta_min);
    // Fisher-Yates with the portable integer draw.
    for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_int(shuffle_rng, 0, i)]);

    double loss_sum = 0.0;
    for (Index start = 0, batch_index = 0; start < n; start += tc.batch_size, ++batch_index) {
      const Index count = std::min(tc.batch_size, n - start);
      std::vector<SegSample> batch;
      for (Index b = 0; b < count; ++b) {
        const SegSample& sample = data.train[static_cast<std::size_t>(order[start + b])];
        if (tc.augment) {
          Rng rng(derive_seed(augment_seed, static_cast<std::uint64_t>(epoch * n + start + b)));
          batch.push_back(augment(sample, rng));
        } else {
          batch.push_back(sample);
        }
      }
      std::vector<Index> local(static_cast<std::size_t>(count));
      std::iota(local.begin(), local.end(), Index{0});
      const Tensor<Scalar> x = stack_images<Scalar>(batch, local);
      const std::vector<std::int32_t> labels = stack_labels(batch, local);
      for (auto& p : params) p.zero_grad();
      Tensor<Scalar> loss;
      try {
        loss = segmentation_loss(model.forward(x, Mode::train), labels, tc.loss);
        if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("loss is not finite");
        loss.backward();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
      optimizer.step(params, lr);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(count);
    }

    const EvalResult val = evaluate(model, data.val, tc.eval_batch_size);
    const EpochRecord record{epoch, loss_sum / static_cast<double>(n), val.dice, val.iou, lr};
    report.epochs.push_back(record);
    csv << record.epoch << ',' << format_number(record.train_loss) << ',' << format_number(record.val_dice) << ','
        << format_number(record.val_iou) << ',' << format_number(record.lr) << '\n';
    csv.flush();
    if (report.best_epoch < 0 || val.dice > report.best_val_dice) {
      report.best_epoch = epoch;
      report.best_val_dice = val.dice;
      best_state.clear();
      for (const auto& entry : model.state()) best_state.push_back(entry.tensor.value());
      save_checkpoint(model, paths.checkpoint());
    }
    if (on_epoch) on_epoch(record);
  }

  auto state = model.state();
  for (std::size_t i = 0; i < state.size(); ++i) state[i].tensor.mutable_value() = best_state[i];
  if (data.test.empty()) {
    report.final_split = "val";
    report.final = evaluate(model, data.val, tc.eval_batch_size);
  } else {
    report.final_split = "test";
    report.final = evaluate(model, data.test, tc.eval_batch_size);
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_text(paths.report(), report.to_json());
  ordered_json timing;
  timing["wall_clock_seconds"] = report.wall_clock_seconds;
  write_text(paths.timing(), timing.dump(2) + "\n");
  return report;
}

RunReport train_any(const ExperimentConfig& config, const DatasetSplit& data, const std::filesystem::path& out_dir,
                    const EpochCallback& on_epoch) {
  if (config.model.precision == Precision::f64) return train<double>(config, data, out_dir, on_epoch);
  return train<float>(config, data, out_dir, on_epoch);
}

std::vector<AblationArm> ablation_arms() {
  return {
      {"none", FusionMode::none, ResampleMode::reorganize_groupconv},
      {"down_only", FusionMode::down_only, ResampleMode::reorganize_groupconv},
      {"up_only", FusionMode::up_only, ResampleMode::reorganize_groupconv},
      {"both", FusionMode::both, ResampleMode::reorganize_groupconv},
      {"pool_conv", FusionMode::both, ResampleMode::pool_conv},
  };
}

std::uint64_t ablation_seed(std::uint64_t base_seed, const std::string& arm, Index index) {
  return derive_seed(derive_seed(base_seed, hash_label(arm)), static_cast<std::uint64_t>(index));
}

const AblationRow& AblationTable::row(const std::string& name) const {
  for (const auto* rows : {&fusion_rows, &resample_rows}) {
    for (const auto& r : *rows) {
      if (r.name == name) return r;
    }
  }
  throw std::out_of_range("no ablation row '" + name + "'");
}

std::string AblationTable::to_json() const {
  auto rows_json = [](const std::vector<AblationRow>& rows) {
    ordered_json out = ordered_json::array();
    for (const auto& r : rows) {
      ordered_json j;
      j["name"] = r.name;
      j["arm"] = r.arm;
      j["seeds"] = r.seeds;
      j["dice_mean"] = r.dice_mean;
      j["dice_std"] = r.dice_std;
      j["iou_mean"] = r.iou_mean;
      j["iou_std"] = r.iou_std;
      j["dice"] = r.dice;
      j["iou"] = r.iou;
      out.push_back(std::move(j));
    }
    return out;
  };
  ordered_json j;
  j["fusion"] = rows_json(fusion_rows);
  j["resample"] = rows_json(resample_rows);
  return j.dump(2) + "\n";
}

std::string AblationTable::to_csv() const {
  std::string out = "table,row,seeds,dice_mean,dice_std,iou_mean,iou_std\n";
  auto emit = [&out](const char* table, const AblationRow& r) {
    out += std::string(table) + ',' + r.name + ',' + std::to_string(r.seeds) + ',' + format_number(r.dice_mean) + ',' +
           format_number(r.dice_std) + ',' + format_number(r.iou_mean) + ',' + format_number(r.iou_std) + '\n';
  };
  for (const auto& r : fusion_rows) emit("fusion", r);
  for (const auto& r : resample_rows) emit("resample", r);
  return out;
}

AblationTable run_ablation(const ExperimentConfig& base, Index seeds, const std::filesystem::path& out_dir,
                           const RunCallback& on_run) {
  if (seeds < 1) throw std::invalid_argument("ablation needs at least one seed");
  base.validate();
  const DatasetSplit data = make_datasets(base.data, base.model.n_classes);
  std::map<std::string, AblationRow> by_arm;
  for (const auto& arm : ablation_arms()) {
    AblationRow row;
    row.arm = arm.name;
    row.seeds = seeds;
    for (Index i = 0; i < seeds; ++i) {
      ExperimentConfig cfg = base;
      cfg.model.fusion_mode = arm.fusion_mode;
      cfg.model.resample_mode = arm.resample_mode;
      cfg.train.seed = ablation_seed(base.train.seed, arm.name, i);
      const RunReport report = train_any(cfg, data, out_dir / arm.name / ("seed_" + std::to_string(i)));
      row.dice.push_back(report.final.dice);
      row.iou.push_back(report.final.iou);
      if (on_run) on_run(arm.name, i, report);
    }
    std::tie(row.dice_mean, row.dice_std) = mean_std(row.dice);
    std::tie(row.iou_mean, row.iou_std) = mean_std(row.iou);
    by_arm[arm.name] = std::move(row);
  }
  auto named = [&by_arm](const char* name, const char* arm) {
    AblationRow r = by_arm.at(arm);
    r.name = name;
    return r;
  };
  AblationTable table;
  table.fusion_rows = {named("No Fusion", "none"), named("Only Downward", "down_only"),
                       named("Only Upward Fuse", "up_only"), named("DownFuse + UpFuse", "both")};
  table.resample_rows = {named("Pooling+Conv", "pool_conv"), named("Reorganize+Group-Conv", "both")};
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "ablation.json", table.to_json());
  write_text(out_dir / "ablation.csv", table.to_csv());
  return table;
}

template EvalResult evaluate(FusionUNet<float>&, std::span<const SegSample>, Index);
template EvalResult evaluate(FusionUNet<double>&, std::span<const SegSample>, Index);
template RunReport train<float>(const ExperimentConfig&, const DatasetSplit&, const std::filesystem::path&,
                                const EpochCallback&);
template RunReport train<double>(const ExperimentConfig&, const DatasetSplit&, const std::filesystem::path&,
                                 const EpochCallback&);

}  // namespace fusionunet
