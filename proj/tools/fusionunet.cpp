// fusionunet: data generation, training, evaluation, ablation, gradient
// audit and cost accounting from the command line.
//
// Exit codes: 0 success, 1 usage or invalid input, 2 numeric failure
// (diverged training or a failed gradient audit).

#include "fusionunet/audit.hpp"
#include "fusionunet/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fu = fusionunet;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

fu::ExperimentConfig load_experiment(const Globals& g) {
  fu::ExperimentConfig config = fu::ExperimentConfig::desk();
  if (!g.config_path.empty()) {
    try {
      config = fu::ExperimentConfig::from_json(read_text(g.config_path), config);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(g.config_path + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw UsageError(g.config_path + ": " + e.what());
    }
  }
  return config;
}

// `info` starts from the full-scale model and only reads the "model" section.
fu::FusionConfig load_model_for_info(const Globals& g) {
  fu::FusionConfig config;
  if (g.config_path.empty()) return config;
  try {
    const auto j = nlohmann::json::parse(read_text(g.config_path));
    if (!j.contains("model")) return config;
    auto merged = nlohmann::json::parse(config.to_json());
    merged.merge_patch(j["model"]);
    return fu::FusionConfig::from_json(merged.dump());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(g.config_path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(g.config_path + ": " + e.what());
  }
}

void print_epoch(const fu::EpochRecord& e) {
  std::printf("epoch %3ld  loss %.5f  val_dice %.4f  val_iou %.4f  lr %.6f\n", static_cast<long>(e.epoch), e.train_loss,
              e.val_dice, e.val_iou, e.lr);
  std::fflush(stdout);
}

fu::DatasetSplit load_split_dirs(const std::filesystem::path& dir, fu::Index n_classes) {
  fu::DatasetSplit split;
  split.train = fu::load_dataset(dir / "train", n_classes);
  split.val = fu::load_dataset(dir / "val", n_classes);
  if (std::filesystem::exists(dir / "test" / "manifest.json")) split.test = fu::load_dataset(dir / "test", n_classes);
  return split;
}

int cmd_gen_data(const Globals& g) {
  fu::ExperimentConfig config = load_experiment(g);
  if (g.seed) config.data.spec.seed = *g.seed;
  const fu::DatasetSplit split = fu::make_datasets(config.data, config.model.n_classes);
  const std::filesystem::path root = std::filesystem::path(g.out_dir) / "data";
  fu::save_dataset(split.train, config.data.spec, config.model.n_classes, root / "train");
  fu::save_dataset(split.val, config.data.spec, config.model.n_classes, root / "val");
  if (!split.test.empty()) fu::save_dataset(split.test, config.data.spec, config.model.n_classes, root / "test");
  std::printf("wrote %zu train, %zu val, %zu test samples to %s (foreground fraction %.3f)\n", split.train.size(),
              split.val.size(), split.test.size(), root.string().c_str(), fu::foreground_fraction(split.train));
  return 0;
}

int cmd_train(const Globals& g, const std::string& data_dir) {
  fu::ExperimentConfig config = load_experiment(g);
  if (g.seed) config.train.seed = *g.seed;
  const fu::DatasetSplit data = data_dir.empty() ? fu::make_datasets(config.data, config.model.n_classes)
                                                 : load_split_dirs(data_dir, config.model.n_classes);
  const fu::RunReport report = fu::train_any(config, data, g.out_dir, print_epoch);
  std::printf("best epoch %ld, val Dice %.4f; final %s Dice %.4f IoU %.4f (foreground Dice %.4f); %.1f s\n",
              static_cast<long>(report.best_epoch), report.best_val_dice, report.final_split.c_str(),
              report.final.dice, report.final.iou, report.final.foreground_dice, report.wall_clock_seconds);
  std::printf("outputs in %s\n", g.out_dir.c_str());
  return 0;
}

template <typename Scalar>
fu::EvalResult evaluate_checkpoint(const std::string& path, std::span<const fu::SegSample> samples, fu::Index batch) {
  auto model = fu::load_checkpoint<Scalar>(path);
  return fu::evaluate(model, samples, batch);
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& data_dir, const std::string& split) {
  const fu::FusionConfig model_config = fu::read_checkpoint_config(checkpoint);
  fu::ExperimentConfig config = load_experiment(g);
  config.model = model_config;
  std::vector<fu::SegSample> samples;
  if (!data_dir.empty()) {
    samples = fu::load_dataset(std::filesystem::path(data_dir) / split, model_config.n_classes);
  } else {
    fu::DatasetSplit generated = fu::make_datasets(config.data, model_config.n_classes);
    samples = split == "train" ? std::move(generated.train)
              : split == "test" ? std::move(generated.test)
                                : std::move(generated.val);
  }
  if (samples.empty()) throw UsageError("no samples in the '" + split + "' split");
  const fu::EvalResult r = model_config.precision == fu::Precision::f64
                               ? evaluate_checkpoint<double>(checkpoint, samples, config.train.eval_batch_size)
                               : evaluate_checkpoint<float>(checkpoint, samples, config.train.eval_batch_size);
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["split"] = split;
  j["samples"] = samples.size();
  j["dice"] = r.dice;
  j["iou"] = r.iou;
  j["foreground_dice"] = r.foreground_dice;
  j["foreground_iou"] = r.foreground_iou;
  std::filesystem::create_directories(g.out_dir);
  std::ofstream(std::filesystem::path(g.out_dir) / "eval.json") << j.dump(2) << '\n';
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_ablate(const Globals& g, fu::Index seeds) {
  fu::ExperimentConfig config = load_experiment(g);
  if (g.seed) config.train.seed = *g.seed;
  const auto table = fu::run_ablation(config, seeds, g.out_dir, [](const std::string& arm, fu::Index i, const fu::RunReport& r) {
    std::printf("%-10s seed %ld  Dice %.4f  IoU %.4f  (%.0f s)\n", arm.c_str(), static_cast<long>(i), r.final.dice,
                r.final.iou, r.wall_clock_seconds);
    std::fflush(stdout);
  });
  std::printf("\n%-24s %6s %16s %16s\n", "Method", "seeds", "Dice", "IoU");
  auto print = [](const fu::AblationRow& r) {
    std::printf("%-24s %6ld %8.2f +- %5.2f %8.2f +- %5.2f\n", r.name.c_str(), static_cast<long>(r.seeds),
                100 * r.dice_mean, 100 * r.dice_std, 100 * r.iou_mean, 100 * r.iou_std);
  };
  for (const auto& r : table.fusion_rows) print(r);
  std::printf("\n");
  for (const auto& r : table.resample_rows) print(r);
  std::printf("\ntable written to %s/ablation.{json,csv}\n", g.out_dir.c_str());
  return 0;
}

int cmd_gradcheck(const Globals& g, fu::Index coords) {
  fu::AuditOptions options;
  if (g.seed) options.seed = *g.seed;
  options.model_coords_per_tensor = coords;
  const fu::AuditReport report = fu::run_gradient_audit(options, [](const fu::AuditEntry& e) {
    std::printf("%s  %-40s max_rel_err %.3e  checked %5ld  kink-skipped %ld\n", e.passed ? "PASS" : "FAIL",
                e.name.c_str(), e.result.max_rel_error, static_cast<long>(e.result.checked),
                static_cast<long>(e.result.skipped_kinks));
    std::fflush(stdout);
  });
  if (!report.missing_ops.empty()) {
    std::printf("FAIL  ops with a backward rule but no audit coverage:");
    for (const auto& op : report.missing_ops) std::printf(" %s", op.c_str());
    std::printf("\n");
  } else {
    std::printf("coverage: all %zu differentiable ops exercised\n", fu::differentiable_ops().size());
  }
  std::printf("gradient audit %s (tolerance %.0e)\n", report.passed() ? "passed" : "FAILED", report.tolerance);
  return report.passed() ? 0 : kExitNumeric;
}

int cmd_info(const Globals& g, bool json) {
  const fu::FusionConfig config = load_model_for_info(g);
  const fu::Shape input{1, config.in_channels, config.input_side, config.input_side};
  const fu::CostReport cost = fu::count_cost(config, input);
  if (json) {
    nlohmann::ordered_json j;
    j["config"] = nlohmann::ordered_json::parse(config.to_json());
    j["input_shape"] = input;
    j["params"] = cost.params;
    j["macs"] = cost.macs;
    j["flops"] = cost.flops;
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::printf("config      %s\n", config.to_json().c_str());
  std::printf("input       %s\n", fu::to_string(input).c_str());
  std::printf("params      %ld (%.2fM)\n", static_cast<long>(cost.params), cost.params / 1e6);
  std::printf("MACs        %lld (%.2fG)\n", static_cast<long long>(cost.macs), cost.macs / 1e9);
  std::printf("FLOPs       %lld (%.2fG, 2 per MAC plus elementwise work)\n", static_cast<long long>(cost.flops),
              cost.flops / 1e9);
  std::printf("reference   published FusionU-Net at 1x3x224x224: 25.80M params, 55.95G FLOPs\n");
  std::printf("            acceptance band: params 20.64M..30.96M, FLOPs 41.96G..69.94G\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FusionU-Net: U-Net with two-round adjacent-feature fusion on the skip connections"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "experiment config (JSON with optional model/train/data sections)");
  auto* seed_opt = app.add_option("--seed", seed, "run seed (data seed for gen-data)");
  app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset to netpbm files");

  std::string data_dir;
  auto* train = app.add_subcommand("train", "train one model; writes metrics.csv, report.json, best.funw");
  train->add_option("--data-dir", data_dir, "load train/val[/test] from a gen-data directory instead of generating");

  std::string checkpoint, eval_dir, split = "val";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data-dir", eval_dir, "gen-data directory to read the split from");
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();

  fu::Index seeds = 5;
  auto* ablate = app.add_subcommand("ablate", "fusion-mode and resample-mode ablation over several seeds");
  ablate->add_option("--seeds", seeds, "seeds per arm")->check(CLI::PositiveNumber)->capture_default_str();

  fu::Index coords = 3;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of every op and block");
  gradcheck->add_option("--model-coords", coords, "coordinates sampled per parameter tensor of the full model")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  bool json = false;
  auto* info = app.add_subcommand("info", "parameter and FLOP count (full-scale model unless --config overrides)");
  info->add_flag("--json", json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g, data_dir);
    if (*eval) return cmd_eval(g, checkpoint, eval_dir, split);
    if (*ablate) return cmd_ablate(g, seeds);
    if (*gradcheck) return cmd_gradcheck(g, coords);
    if (*info) return cmd_info(g, json);
  } catch (const fu::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n\n%s", e.what(), app.help().c_str());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
