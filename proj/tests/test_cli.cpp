// Drives the fusionunet executable and checks exit codes and outputs.

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using fusionunet::testing::read_file;
using fusionunet::testing::scratch_dir;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(FUSIONUNET_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const std::string& name, const std::string& json) {
  std::ofstream(dir / name) << json;
  return dir / name;
}

const char* kTiny =
    R"({"model": {"base_width": 4, "input_side": 32}, "train": {"epochs": 2},
        "data": {"n_train": 8, "n_val": 4, "spec": {"side": 32}}})";

TEST(Cli, UsageErrorsExitOne) {
  const auto dir = scratch_dir("cli_usage");
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("bogus"), 1);
  EXPECT_EQ(run("train --no-such-flag"), 1);
  EXPECT_EQ(run("--config " + (dir / "missing.json").string() + " train"), 1);
  const auto bad = write_config(dir, "bad.json", R"({"train": {"epochz": 1}})");
  EXPECT_EQ(run("--config " + bad.string() + " train"), 1);
  EXPECT_EQ(run("eval"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, InfoReportsFullScaleCounts) {
  const auto dir = scratch_dir("cli_info");
  const std::string out = (dir / "info.json").string();
  ASSERT_EQ(std::system((std::string(FUSIONUNET_CLI) + " info --json > " + out).c_str()), 0);
  const std::string text = read_file(out);
  EXPECT_NE(text.find("\"params\": 36379178"), std::string::npos) << text;
  EXPECT_NE(text.find("\"input_side\": 224"), std::string::npos);
}

TEST(Cli, TrainTwiceGivesIdenticalCsvAndEvalReadsCheckpoint) {
  const auto dir = scratch_dir("cli_train");
  const auto cfg = write_config(dir, "tiny.json", kTiny);
  const std::string common = "--config " + cfg.string() + " --seed 1 --out-dir ";
  ASSERT_EQ(run(common + (dir / "a").string() + " train"), 0);
  ASSERT_EQ(run(common + (dir / "b").string() + " train"), 0);
  EXPECT_EQ(read_file(dir / "a" / "metrics.csv"), read_file(dir / "b" / "metrics.csv"));
  EXPECT_EQ(read_file(dir / "a" / "best.funw"), read_file(dir / "b" / "best.funw"));
  ASSERT_EQ(run(common + (dir / "e").string() + " eval --checkpoint " + (dir / "a" / "best.funw").string()), 0);
  EXPECT_NE(read_file(dir / "e" / "eval.json").find("\"dice\""), std::string::npos);
}

TEST(Cli, GenDataThenTrainFromDisk) {
  const auto dir = scratch_dir("cli_gen");
  const auto cfg = write_config(dir, "tiny.json", kTiny);
  ASSERT_EQ(run("--config " + cfg.string() + " --out-dir " + dir.string() + " gen-data"), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "data" / "train" / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "data" / "val" / "images" / "0003.ppm"));
  ASSERT_EQ(run("--config " + cfg.string() + " --out-dir " + (dir / "disk").string() + " train --data-dir " +
                (dir / "data").string()),
            0);
  ASSERT_EQ(run("--config " + cfg.string() + " --out-dir " + (dir / "mem").string() + " train"), 0);
  EXPECT_EQ(read_file(dir / "disk" / "metrics.csv"), read_file(dir / "mem" / "metrics.csv"));
}

TEST(Cli, DivergenceExitsTwo) {
  const auto dir = scratch_dir("cli_diverge");
  const auto cfg = write_config(dir, "diverge.json",
                                R"({"model": {"base_width": 4, "input_side": 32},
                                    "train": {"epochs": 1, "adam": {"lr": 1e300}, "scheduler": {"eta_min": 0}},
                                    "data": {"n_train": 8, "n_val": 4, "spec": {"side": 32}}})");
  EXPECT_EQ(run("--config " + cfg.string() + " --out-dir " + dir.string() + " train"), 2);
}

}  // namespace
