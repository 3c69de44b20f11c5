#include "fusionunet/model.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

using namespace fusionunet;
using fusionunet::testing::bitwise_equal;
using fusionunet::testing::random_tensor;
using fusionunet::testing::scratch_dir;

namespace {

// Independent closed-form counts for the architecture.

Index eca_k(Index c) {
  Index t = static_cast<Index>((std::log2(static_cast<double>(c)) + 1.0) / 2.0);
  if (t % 2 == 0) ++t;
  return std::max<Index>(t, 3);
}

std::int64_t conv_block_params(std::int64_t a, std::int64_t b) { return 9 * a * b + 9 * b * b + 6 * b; }

std::int64_t expected_params(const FusionConfig& cfg) {
  const std::int64_t C = cfg.base_width;
  std::int64_t total = conv_block_params(cfg.in_channels, C);
  for (int i = 0; i < 4; ++i) total += conv_block_params(C << i, C << (i + 1));
  const bool grouped = cfg.resample_mode == ResampleMode::reorganize_groupconv;
  const bool down = cfg.fusion_mode == FusionMode::both || cfg.fusion_mode == FusionMode::down_only;
  const bool up = cfg.fusion_mode == FusionMode::both || cfg.fusion_mode == FusionMode::up_only;
  for (Index b = 0; b < cfg.fuse_blocks(); ++b) {
    for (int i = 0; i < 3; ++i) {
      const std::int64_t c = C << i;
      if (down) total += (grouped ? 74 * c : 18 * c * c + 2 * c) + 2 + 36 * c * c + 6 * c + eca_k(2 * c);
      if (up) total += (grouped ? 76 * c : 18 * c * c + c) + 2 + 9 * c * c + 3 * c + eca_k(c);
    }
  }
  for (int i = 0; i < 4; ++i) {
    const std::int64_t d = C << (4 - i), s = C << (3 - i);
    total += s * s + s + s * d + s + conv_block_params(s + d, s);
  }
  return total + C * cfg.n_classes + cfg.n_classes;
}

std::int64_t expected_macs(const FusionConfig& cfg) {
  const std::int64_t C = cfg.base_width, S = cfg.input_side;
  auto sq = [](std::int64_t v) { return v * v; };
  std::int64_t m = 9 * cfg.in_channels * C * sq(S) + 9 * C * C * sq(S);
  for (int i = 0; i < 4; ++i) {
    const std::int64_t a = C << i, b = 2 * a, side = S >> (i + 1);
    m += (9 * a * b + 9 * b * b) * sq(side);
  }
  const bool grouped = cfg.resample_mode == ResampleMode::reorganize_groupconv;
  const bool down = cfg.fusion_mode == FusionMode::both || cfg.fusion_mode == FusionMode::down_only;
  const bool up = cfg.fusion_mode == FusionMode::both || cfg.fusion_mode == FusionMode::up_only;
  for (Index b = 0; b < cfg.fuse_blocks(); ++b) {
    for (int i = 0; i < 3; ++i) {
      const std::int64_t c = C << i, s = S >> i, h = s / 2;
      if (down) m += (grouped ? 2 * c * 4 * 9 * sq(h) : 9 * c * 2 * c * sq(h)) + 9 * 4 * c * c * sq(h) + eca_k(2 * c) * 2 * c;
      if (up) m += (grouped ? 4 * c * 2 * 9 * sq(h) : 9 * 2 * c * c * sq(s)) + 9 * c * c * sq(s) + eca_k(c) * c;
    }
  }
  for (int i = 0; i < 4; ++i) {
    const std::int64_t d = C << (4 - i), s = C << (3 - i), side = S >> (3 - i);
    m += s * s + s * d + (9 * (s + d) * s + 9 * s * s) * sq(side);
  }
  return m + C * cfg.n_classes * sq(S);
}

FusionConfig small_config(Precision p = Precision::f64) {
  FusionConfig c;
  c.base_width = 8;
  c.input_side = 32;
  c.precision = p;
  return c;
}

TEST(ModelCost, ParamsMatchClosedForm) {
  for (auto fusion : {FusionMode::none, FusionMode::down_only, FusionMode::up_only, FusionMode::both}) {
    for (auto resample : {ResampleMode::reorganize_groupconv, ResampleMode::pool_conv}) {
      FusionConfig c = small_config(Precision::f32);
      c.fusion_mode = fusion;
      c.resample_mode = resample;
      c.fuse_stack = 2;
      const auto cost = count_cost(c, {1, 3, 32, 32});
      EXPECT_EQ(cost.params, expected_params(c)) << to_string(fusion) << " " << to_string(resample);
      EXPECT_EQ(cost.macs, expected_macs(c)) << to_string(fusion) << " " << to_string(resample);
      EXPECT_GT(cost.flops, 2 * cost.macs);
    }
  }
}

TEST(ModelCost, FullScaleMatchesClosedForm) {
  const FusionConfig c;
  const auto cost = count_cost(c, {1, 3, 224, 224});
  EXPECT_EQ(cost.params, expected_params(c));
  EXPECT_EQ(cost.macs, expected_macs(c));
}

TEST(ModelCost, MacsScaleWithBatch) {
  const FusionConfig c = small_config(Precision::f32);
  EXPECT_EQ(count_cost(c, {3, 3, 32, 32}).macs, 3 * count_cost(c, {1, 3, 32, 32}).macs);
}

TEST(Model, ForwardShape) {
  auto model = FusionUNet<double>::build(small_config(), 5);
  Rng rng(51);
  EXPECT_EQ(model.forward(random_tensor({2, 3, 32, 32}, rng), Mode::train).shape(), (Shape{2, 2, 32, 32}));
  EXPECT_THROW(model.forward(random_tensor({2, 3, 16, 16}, rng), Mode::train), ShapeError);
}

TEST(Model, BuildIsDeterministicPerSeed) {
  auto a = FusionUNet<float>::build(small_config(Precision::f32), 9);
  auto b = FusionUNet<float>::build(small_config(Precision::f32), 9);
  auto c = FusionUNet<float>::build(small_config(Precision::f32), 10);
  const auto sa = a.state(), sb = b.state(), sc = c.state();
  ASSERT_EQ(sa.size(), sb.size());
  bool any_differs = false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].name, sb[i].name);
    EXPECT_TRUE(bitwise_equal(sa[i].tensor, sb[i].tensor)) << sa[i].name;
    any_differs = any_differs || !bitwise_equal(sa[i].tensor, sc[i].tensor);
  }
  EXPECT_TRUE(any_differs);
}

TEST(Model, NoFusionLeavesThePyramidAlone) {
  FusionConfig c = small_config();
  c.fusion_mode = FusionMode::none;
  auto model = FusionUNet<double>::build(c, 3);
  Rng rng(52);
  const auto pyramid = model.encode(random_tensor({1, 3, 32, 32}, rng), Mode::eval);
  const auto fused = model.fuse(pyramid, Mode::eval);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(bitwise_equal(fused.levels[i], pyramid.levels[i]));
}

TEST(Model, RejectsPrecisionMismatchAndBadConfig) {
  EXPECT_THROW(FusionUNet<float>::build(small_config(Precision::f64), 1), std::invalid_argument);
  FusionConfig c = small_config();
  c.input_side = 40;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.base_width = 6;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.n_classes = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(FusionConfigJson, RoundTrip) {
  FusionConfig c = small_config();
  c.fusion_mode = FusionMode::up_only;
  c.resample_mode = ResampleMode::pool_conv;
  c.fuse_stack = 3;
  c.n_classes = 4;
  EXPECT_EQ(FusionConfig::from_json(c.to_json()), c);
  EXPECT_THROW(FusionConfig::from_json(R"({"base_width": 8, "colour": 1})"), std::invalid_argument);
  EXPECT_THROW(FusionConfig::from_json(R"({"fusion_mode": "sideways"})"), std::invalid_argument);
}

TEST(Checkpoint, RoundTripReproducesOutputs) {
  const auto dir = scratch_dir("checkpoint_roundtrip");
  auto model = FusionUNet<double>::build(small_config(), 7);
  Rng rng(53);
  const auto x = random_tensor({2, 3, 32, 32}, rng);
  model.forward(x, Mode::train);  // moves the running statistics
  save_checkpoint(model, dir / "m.funw");
  EXPECT_EQ(read_checkpoint_config(dir / "m.funw"), model.config());
  auto loaded = load_checkpoint<double>(dir / "m.funw");
  EXPECT_TRUE(bitwise_equal(model.forward(x, Mode::eval), loaded.forward(x, Mode::eval)));
  save_checkpoint(loaded, dir / "again.funw");
  EXPECT_EQ(fusionunet::testing::read_file(dir / "m.funw"), fusionunet::testing::read_file(dir / "again.funw"));
}

TEST(Checkpoint, RejectsCorruption) {
  const auto dir = scratch_dir("checkpoint_errors");
  auto model = FusionUNet<float>::build(small_config(Precision::f32), 7);
  save_checkpoint(model, dir / "m.funw");
  const std::string bytes = fusionunet::testing::read_file(dir / "m.funw");

  std::ofstream(dir / "truncated.funw", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint<float>(dir / "truncated.funw"), FormatError);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::ofstream(dir / "magic.funw", std::ios::binary) << bad_magic;
  EXPECT_THROW(load_checkpoint<float>(dir / "magic.funw"), FormatError);

  std::ofstream(dir / "trailing.funw", std::ios::binary) << bytes << "extra";
  EXPECT_THROW(load_checkpoint<float>(dir / "trailing.funw"), FormatError);

  EXPECT_THROW(load_checkpoint<double>(dir / "m.funw"), FormatError);
  EXPECT_ANY_THROW(load_checkpoint<float>(dir / "missing.funw"));

  FusionConfig other = small_config(Precision::f32);
  other.fusion_mode = FusionMode::none;
  auto different = FusionUNet<float>::build(other, 7);
  EXPECT_THROW(load_checkpoint_into(different, dir / "m.funw"), FormatError);
}

}  // namespace
