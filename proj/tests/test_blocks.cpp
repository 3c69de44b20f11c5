#include "fusionunet/blocks.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fusionunet;
using fusionunet::testing::random_tensor;

namespace {

TEST(HeUniform, StaysInsideBound) {
  Rng rng(41);
  const auto w = he_uniform<double>({64, 8, 3, 3}, 72, rng);
  const double bound = std::sqrt(6.0 / 72.0);
  EXPECT_LE(w.value().cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(w.value().cwiseAbs().maxCoeff(), 0.9 * bound);
  EXPECT_TRUE(w.requires_grad());
}

TEST(ConvBlock, ShapeAndParameterCount) {
  Rng rng(42);
  auto block = ConvBlock<double>::make(3, 8, rng);
  ParamList<double> params;
  collect("b", block, params);
  // two convs with bias, two batch norms with gamma and beta
  EXPECT_EQ(count_trainable(params), 9 * 3 * 8 + 8 + 2 * 8 + 9 * 8 * 8 + 8 + 2 * 8);
  EXPECT_EQ(conv_block_forward(random_tensor({2, 3, 6, 6}, rng), block, Mode::train).shape(), (Shape{2, 8, 6, 6}));
}

TEST(ConvBlock, OutputIsNonNegative) {
  Rng rng(43);
  auto block = ConvBlock<double>::make(2, 4, rng);
  const auto y = conv_block_forward(random_tensor({2, 2, 5, 5}, rng), block, Mode::train);
  EXPECT_GE(y.value().minCoeff(), 0.0);
}

TEST(ConvBlock, RunningStatsAreNotTrainable) {
  Rng rng(44);
  auto block = ConvBlock<double>::make(2, 4, rng);
  ParamList<double> params;
  collect("b", block, params);
  Index frozen = 0;
  for (const auto& p : params) frozen += p.trainable ? 0 : 1;
  EXPECT_EQ(frozen, 4);
}

// ECA rule: t = floor(|log2(C) + 1| / 2), bumped to the next odd number, at least 3.
TEST(Eca, KernelSizeTable) {
  const std::vector<std::pair<Index, Index>> table{{4, 3},   {8, 3},   {16, 3},  {32, 3},  {64, 3},
                                                   {128, 5}, {256, 5}, {512, 5}, {1024, 5}, {4096, 7}};
  for (auto [channels, k] : table) EXPECT_EQ(EcaLayer<double>::kernel_size(channels), k) << channels;
}

TEST(Eca, GateLiesInOpenUnitInterval) {
  Rng rng(45);
  auto eca = EcaLayer<double>::make(8, rng);
  Vector<double> v = random_tensor({2, 8, 3, 3}, rng).value().cwiseAbs().array() + 0.1;
  Tensor<double> x({2, 8, 3, 3}, v);
  const auto y = eca_forward(x, eca);
  ASSERT_EQ(y.shape(), x.shape());
  for (Index c = 0; c < 16; ++c) {
    const double ratio = y.value()[c * 9] / x.value()[c * 9];
    EXPECT_GT(ratio, 0.0);
    EXPECT_LT(ratio, 1.0);
    for (Index i = 1; i < 9; ++i) EXPECT_NEAR(y.value()[c * 9 + i] / x.value()[c * 9 + i], ratio, 1e-14);
  }
}

TEST(Eca, MatchesHandComputedGate) {
  EcaLayer<double> eca{Tensor<double>({3}, {0.5, -1.0, 2.0})};
  Tensor<double> x({1, 3, 1, 2}, {1, 3, 2, 2, -1, 1});
  // pooled descriptor [2, 2, 0]; zero padded cross-correlation
  const double pooled[3] = {2, 2, 0};
  const auto y = eca_forward(x, eca);
  for (Index c = 0; c < 3; ++c) {
    double z = 0;
    for (Index j = 0; j < 3; ++j) {
      const Index src = c + j - 1;
      if (src >= 0 && src < 3) z += eca.kernel.value()[j] * pooled[src];
    }
    const double gate = 1.0 / (1.0 + std::exp(-z));
    for (Index i = 0; i < 2; ++i) EXPECT_NEAR(y.value()[c * 2 + i], gate * x.value()[c * 2 + i], 1e-14);
  }
}

TEST(Cca, ZeroWeightsHalveTheSkip) {
  Rng rng(46);
  auto cca = CcaLayer<double>::make(4, 6, rng);
  cca.skip_weight.mutable_value().setZero();
  cca.decoder_weight.mutable_value().setZero();
  auto skip = random_tensor({2, 4, 3, 3}, rng);
  const auto y = cca_forward(skip, random_tensor({2, 6, 3, 3}, rng), cca);
  for (Index i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], 0.5 * skip.value()[i]);
}

TEST(Cca, ScalesEachChannelByOneFactor) {
  Rng rng(47);
  auto cca = CcaLayer<double>::make(3, 5, rng);
  Vector<double> v = random_tensor({1, 3, 2, 2}, rng).value().cwiseAbs().array() + 0.1;
  Tensor<double> skip({1, 3, 2, 2}, v);
  const auto y = cca_forward(skip, random_tensor({1, 5, 2, 2}, rng), cca);
  for (Index c = 0; c < 3; ++c) {
    const double ratio = y.value()[c * 4] / skip.value()[c * 4];
    EXPECT_GT(ratio, 0.0);
    EXPECT_LT(ratio, 1.0);
    for (Index i = 1; i < 4; ++i) EXPECT_NEAR(y.value()[c * 4 + i] / skip.value()[c * 4 + i], ratio, 1e-14);
  }
}

TEST(DownBlock, HalvesSideDoublesChannels) {
  Rng rng(48);
  auto block = DownBlock<double>::make(4, rng);
  EXPECT_EQ(down_block_forward(random_tensor({1, 4, 8, 8}, rng), block, Mode::train).shape(), (Shape{1, 8, 4, 4}));
}

TEST(UpBlock, RestoresSkipShape) {
  Rng rng(49);
  auto block = UpBlock<double>::make(8, 4, rng);
  const auto y = up_block_forward(random_tensor({2, 8, 4, 4}, rng), random_tensor({2, 4, 8, 8}, rng), block, Mode::train);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 8, 8}));
  EXPECT_THROW(up_block_forward(random_tensor({2, 8, 3, 3}, rng), random_tensor({2, 4, 8, 8}, rng), block, Mode::train),
               ShapeError);
}

}  // namespace
