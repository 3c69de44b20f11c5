#include "fusionunet/losses.hpp"
#include "fusionunet/ops.hpp"
#include "fusionunet/optim.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace fusionunet;
using fusionunet::testing::random_tensor;

namespace {

std::vector<std::int32_t> random_labels(Index n, Index k, Rng& rng) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = static_cast<std::int32_t>(uniform_int(rng, 0, k - 1));
  return out;
}

// Per-pixel softmax probability of class c.
double prob(const Tensor<double>& z, Index n, Index c, Index pix, Index K, Index P) {
  double denom = 0;
  for (Index k = 0; k < K; ++k) denom += std::exp(z.value()[(n * K + k) * P + pix]);
  return std::exp(z.value()[(n * K + c) * P + pix]) / denom;
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  const std::vector<std::int32_t> labels{0, 1, 1, 0};
  EXPECT_NEAR(cross_entropy(Tensor<double>::zeros({1, 2, 2, 2}), labels).item(), std::numbers::ln2, 1e-15);
  const std::vector<std::int32_t> three(4, 2);
  EXPECT_NEAR(cross_entropy(Tensor<double>::zeros({1, 3, 2, 2}), three).item(), std::log(3.0), 1e-15);
}

TEST(CrossEntropy, MatchesLoop) {
  Rng rng(71);
  const Index N = 2, K = 3, P = 6;
  auto z = random_tensor({N, K, 2, 3}, rng, 2.0);
  const auto labels = random_labels(N * P, K, rng);
  double expected = 0;
  for (Index n = 0; n < N; ++n)
    for (Index p = 0; p < P; ++p) expected -= std::log(prob(z, n, labels[static_cast<std::size_t>(n * P + p)], p, K, P));
  EXPECT_NEAR(cross_entropy(z, labels).item(), expected / (N * P), 1e-13);
}

TEST(DiceLoss, MatchesBatchGlobalFormula) {
  Rng rng(72);
  const Index N = 2, K = 3, P = 4;
  auto z = random_tensor({N, K, 2, 2}, rng, 2.0);
  const auto labels = random_labels(N * P, K, rng);
  double total = 0;
  for (Index k = 0; k < K; ++k) {
    double inter = 0, ps = 0, ys = 0;
    for (Index n = 0; n < N; ++n)
      for (Index p = 0; p < P; ++p) {
        const double pr = prob(z, n, k, p, K, P);
        const double y = labels[static_cast<std::size_t>(n * P + p)] == k ? 1.0 : 0.0;
        inter += pr * y;
        ps += pr;
        ys += y;
      }
    total += (2 * inter + 1e-5) / (ps + ys + 1e-5);
  }
  EXPECT_NEAR(dice_loss(z, labels).item(), 1.0 - total / K, 1e-13);
}

TEST(FocalLoss, GammaZeroIsCrossEntropy) {
  Rng rng(73);
  auto z = random_tensor({2, 2, 3, 3}, rng, 3.0);
  const auto labels = random_labels(18, 2, rng);
  EXPECT_NEAR(focal_loss(z, labels, 0.0).item(), cross_entropy(z, labels).item(), 1e-12);
}

TEST(FocalLoss, MatchesLoop) {
  Rng rng(74);
  auto z = random_tensor({1, 3, 2, 2}, rng, 2.0);
  const auto labels = random_labels(4, 3, rng);
  double expected = 0;
  for (Index p = 0; p < 4; ++p) {
    const double pt = prob(z, 0, labels[static_cast<std::size_t>(p)], p, 3, 4);
    expected -= std::pow(1 - pt, 2.0) * std::log(pt);
  }
  EXPECT_NEAR(focal_loss(z, labels).item(), expected / 4, 1e-13);
}

TEST(Losses, PerfectLogitsGiveSmallLoss) {
  const std::vector<std::int32_t> labels{0, 1, 1, 0};
  Vector<double> v(8);
  for (Index p = 0; p < 4; ++p) {
    v[p] = labels[static_cast<std::size_t>(p)] == 0 ? 20.0 : -20.0;
    v[4 + p] = -v[p];
  }
  Tensor<double> z({1, 2, 2, 2}, v);
  EXPECT_LT(cross_entropy(z, labels).item(), 0.01);
  EXPECT_LT(dice_loss(z, labels).item(), 0.01);
  EXPECT_LT(focal_loss(z, labels).item(), 0.01);
  EXPECT_GE(dice_loss(z, labels).item(), 0.0);
}

TEST(Losses, CombinedIsSum) {
  Rng rng(75);
  auto z = random_tensor({1, 2, 2, 2}, rng);
  const auto labels = random_labels(4, 2, rng);
  EXPECT_NEAR(segmentation_loss(z, labels, LossKind::ce_dice).item(),
              cross_entropy(z, labels).item() + dice_loss(z, labels).item(), 1e-15);
  EXPECT_EQ(parse_loss_kind(to_string(LossKind::focal)), LossKind::focal);
}

TEST(Losses, RejectBadLabels) {
  const std::vector<std::int32_t> bad{0, 2, 1, 0};
  const auto z = Tensor<double>::zeros({1, 2, 2, 2});
  EXPECT_THROW(cross_entropy(z, bad), std::out_of_range);
  EXPECT_THROW(dice_loss(z, bad), std::out_of_range);
  EXPECT_THROW(focal_loss(z, bad), std::out_of_range);
  const std::vector<std::int32_t> negative{0, -1, 1, 0};
  EXPECT_THROW(cross_entropy(z, negative), std::out_of_range);
  const std::vector<std::int32_t> short_labels{0, 1};
  EXPECT_THROW(cross_entropy(z, short_labels), ShapeError);
}

// Scheduler oracle written out cycle by cycle.
double sgdr(std::int64_t step, double t0, double mult, double lr, double eta_min) {
  double start = 0, len = t0;
  while (step >= start + len) {
    start += len;
    len *= mult;
  }
  return eta_min + (lr - eta_min) * 0.5 * (1 + std::cos(std::numbers::pi * (step - start) / len));
}

TEST(Scheduler, WarmRestarts) {
  EXPECT_DOUBLE_EQ(cosine_warm_restart_lr(0, 10, 2.0, 1e-3, 1e-5), 1e-3);
  EXPECT_NEAR(cosine_warm_restart_lr(5, 10, 2.0, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_warm_restart_lr(10, 10, 2.0, 1e-3, 1e-5), 1e-3);
  EXPECT_DOUBLE_EQ(cosine_warm_restart_lr(30, 10, 2.0, 1e-3, 1e-5), 1e-3);
  EXPECT_NEAR(cosine_warm_restart_lr(20, 10, 2.0, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-15);
  for (std::int64_t s = 0; s < 100; ++s) {
    EXPECT_NEAR(cosine_warm_restart_lr(s, 10, 2.0, 1e-3, 1e-5), sgdr(s, 10, 2.0, 1e-3, 1e-5), 1e-15) << s;
    EXPECT_NEAR(cosine_warm_restart_lr(s, 7, 1.0, 0.1, 0.0), sgdr(s, 7, 1.0, 0.1, 0.0), 1e-15) << s;
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p({2}, {1.0, -1.0}, true);
  sum(3.0 * p).backward();
  AdamState<double> state;
  std::vector<Tensor<double>> params{p};
  adam_step<double>(params, state, AdamConfig{}, 0.01);
  EXPECT_NEAR(p.value()[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.value()[1], -1.0 - 0.01, 1e-9);
  EXPECT_EQ(state.steps, 1);
}

TEST(Adam, SolvesScalarQuadratic) {
  Tensor<double> p({1}, {3.0}, true);
  AdamState<double> state;
  std::vector<Tensor<double>> params{p};
  double f = 0;
  for (int i = 0; i < 500; ++i) {
    p.zero_grad();
    const auto d = p - Tensor<double>({1}, {0.5});
    const auto loss = sum(d * d);
    f = loss.item();
    loss.backward();
    adam_step<double>(params, state, AdamConfig{}, 0.1);
  }
  EXPECT_LT(f, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor<double> p({2}, {1.5, -2.0}, true);
  AdamState<double> state;
  std::vector<Tensor<double>> params{p};
  for (int i = 0; i < 3; ++i) adam_step<double>(params, state, AdamConfig{}, 0.1);
  EXPECT_EQ(p.value()[0], 1.5);
  EXPECT_EQ(p.value()[1], -2.0);
}

TEST(Adam, RejectsChangedParameterSet) {
  Tensor<double> a({2}, 0.0, true), b({3}, 0.0, true);
  AdamState<double> state;
  std::vector<Tensor<double>> one{a};
  adam_step<double>(one, state, AdamConfig{}, 0.1);
  std::vector<Tensor<double>> other{b};
  EXPECT_THROW(adam_step<double>(other, state, AdamConfig{}, 0.1), ShapeError);
}

TEST(Sgd, HeavyBallUpdates) {
  Tensor<double> p({1}, {1.0}, true);
  SgdState<double> state;
  std::vector<Tensor<double>> params{p};
  sum(2.0 * p).backward();
  sgd_step<double>(params, state, SgdConfig{0.1, 0.9}, 0.1);
  EXPECT_NEAR(p.item(), 1.0 - 0.1 * 2.0, 1e-15);
  sgd_step<double>(params, state, SgdConfig{0.1, 0.9}, 0.1);
  EXPECT_NEAR(p.item(), 0.8 - 0.1 * (0.9 * 2.0 + 2.0), 1e-15);
}

}  // namespace
