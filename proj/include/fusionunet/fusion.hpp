#pragma once

#include "fusionunet/blocks.hpp"

#include <array>
#include <span>
#include <string_view>
#include <vector>

namespace fusionunet {

// Space-to-depth that keeps each 2x2 neighbourhood together:
//   out[n, 4c + 2dy + dx, i, j] = in[n, c, 2i + dy, 2j + dx],  dy, dx in {0, 1}
// The four sub-samples of input channel c occupy output channels 4c..4c+3.

/// N x C x H x W -> N x 4C x H/2 x W/2. H and W must be even.
template <typename Scalar>
Tensor<Scalar> reorganize(const Tensor<Scalar>& x);

/// N x 4C x H x W -> N x C x 2H x 2W; exact inverse of reorganize.
template <typename Scalar>
Tensor<Scalar> inverse_reorganize(const Tensor<Scalar>& x);

enum class FusionMode { none, down_only, up_only, both };
enum class ResampleMode { reorganize_groupconv, pool_conv };

std::string_view to_string(FusionMode mode);
std::string_view to_string(ResampleMode mode);
FusionMode parse_fusion_mode(std::string_view text);
ResampleMode parse_resample_mode(std::string_view text);

/// Encoder outputs T1..T4 plus the bottleneck. levels[i] has 2^i * C
/// channels at side S / 2^i.
template <typename Scalar>
struct FeaturePyramid {
  std::array<Tensor<Scalar>, 4> levels;
  Tensor<Scalar> bottleneck;

  /// Throws ShapeError when consecutive levels do not double channels and
  /// halve both spatial dims.
  void validate() const;
};

/// Grouped 3x3 conv: N x 4C -> N x 2C with C groups, so each group sees
/// exactly the four channels produced from one 2x2 neighbourhood.
template <typename Scalar>
Tensor<Scalar> group_fuse_down(const Tensor<Scalar>& x, const ConvParams<Scalar>& conv);

/// Grouped 3x3 conv: N x 2C -> N x 4C with C groups; feeds inverse_reorganize.
template <typename Scalar>
Tensor<Scalar> group_fuse_up(const Tensor<Scalar>& x, const ConvParams<Scalar>& conv);

/// Ablation arm: maxpool then a dense 3x3 conv C -> 2C.
template <typename Scalar>
Tensor<Scalar> pool_conv_down(const Tensor<Scalar>& shallow, const ConvParams<Scalar>& conv);

/// Ablation arm: bilinear upsample then a dense 3x3 conv 2C -> C.
template <typename Scalar>
Tensor<Scalar> upsample_conv_up(const Tensor<Scalar>& deep, const ConvParams<Scalar>& conv);

/// Fuses an adjacent pair into the deeper member's shape.
template <typename Scalar>
struct DownFuse {
  ResampleMode resample = ResampleMode::reorganize_groupconv;
  ConvParams<Scalar> resample_conv;
  Tensor<Scalar> alpha;  // weight of the resampled shallow map
  Tensor<Scalar> beta;   // weight of the deep map
  ConvBnRelu<Scalar> post;
  EcaLayer<Scalar> eca;

  static DownFuse make(Index shallow_channels, ResampleMode resample, Rng& rng);
};

/// Fuses an adjacent pair into the shallower member's shape.
template <typename Scalar>
struct UpFuse {
  ResampleMode resample = ResampleMode::reorganize_groupconv;
  ConvParams<Scalar> resample_conv;
  Tensor<Scalar> alpha;  // weight of the resampled deep map
  Tensor<Scalar> beta;   // weight of the shallow map
  ConvBnRelu<Scalar> post;
  EcaLayer<Scalar> eca;

  static UpFuse make(Index shallow_channels, ResampleMode resample, Rng& rng);
};

/// ECA(ConvBnRelu(alpha * resample(shallow) + beta * deep)), shaped like `deep`.
template <typename Scalar>
Tensor<Scalar> down_fuse(const Tensor<Scalar>& shallow, const Tensor<Scalar>& deep, DownFuse<Scalar>& unit, Mode mode);

/// ECA(ConvBnRelu(alpha * resample(deep) + beta * shallow)), shaped like `shallow`.
template <typename Scalar>
Tensor<Scalar> up_fuse(const Tensor<Scalar>& deep, const Tensor<Scalar>& shallow, UpFuse<Scalar>& unit, Mode mode);

/// One pass of the two-round schedule. down[i] fuses levels (i, i+1) and
/// up[i] fuses levels (i+1, i); either list is empty when its round is
/// disabled.
template <typename Scalar>
struct FuseBlock {
  FusionMode mode = FusionMode::both;
  std::vector<DownFuse<Scalar>> down;
  std::vector<UpFuse<Scalar>> up;

  static FuseBlock make(Index base_channels, FusionMode mode, ResampleMode resample, Rng& rng);
};

/// Round 1 (shallow to deep):  T2' = D(T1, T2), T3' = D(T2', T3), T4' = D(T3', T4)
/// Round 2 (deep to shallow):  T3'' = U(T4', T3'), T2'' = U(T3'', T2'), T1'' = U(T2'', T1)
/// Each stage reads the most recent version of both operands. The
/// bottleneck passes through.
template <typename Scalar>
FeaturePyramid<Scalar> fuse_block_forward(const FeaturePyramid<Scalar>& pyramid, FuseBlock<Scalar>& block, Mode mode);

/// Applies the blocks in order; an empty stack is the identity.
template <typename Scalar>
FeaturePyramid<Scalar> fusion_module_forward(const FeaturePyramid<Scalar>& pyramid,
                                             std::span<FuseBlock<Scalar>> blocks, Mode mode);

template <typename Scalar>
void collect(const std::string& prefix, DownFuse<Scalar>& unit, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, UpFuse<Scalar>& unit, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, FuseBlock<Scalar>& block, ParamList<Scalar>& out);

}  // namespace fusionunet
