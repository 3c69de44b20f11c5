#pragma once

#include "fusionunet/ops.hpp"
#include "fusionunet/random.hpp"

#include <string>
#include <vector>

namespace fusionunet {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
  bool trainable = true;  // false for running statistics
};

template <typename Scalar>
using ParamList = std::vector<NamedTensor<Scalar>>;

/// U(-b, b) with b = sqrt(6 / fan_in).
template <typename Scalar>
Tensor<Scalar> he_uniform(Shape shape, Index fan_in, Rng& rng);

template <typename Scalar>
ConvParams<Scalar> make_conv(Index in_channels, Index out_channels, Index kernel, Index padding, Index groups,
                             Rng& rng);

template <typename Scalar>
void collect(const std::string& prefix, ConvParams<Scalar>& conv, ParamList<Scalar>& out);

template <typename Scalar>
struct BatchNorm2d {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  BatchNormStats<Scalar> stats;

  static BatchNorm2d make(Index channels);
};

/// conv 3x3 (pad 1) -> batch norm -> relu
template <typename Scalar>
struct ConvBnRelu {
  ConvParams<Scalar> conv;
  BatchNorm2d<Scalar> norm;

  static ConvBnRelu make(Index in_channels, Index out_channels, Rng& rng);
};

template <typename Scalar>
struct ConvBlock {
  ConvBnRelu<Scalar> first;
  ConvBnRelu<Scalar> second;

  static ConvBlock make(Index in_channels, Index out_channels, Rng& rng);
  Index in_channels() const { return first.conv.in_channels(); }
  Index out_channels() const { return second.conv.out_channels(); }
};

/// Efficient channel attention: a shared 1-D kernel over pooled channels.
template <typename Scalar>
struct EcaLayer {
  Tensor<Scalar> kernel;

  /// Odd kernel length adapted to the channel count, at least 3.
  static Index kernel_size(Index channels);
  static EcaLayer make(Index channels, Rng& rng);
};

/// Channel cross attention gating skip channels with pooled skip and
/// decoder descriptors.
template <typename Scalar>
struct CcaLayer {
  Tensor<Scalar> skip_weight;     // C_skip x C_skip
  Tensor<Scalar> skip_bias;       // C_skip
  Tensor<Scalar> decoder_weight;  // C_skip x C_dec
  Tensor<Scalar> decoder_bias;    // C_skip

  static CcaLayer make(Index skip_channels, Index decoder_channels, Rng& rng);
};

template <typename Scalar>
struct DownBlock {
  ConvBlock<Scalar> conv;

  static DownBlock make(Index in_channels, Rng& rng) { return {ConvBlock<Scalar>::make(in_channels, 2 * in_channels, rng)}; }
};

template <typename Scalar>
struct UpBlock {
  CcaLayer<Scalar> cca;
  ConvBlock<Scalar> conv;

  static UpBlock make(Index decoder_channels, Index skip_channels, Rng& rng);
};

template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, BatchNorm2d<Scalar>& bn, Mode mode) {
  return batchnorm2d(x, bn.gamma, bn.beta, bn.stats, mode);
}

template <typename Scalar>
Tensor<Scalar> conv_bn_relu_forward(const Tensor<Scalar>& x, ConvBnRelu<Scalar>& unit, Mode mode);

template <typename Scalar>
Tensor<Scalar> conv_block_forward(const Tensor<Scalar>& x, ConvBlock<Scalar>& block, Mode mode);

/// maxpool 2x2 then ConvBlock doubling the channels.
template <typename Scalar>
Tensor<Scalar> down_block_forward(const Tensor<Scalar>& x, DownBlock<Scalar>& block, Mode mode);

/// x * sigmoid(conv1d(GAP(x))), broadcast per channel.
template <typename Scalar>
Tensor<Scalar> eca_forward(const Tensor<Scalar>& x, const EcaLayer<Scalar>& layer);

/// skip * sigmoid(W_s GAP(skip) + b_s + W_d GAP(decoder) + b_d), per channel.
template <typename Scalar>
Tensor<Scalar> cca_forward(const Tensor<Scalar>& skip, const Tensor<Scalar>& decoder, const CcaLayer<Scalar>& layer);

/// Upsample the decoder path, gate the skip with CCA, concatenate [skip, up]
/// and reduce to the skip's channel count.
template <typename Scalar>
Tensor<Scalar> up_block_forward(const Tensor<Scalar>& decoder_in, const Tensor<Scalar>& skip, UpBlock<Scalar>& block,
                                Mode mode);

template <typename Scalar>
void collect(const std::string& prefix, BatchNorm2d<Scalar>& bn, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, ConvBnRelu<Scalar>& unit, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, ConvBlock<Scalar>& block, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, EcaLayer<Scalar>& layer, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, CcaLayer<Scalar>& layer, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, DownBlock<Scalar>& block, ParamList<Scalar>& out);
template <typename Scalar>
void collect(const std::string& prefix, UpBlock<Scalar>& block, ParamList<Scalar>& out);

/// Trainable scalar count of a collected list.
template <typename Scalar>
Index count_trainable(const ParamList<Scalar>& params);

}  // namespace fusionunet
