#include "fusionunet/blocks.hpp"

#include <cmath>

namespace fusionunet {

template <typename Scalar>
Tensor<Scalar> he_uniform(Shape shape, Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Vector<Scalar> values(numel(shape));
  for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<Scalar>(uniform(rng, -bound, bound));
  return Tensor<Scalar>(std::move(shape), std::move(values), true);
}

template <typename Scalar>
ConvParams<Scalar> make_conv(Index in_channels, Index out_channels, Index kernel, Index padding, Index groups,
                             Rng& rng) {
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv channels not divisible by groups");
  }
  const Index fan_in = in_channels / groups * kernel * kernel;
  ConvParams<Scalar> p;
  p.weight = he_uniform<Scalar>({out_channels, in_channels / groups, kernel, kernel}, fan_in, rng);
  p.bias = Tensor<Scalar>({out_channels}, Scalar(0), true);
  p.padding = padding;
  p.groups = groups;
  return p;
}

template <typename Scalar>
BatchNorm2d<Scalar> BatchNorm2d<Scalar>::make(Index channels) {
  BatchNorm2d bn;
  bn.gamma = Tensor<Scalar>({channels}, Scalar(1), true);
  bn.beta = Tensor<Scalar>({channels}, Scalar(0), true);
  bn.stats.running_mean = Tensor<Scalar>({channels}, Scalar(0));
  bn.stats.running_var = Tensor<Scalar>({channels}, Scalar(1));
  return bn;
}

template <typename Scalar>
ConvBnRelu<Scalar> ConvBnRelu<Scalar>::make(Index in_channels, Index out_channels, Rng& rng) {
  return {make_conv<Scalar>(in_channels, out_channels, 3, 1, 1, rng), BatchNorm2d<Scalar>::make(out_channels)};
}

template <typename Scalar>
ConvBlock<Scalar> ConvBlock<Scalar>::make(Index in_channels, Index out_channels, Rng& rng) {
  auto first = ConvBnRelu<Scalar>::make(in_channels, out_channels, rng);
  auto second = ConvBnRelu<Scalar>::make(out_channels, out_channels, rng);
  return {std::move(first), std::move(second)};
}

template <typename Scalar>
Index EcaLayer<Scalar>::kernel_size(Index channels) {
  const auto t = static_cast<Index>(std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0));
  const Index k = t % 2 == 1 ? t : t + 1;
  return std::max<Index>(k, 3);
}

template <typename Scalar>
EcaLayer<Scalar> EcaLayer<Scalar>::make(Index channels, Rng& rng) {
  const Index k = kernel_size(channels);
  return {he_uniform<Scalar>({k}, k, rng)};
}

template <typename Scalar>
CcaLayer<Scalar> CcaLayer<Scalar>::make(Index skip_channels, Index decoder_channels, Rng& rng) {
  CcaLayer layer;
  layer.skip_weight = he_uniform<Scalar>({skip_channels, skip_channels}, skip_channels, rng);
  layer.skip_bias = Tensor<Scalar>({skip_channels}, Scalar(0), true);
  layer.decoder_weight = he_uniform<Scalar>({skip_channels, decoder_channels}, decoder_channels, rng);
  layer.decoder_bias = Tensor<Scalar>({skip_channels}, Scalar(0), true);
  return layer;
}

template <typename Scalar>
UpBlock<Scalar> UpBlock<Scalar>::make(Index decoder_channels, Index skip_channels, Rng& rng) {
  auto cca = CcaLayer<Scalar>::make(skip_channels, decoder_channels, rng);
  auto conv = ConvBlock<Scalar>::make(skip_channels + decoder_channels, skip_channels, rng);
  return {std::move(cca), std::move(conv)};
}

template <typename Scalar>
Tensor<Scalar> conv_bn_relu_forward(const Tensor<Scalar>& x, ConvBnRelu<Scalar>& unit, Mode mode) {
  return relu(batchnorm_forward(conv2d(x, unit.conv), unit.norm, mode));
}

template <typename Scalar>
Tensor<Scalar> conv_block_forward(const Tensor<Scalar>& x, ConvBlock<Scalar>& block, Mode mode) {
  return conv_bn_relu_forward(conv_bn_relu_forward(x, block.first, mode), block.second, mode);
}

template <typename Scalar>
Tensor<Scalar> down_block_forward(const Tensor<Scalar>& x, DownBlock<Scalar>& block, Mode mode) {
  return conv_block_forward(maxpool2d(x), block.conv, mode);
}

template <typename Scalar>
Tensor<Scalar> eca_forward(const Tensor<Scalar>& x, const EcaLayer<Scalar>& layer) {
  const Index N = x.dim(0), C = x.dim(1);
  const Tensor<Scalar> pooled = reshape(global_avg_pool(x), {N, C});
  const Tensor<Scalar> gate = sigmoid(conv1d_channels(pooled, layer.kernel));
  return mul_channelwise(x, reshape(gate, {N, C, 1, 1}));
}

template <typename Scalar>
Tensor<Scalar> cca_forward(const Tensor<Scalar>& skip, const Tensor<Scalar>& decoder, const CcaLayer<Scalar>& layer) {
  if (skip.rank() != 4 || decoder.rank() != 4 || skip.dim(0) != decoder.dim(0)) {
    throw ShapeError("cca_forward: incompatible skip " + to_string(skip.shape()) + " and decoder " +
                     to_string(decoder.shape()));
  }
  if (skip.dim(1) != layer.skip_weight.dim(1) || decoder.dim(1) != layer.decoder_weight.dim(1)) {
    throw ShapeError("cca_forward: channel counts do not match the layer");
  }
  const Index N = skip.dim(0), C = skip.dim(1);
  const Tensor<Scalar> skip_desc = reshape(global_avg_pool(skip), {N, C});
  const Tensor<Scalar> dec_desc = reshape(global_avg_pool(decoder), {N, decoder.dim(1)});
  const Tensor<Scalar> logits = linear(skip_desc, layer.skip_weight, layer.skip_bias) +
                                linear(dec_desc, layer.decoder_weight, layer.decoder_bias);
  return mul_channelwise(skip, reshape(sigmoid(logits), {N, C, 1, 1}));
}

template <typename Scalar>
Tensor<Scalar> up_block_forward(const Tensor<Scalar>& decoder_in, const Tensor<Scalar>& skip, UpBlock<Scalar>& block,
                                Mode mode) {
  const Tensor<Scalar> up = bilinear_upsample2x(decoder_in);
  if (up.dim(2) != skip.dim(2) || up.dim(3) != skip.dim(3)) {
    throw ShapeError("up_block_forward: upsampled decoder " + to_string(up.shape()) + " does not match skip " +
                     to_string(skip.shape()));
  }
  const Tensor<Scalar> gated = cca_forward(skip, up, block.cca);
  return conv_block_forward(concat_channels(gated, up), block.conv, mode);
}

template <typename Scalar>
void collect(const std::string& prefix, ConvParams<Scalar>& conv, ParamList<Scalar>& out) {
  out.push_back({prefix + ".weight", conv.weight, true});
  if (conv.bias) out.push_back({prefix + ".bias", *conv.bias, true});
}

template <typename Scalar>
void collect(const std::string& prefix, BatchNorm2d<Scalar>& bn, ParamList<Scalar>& out) {
  out.push_back({prefix + ".gamma", bn.gamma, true});
  out.push_back({prefix + ".beta", bn.beta, true});
  out.push_back({prefix + ".running_mean", bn.stats.running_mean, false});
  out.push_back({prefix + ".running_var", bn.stats.running_var, false});
}

template <typename Scalar>
void collect(const std::string& prefix, ConvBnRelu<Scalar>& unit, ParamList<Scalar>& out) {
  collect(prefix + ".conv", unit.conv, out);
  collect(prefix + ".norm", unit.norm, out);
}

template <typename Scalar>
void collect(const std::string& prefix, ConvBlock<Scalar>& block, ParamList<Scalar>& out) {
  collect(prefix + ".0", block.first, out);
  collect(prefix + ".1", block.second, out);
}

template <typename Scalar>
void collect(const std::string& prefix, EcaLayer<Scalar>& layer, ParamList<Scalar>& out) {
  out.push_back({prefix + ".kernel", layer.kernel, true});
}

template <typename Scalar>
void collect(const std::string& prefix, CcaLayer<Scalar>& layer, ParamList<Scalar>& out) {
  out.push_back({prefix + ".skip_weight", layer.skip_weight, true});
  out.push_back({prefix + ".skip_bias", layer.skip_bias, true});
  out.push_back({prefix + ".decoder_weight", layer.decoder_weight, true});
  out.push_back({prefix + ".decoder_bias", layer.decoder_bias, true});
}

template <typename Scalar>
void collect(const std::string& prefix, DownBlock<Scalar>& block, ParamList<Scalar>& out) {
  collect(prefix + ".conv", block.conv, out);
}

template <typename Scalar>
void collect(const std::string& prefix, UpBlock<Scalar>& block, ParamList<Scalar>& out) {
  collect(prefix + ".cca", block.cca, out);
  collect(prefix + ".conv", block.conv, out);
}

template <typename Scalar>
Index count_trainable(const ParamList<Scalar>& params) {
  Index total = 0;
  for (const auto& p : params) {
    if (p.trainable) total += p.tensor.size();
  }
  return total;
}

#define FUSIONUNET_INSTANTIATE_BLOCKS(Scalar)                                                                     \
  template Tensor<Scalar> he_uniform<Scalar>(Shape, Index, Rng&);                                                \
  template ConvParams<Scalar> make_conv<Scalar>(Index, Index, Index, Index, Index, Rng&);                        \
  template struct BatchNorm2d<Scalar>;                                                                            \
  template struct ConvBnRelu<Scalar>;                                                                             \
  template struct ConvBlock<Scalar>;                                                                              \
  template struct EcaLayer<Scalar>;                                                                               \
  template struct CcaLayer<Scalar>;                                                                               \
  template struct UpBlock<Scalar>;                                                                                \
  template Tensor<Scalar> conv_bn_relu_forward(const Tensor<Scalar>&, ConvBnRelu<Scalar>&, Mode);                \
  template Tensor<Scalar> conv_block_forward(const Tensor<Scalar>&, ConvBlock<Scalar>&, Mode);                   \
  template Tensor<Scalar> down_block_forward(const Tensor<Scalar>&, DownBlock<Scalar>&, Mode);                   \
  template Tensor<Scalar> eca_forward(const Tensor<Scalar>&, const EcaLayer<Scalar>&);                           \
  template Tensor<Scalar> cca_forward(const Tensor<Scalar>&, const Tensor<Scalar>&, const CcaLayer<Scalar>&);    \
  template Tensor<Scalar> up_block_forward(const Tensor<Scalar>&, const Tensor<Scalar>&, UpBlock<Scalar>&, Mode); \
  template void collect(const std::string&, ConvParams<Scalar>&, ParamList<Scalar>&);                            \
  template void collect(const std::string&, BatchNorm2d<Scalar>&, ParamList<Scalar>&);                           \
  template void collect(const std::string&, ConvBnRelu<Scalar>&, ParamList<Scalar>&);                            \
  template void collect(const std::string&, ConvBlock<Scalar>&, ParamList<Scalar>&);                             \
  template void collect(const std::string&, EcaLayer<Scalar>&, ParamList<Scalar>&);                              \
  template void collect(const std::string&, CcaLayer<Scalar>&, ParamList<Scalar>&);                              \
  template void collect(const std::string&, DownBlock<Scalar>&, ParamList<Scalar>&);                             \
  template void collect(const std::string&, UpBlock<Scalar>&, ParamList<Scalar>&);                               \
  template Index count_trainable(const ParamList<Scalar>&);

FUSIONUNET_INSTANTIATE_BLOCKS(float)
FUSIONUNET_INSTANTIATE_BLOCKS(double)

}  // namespace fusionunet
