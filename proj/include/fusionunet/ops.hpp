#pragma once

#include "fusionunet/tensor.hpp"

#include <optional>
#include <span>
#include <string_view>

namespace fusionunet {

template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weight;  // C_out x C_in/groups x k_h x k_w
  std::optional<Tensor<Scalar>> bias;  // C_out
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;

  Index out_channels() const { return weight.dim(0); }
  Index in_channels() const { return weight.dim(1) * groups; }
};

enum class Mode { train, eval };

template <typename Scalar>
struct BatchNormStats {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
};

// Convolution family (NCHW, row-major).

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvParams<Scalar>& p);

/// Same-length cross-correlation along the channel axis of an N x C tensor,
/// zero padded by (k-1)/2 on each side. `kernel` has odd length k.
template <typename Scalar>
Tensor<Scalar> conv1d_channels(const Tensor<Scalar>& v, const Tensor<Scalar>& kernel);

/// v: N x In, weight: Out x In, bias: Out.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& v, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias);

// Resampling.

/// 2x2 window, stride 2. Ties resolve to the first element in row-major order.
template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x);

/// Scale factor 2, align-corners=false, edge samples clamped.
template <typename Scalar>
Tensor<Scalar> bilinear_upsample2x(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);

// Activations.

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& x);

/// Train mode normalizes with batch statistics and updates `stats` in place;
/// eval mode normalizes with the running estimates.
template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                           const Tensor<Scalar>& beta, BatchNormStats<Scalar>& stats, Mode mode);

// Structural and arithmetic.

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// alpha * a + beta * b with alpha, beta single-element tensors.
template <typename Scalar>
Tensor<Scalar> add_weighted(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                            const Tensor<Scalar>& alpha, const Tensor<Scalar>& beta);

/// x: N x C x H x W scaled by s: N x C x 1 x 1.
template <typename Scalar>
Tensor<Scalar> mul_channelwise(const Tensor<Scalar>& x, const Tensor<Scalar>& s);

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar factor, const Tensor<Scalar>& x) { return scale(x, factor); }

/// Names of every op that records a backward rule. The gradient audit
/// asserts it has exercised each of these.
std::span<const std::string_view> differentiable_ops();

}  // namespace fusionunet
