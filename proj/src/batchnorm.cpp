#include "fusionunet/ops.hpp"

#include <cmath>

namespace fusionunet {

template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                           BatchNormStats<Scalar>& stats, Mode mode) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d expects NCHW input, got " + to_string(x.shape()));
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Shape channel_shape{C};
  if (gamma.shape() != channel_shape || beta.shape() != channel_shape ||
      stats.running_mean.shape() != channel_shape || stats.running_var.shape() != channel_shape) {
    throw ShapeError("batchnorm2d parameters must have length " + std::to_string(C));
  }
  using Map = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  const Index M = N * HW;

  Array mu, inv_std;
  if (mode == Mode::train) {
    mu = Array::Zero(C);
    for (Index n = 0; n < N; ++n) mu += ConstMap(x.data() + n * C * HW, C, HW).array().rowwise().sum();
    mu /= static_cast<Scalar>(M);
    Array var = Array::Zero(C);
    for (Index n = 0; n < N; ++n) {
      var += (ConstMap(x.data() + n * C * HW, C, HW).array().colwise() - mu).square().rowwise().sum();
    }
    var /= static_cast<Scalar>(M);
    inv_std = (var + stats.eps).rsqrt();
    const Scalar m = stats.momentum;
    const Scalar unbias = M > 1 ? static_cast<Scalar>(M) / static_cast<Scalar>(M - 1) : Scalar(1);
    stats.running_mean.mutable_value() = (Scalar(1) - m) * stats.running_mean.value().array() + m * mu;
    stats.running_var.mutable_value() = (Scalar(1) - m) * stats.running_var.value().array() + m * unbias * var;
  } else {
    mu = stats.running_mean.value().array();
    inv_std = (stats.running_var.value().array() + stats.eps).rsqrt();
  }

  Vector<Scalar> xhat(x.size());
  Vector<Scalar> out(x.size());
  for (Index n = 0; n < N; ++n) {
    ConstMap in(x.data() + n * C * HW, C, HW);
    Map xh(xhat.data() + n * C * HW, C, HW);
    xh.array() = (in.array().colwise() - mu).colwise() * inv_std;
    Map(out.data() + n * C * HW, C, HW).array() =
        (xh.array().colwise() * gamma.value().array()).colwise() + beta.value().array();
  }
  detail::add_cost(0, 2 * x.size());

  const bool train = mode == Mode::train;
  auto rule = [x, gamma, beta, xhat = std::move(xhat), inv_std, N, C, HW, M, train](Node<Scalar>& self) {
    Array dgamma = Array::Zero(C);
    Array dbeta = Array::Zero(C);
    for (Index n = 0; n < N; ++n) {
      ConstMap g(self.grad.data() + n * C * HW, C, HW);
      ConstMap xh(xhat.data() + n * C * HW, C, HW);
      dgamma += (g.array() * xh.array()).rowwise().sum();
      dbeta += g.array().rowwise().sum();
    }
    if (gamma.requires_grad()) gamma.node()->accumulate(dgamma.matrix());
    if (beta.requires_grad()) beta.node()->accumulate(dbeta.matrix());
    if (!x.requires_grad()) return;
    // dxhat = g * gamma; train mode also differentiates through the batch mean/variance:
    // dx = inv_std / M * (M * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
    const Array k = gamma.value().array() * inv_std;
    Vector<Scalar> dx(x.size());
    for (Index n = 0; n < N; ++n) {
      ConstMap g(self.grad.data() + n * C * HW, C, HW);
      Map d(dx.data() + n * C * HW, C, HW);
      if (train) {
        ConstMap xh(xhat.data() + n * C * HW, C, HW);
        const Scalar inv_m = Scalar(1) / static_cast<Scalar>(M);
        d.array() = ((g.array().colwise() - dbeta * inv_m) - xh.array().colwise() * (dgamma * inv_m)).colwise() * k;
      } else {
        d.array() = g.array().colwise() * k;
      }
    }
    x.node()->accumulate(dx);
  };
  return detail::make_result<Scalar>(train ? "batchnorm2d_train" : "batchnorm2d_eval", x.shape(), std::move(out),
                                     {&x, &gamma, &beta}, std::move(rule));
}

template Tensor<float> batchnorm2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                   BatchNormStats<float>&, Mode);
template Tensor<double> batchnorm2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                    BatchNormStats<double>&, Mode);

}  // namespace fusionunet
