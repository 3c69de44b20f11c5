#include "fusionunet/ops.hpp"

#include <array>
#include <cmath>

namespace fusionunet {

namespace {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename Scalar>
void require_single(const Tensor<Scalar>& t, const char* what) {
  if (t.size() != 1) throw ShapeError(std::string(what) + " must hold a single value");
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Vector<Scalar> out = x.value().array().max(Scalar(0));
  if (detail::kink_sink()) {
    std::uint64_t word = 0;
    for (Index i = 0; i < x.size(); ++i) {
      word = (word << 1) | (x.value()[i] > Scalar(0) ? 1u : 0u);
      if (i % 64 == 63) detail::mix_kink(word);
    }
    detail::mix_kink(word);
  }
  detail::add_cost(0, x.size());
  auto rule = [x](Node<Scalar>& self) {
    x.node()->accumulate((x.value().array() > Scalar(0)).select(self.grad.array(), Scalar(0)));
  };
  return detail::make_result<Scalar>("relu", x.shape(), std::move(out), {&x}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Vector<Scalar> out = (Scalar(1) + (-x.value().array()).exp()).inverse();
  detail::add_cost(0, x.size());
  auto rule = [x](Node<Scalar>& self) {
    const auto y = (Scalar(1) + (-x.value().array()).exp()).inverse();
    x.node()->accumulate(self.grad.array() * y * (Scalar(1) - y));
  };
  return detail::make_result<Scalar>("sigmoid", x.shape(), std::move(out), {&x}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& x) {
  if (x.rank() != 4) throw ShapeError("softmax_channels expects NCHW input, got " + to_string(x.shape()));
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  using Map = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  Vector<Scalar> out(x.size());
  for (Index n = 0; n < N; ++n) {
    ConstMap in(x.data() + n * C * HW, C, HW);
    Map y(out.data() + n * C * HW, C, HW);
    y = (in.rowwise() - in.colwise().maxCoeff()).array().exp().matrix();
    y.array().rowwise() /= y.colwise().sum().array();
  }
  detail::add_cost(0, 3 * x.size());
  Vector<Scalar> saved = out;
  auto rule = [x, saved = std::move(saved), N, C, HW](Node<Scalar>& self) {
    Vector<Scalar> dx(x.size());
    for (Index n = 0; n < N; ++n) {
      ConstMap y(saved.data() + n * C * HW, C, HW);
      ConstMap g(self.grad.data() + n * C * HW, C, HW);
      const Eigen::Array<Scalar, 1, Eigen::Dynamic> dot = (y.array() * g.array()).colwise().sum();
      Map(dx.data() + n * C * HW, C, HW).array() = y.array() * (g.array().rowwise() - dot);
    }
    x.node()->accumulate(dx);
  };
  return detail::make_result<Scalar>("softmax_channels", x.shape(), std::move(out), {&x},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: incompatible " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Vector<Scalar> out(a.size() + b.size());
  for (Index n = 0; n < N; ++n) {
    out.segment(n * (Ca + Cb) * HW, Ca * HW) = a.value().segment(n * Ca * HW, Ca * HW);
    out.segment((n * (Ca + Cb) + Ca) * HW, Cb * HW) = b.value().segment(n * Cb * HW, Cb * HW);
  }
  auto rule = [a, b, N, Ca, Cb, HW](Node<Scalar>& self) {
    if (a.requires_grad()) {
      Vector<Scalar>& da = a.node()->grad_buffer();
      for (Index n = 0; n < N; ++n) da.segment(n * Ca * HW, Ca * HW) += self.grad.segment(n * (Ca + Cb) * HW, Ca * HW);
    }
    if (b.requires_grad()) {
      Vector<Scalar>& db = b.node()->grad_buffer();
      for (Index n = 0; n < N; ++n) {
        db.segment(n * Cb * HW, Cb * HW) += self.grad.segment((n * (Ca + Cb) + Ca) * HW, Cb * HW);
      }
    }
  };
  return detail::make_result<Scalar>("concat_channels", {N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out),
                                     {&a, &b}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> add_weighted(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const Tensor<Scalar>& alpha,
                            const Tensor<Scalar>& beta) {
  require_same_shape(a, b, "add_weighted");
  require_single(alpha, "add_weighted alpha");
  require_single(beta, "add_weighted beta");
  const Scalar wa = alpha.item();
  const Scalar wb = beta.item();
  Vector<Scalar> out = wa * a.value() + wb * b.value();
  detail::add_cost(0, 3 * a.size());
  auto rule = [a, b, alpha, beta](Node<Scalar>& self) {
    const auto& g = self.grad;
    a.node()->accumulate(alpha.item() * g);
    b.node()->accumulate(beta.item() * g);
    if (alpha.requires_grad()) alpha.node()->accumulate(Vector<Scalar>::Constant(1, a.value().dot(g)));
    if (beta.requires_grad()) beta.node()->accumulate(Vector<Scalar>::Constant(1, b.value().dot(g)));
  };
  return detail::make_result<Scalar>("add_weighted", a.shape(), std::move(out), {&a, &b, &alpha, &beta},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> mul_channelwise(const Tensor<Scalar>& x, const Tensor<Scalar>& s) {
  if (x.rank() != 4 || s.shape() != Shape{x.dim(0), x.dim(1), 1, 1}) {
    throw ShapeError("mul_channelwise: scale " + to_string(s.shape()) + " does not match " + to_string(x.shape()));
  }
  const Index NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  using Map = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  Vector<Scalar> out(x.size());
  Map(out.data(), NC, HW) = ConstMap(x.data(), NC, HW).array().colwise() * s.value().array();
  detail::add_cost(0, x.size());
  auto rule = [x, s, NC, HW](Node<Scalar>& self) {
    ConstMap g(self.grad.data(), NC, HW);
    if (x.requires_grad()) {
      Vector<Scalar> dx(x.size());
      Map(dx.data(), NC, HW) = g.array().colwise() * s.value().array();
      x.node()->accumulate(dx);
    }
    if (s.requires_grad()) {
      s.node()->accumulate((g.array() * ConstMap(x.data(), NC, HW).array()).rowwise().sum().matrix());
    }
  };
  return detail::make_result<Scalar>("mul_channelwise", x.shape(), std::move(out), {&x, &s}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  auto rule = [x](Node<Scalar>& self) { x.node()->accumulate(self.grad); };
  return detail::make_result<Scalar>("reshape", std::move(shape), x.value(), {&x}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "add");
  detail::add_cost(0, a.size());
  auto rule = [a, b](Node<Scalar>& self) {
    a.node()->accumulate(self.grad);
    b.node()->accumulate(self.grad);
  };
  return detail::make_result<Scalar>("add", a.shape(), a.value() + b.value(), {&a, &b}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "sub");
  detail::add_cost(0, a.size());
  auto rule = [a, b](Node<Scalar>& self) {
    a.node()->accumulate(self.grad);
    b.node()->accumulate(-self.grad);
  };
  return detail::make_result<Scalar>("sub", a.shape(), a.value() - b.value(), {&a, &b}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "mul");
  detail::add_cost(0, a.size());
  auto rule = [a, b](Node<Scalar>& self) {
    a.node()->accumulate(self.grad.cwiseProduct(b.value()));
    b.node()->accumulate(self.grad.cwiseProduct(a.value()));
  };
  return detail::make_result<Scalar>("mul", a.shape(), a.value().cwiseProduct(b.value()), {&a, &b},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  detail::add_cost(0, x.size());
  auto rule = [x, factor](Node<Scalar>& self) { x.node()->accumulate(factor * self.grad); };
  return detail::make_result<Scalar>("scale", x.shape(), factor * x.value(), {&x}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  detail::add_cost(0, x.size());
  auto rule = [x](Node<Scalar>& self) {
    x.node()->accumulate(Vector<Scalar>::Constant(x.size(), self.grad[0]));
  };
  return detail::make_result<Scalar>("sum", {1}, Vector<Scalar>::Constant(1, x.value().sum()), {&x},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  detail::add_cost(0, x.size());
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.size());
  auto rule = [x, inv](Node<Scalar>& self) {
    x.node()->accumulate(Vector<Scalar>::Constant(x.size(), self.grad[0] * inv));
  };
  return detail::make_result<Scalar>("mean", {1}, Vector<Scalar>::Constant(1, x.value().mean()), {&x},
                                     std::move(rule));
}

std::span<const std::string_view> differentiable_ops() {
  static constexpr std::array<std::string_view, 26> kOps = {
      "conv2d",           "conv1d_channels", "linear",          "maxpool2d",         "bilinear_upsample2x",
      "global_avg_pool",  "relu",            "sigmoid",         "softmax_channels",  "batchnorm2d_train",
      "batchnorm2d_eval", "concat_channels", "add_weighted",    "mul_channelwise",   "reshape",
      "add",              "sub",             "mul",             "scale",             "sum",
      "mean",             "reorganize",      "inverse_reorganize", "cross_entropy",  "dice_loss",
      "focal_loss"};
  return kOps;
}

#define FUSIONUNET_INSTANTIATE_ELEMENTWISE(Scalar)                                                            \
  template Tensor<Scalar> relu(const Tensor<Scalar>&);                                                       \
  template Tensor<Scalar> sigmoid(const Tensor<Scalar>&);                                                    \
  template Tensor<Scalar> softmax_channels(const Tensor<Scalar>&);                                           \
  template Tensor<Scalar> concat_channels(const Tensor<Scalar>&, const Tensor<Scalar>&);                    \
  template Tensor<Scalar> add_weighted(const Tensor<Scalar>&, const Tensor<Scalar>&, const Tensor<Scalar>&, \
                                       const Tensor<Scalar>&);                                               \
  template Tensor<Scalar> mul_channelwise(const Tensor<Scalar>&, const Tensor<Scalar>&);                    \
  template Tensor<Scalar> reshape(const Tensor<Scalar>&, Shape);                                             \
  template Tensor<Scalar> add(const Tensor<Scalar>&, const Tensor<Scalar>&);                                \
  template Tensor<Scalar> sub(const Tensor<Scalar>&, const Tensor<Scalar>&);                                \
  template Tensor<Scalar> mul(const Tensor<Scalar>&, const Tensor<Scalar>&);                                \
  template Tensor<Scalar> scale(const Tensor<Scalar>&, Scalar);                                              \
  template Tensor<Scalar> sum(const Tensor<Scalar>&);                                                        \
  template Tensor<Scalar> mean(const Tensor<Scalar>&);

FUSIONUNET_INSTANTIATE_ELEMENTWISE(float)
FUSIONUNET_INSTANTIATE_ELEMENTWISE(double)

}  // namespace fusionunet
