#include "fusionunet/ops.hpp"

#include <algorithm>
#include <utility>

namespace fusionunet {

namespace {

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index stride, padding, groups;
  Index out_h, out_w;

  Index group_in() const { return in_channels / groups; }
  Index group_out() const { return out_channels / groups; }
  Index patch() const { return group_in() * kernel_h * kernel_w; }
  Index pixels() const { return out_h * out_w; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

template <typename Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& x, const ConvParams<Scalar>& p) {
  if (x.rank() != 4) throw ShapeError("conv2d expects NCHW input, got " + to_string(x.shape()));
  if (p.weight.rank() != 4) throw ShapeError("conv2d weight must be rank 4");
  if (p.groups < 1 || p.stride < 1 || p.padding < 0) throw ShapeError("invalid conv2d hyperparameters");
  ConvGeometry g{x.dim(0),        x.dim(1),        x.dim(2),        x.dim(3),        p.weight.dim(0),
                 p.weight.dim(2), p.weight.dim(3), p.stride,        p.padding,       p.groups,
                 0,               0};
  if (g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0) {
    throw ShapeError("conv2d channels (" + std::to_string(g.in_channels) + " -> " +
                     std::to_string(g.out_channels) + ") not divisible by groups " +
                     std::to_string(g.groups));
  }
  if (p.weight.dim(1) * g.groups != g.in_channels) {
    throw ShapeError("conv2d input has " + std::to_string(g.in_channels) +
                     " channels, weight expects " + std::to_string(p.weight.dim(1) * g.groups));
  }
  if (p.bias && p.bias->shape() != Shape{g.out_channels}) throw ShapeError("conv2d bias shape mismatch");
  const Index span_h = g.height + 2 * g.padding - g.kernel_h;
  const Index span_w = g.width + 2 * g.padding - g.kernel_w;
  if (span_h < 0 || span_w < 0) throw ShapeError("conv2d kernel larger than padded input");
  g.out_h = span_h / g.stride + 1;
  g.out_w = span_w / g.stride + 1;
  return g;
}

// Output columns [lo, hi) whose input column ow * stride - padding + kj is in range.
inline std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index kj) {
  const Index shift = kj - g.padding;
  Index lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  Index hi = g.width - 1 - shift < 0 ? 0 : (g.width - 1 - shift) / g.stride + 1;
  hi = std::min(hi, g.out_w);
  return {std::min(lo, hi), hi};
}

// Unfolds the channels of one group of one sample into a patch x pixel matrix.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  cols.resize(g.patch(), g.pixels());
  for (Index c = 0; c < g.group_in(); ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        Scalar* row = cols.row((c * g.kernel_h + ki) * g.kernel_w + kj).data();
        const auto [lo, hi] = valid_columns(g, kj);
        const Index shift = kj - g.padding;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          Scalar* dst = row + oh * g.out_w;
          const Index ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + ih * g.width + shift;
          std::fill(dst, dst + lo, Scalar(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (Index ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride];
          }
          std::fill(dst + hi, dst + g.out_w, Scalar(0));
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.group_in(); ++c) {
    Scalar* plane = image + c * g.height * g.width;
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Scalar* row = cols.row((c * g.kernel_h + ki) * g.kernel_w + kj).data();
        const auto [lo, hi] = valid_columns(g, kj);
        const Index shift = kj - g.padding;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          const Scalar* src = row + oh * g.out_w;
          Scalar* dst = plane + ih * g.width + shift;
          for (Index ow = lo; ow < hi; ++ow) dst[ow * g.stride] += src[ow];
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvParams<Scalar>& p) {
  const ConvGeometry g = conv_geometry(x, p);
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  using Map = Eigen::Map<RowMatrix<Scalar>>;

  const Index in_plane = g.height * g.width;
  const Index P = g.pixels();
  const Index K = g.patch();
  Vector<Scalar> out(g.batch * g.out_channels * P);
  RowMatrix<Scalar> cols;
  for (Index n = 0; n < g.batch; ++n) {
    for (Index grp = 0; grp < g.groups; ++grp) {
      const Scalar* image = x.data() + (n * g.in_channels + grp * g.group_in()) * in_plane;
      ConstMap w(p.weight.data() + grp * g.group_out() * K, g.group_out(), K);
      Map o(out.data() + (n * g.out_channels + grp * g.group_out()) * P, g.group_out(), P);
      if (g.pointwise()) {
        o.noalias() = w * ConstMap(image, K, P);
      } else {
        im2col(image, g, cols);
        o.noalias() = w * cols;
      }
      if (p.bias) {
        o.colwise() += p.bias->value().segment(grp * g.group_out(), g.group_out());
      }
    }
  }
  const std::int64_t macs = g.batch * g.out_channels * P * K;
  detail::add_cost(macs, 2 * macs + (p.bias ? g.batch * g.out_channels * P : 0));

  Tensor<Scalar> weight = p.weight;
  std::optional<Tensor<Scalar>> bias = p.bias;
  auto rule = [x, weight, bias, g](Node<Scalar>& self) {
    const Index P = g.pixels();
    const Index K = g.patch();
    const Index in_plane = g.height * g.width;
    const auto& wn = weight.node();
    const auto& xn = x.node();
    if (bias && bias->requires_grad()) {
      Vector<Scalar> db = Vector<Scalar>::Zero(g.out_channels);
      for (Index n = 0; n < g.batch; ++n) {
        db += ConstMap(self.grad.data() + n * g.out_channels * P, g.out_channels, P).rowwise().sum();
      }
      bias->node()->accumulate(db);
    }
    if (!wn->requires_grad && !xn->requires_grad) return;
    RowMatrix<Scalar> dw;
    if (wn->requires_grad) dw = RowMatrix<Scalar>::Zero(g.out_channels, K);
    Scalar* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
    RowMatrix<Scalar> cols;
    RowMatrix<Scalar> dcols;
    for (Index n = 0; n < g.batch; ++n) {
      for (Index grp = 0; grp < g.groups; ++grp) {
        const Index in_off = (n * g.in_channels + grp * g.group_in()) * in_plane;
        ConstMap dout(self.grad.data() + (n * g.out_channels + grp * g.group_out()) * P,
                      g.group_out(), P);
        if (wn->requires_grad) {
          auto dw_g = dw.middleRows(grp * g.group_out(), g.group_out());
          if (g.pointwise()) {
            dw_g.noalias() += dout * ConstMap(x.data() + in_off, K, P).transpose();
          } else {
            im2col(x.data() + in_off, g, cols);
            dw_g.noalias() += dout * cols.transpose();
          }
        }
        if (dx) {
          ConstMap w(weight.data() + grp * g.group_out() * K, g.group_out(), K);
          if (g.pointwise()) {
            Map(dx + in_off, K, P).noalias() += w.transpose() * dout;
          } else {
            dcols.noalias() = w.transpose() * dout;
            col2im_add(dcols, g, dx + in_off);
          }
        }
      }
    }
    if (wn->requires_grad) wn->accumulate(Eigen::Map<const Vector<Scalar>>(dw.data(), dw.size()));
  };

  std::initializer_list<const Tensor<Scalar>*> no_bias{&x, &p.weight};
  if (p.bias) {
    return detail::make_result<Scalar>("conv2d", {g.batch, g.out_channels, g.out_h, g.out_w},
                                       std::move(out), {&x, &p.weight, &*p.bias}, std::move(rule));
  }
  return detail::make_result<Scalar>("conv2d", {g.batch, g.out_channels, g.out_h, g.out_w},
                                     std::move(out), no_bias, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> conv1d_channels(const Tensor<Scalar>& v, const Tensor<Scalar>& kernel) {
  if (v.rank() != 2) throw ShapeError("conv1d_channels expects N x C input, got " + to_string(v.shape()));
  if (kernel.rank() != 1 || kernel.size() % 2 == 0) {
    throw ShapeError("conv1d_channels kernel length must be odd, got " + std::to_string(kernel.size()));
  }
  const Index N = v.dim(0);
  const Index C = v.dim(1);
  const Index k = kernel.size();
  const Index pad = (k - 1) / 2;
  Vector<Scalar> out = Vector<Scalar>::Zero(N * C);
  const auto& kv = kernel.value();
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      Scalar acc(0);
      for (Index j = 0; j < k; ++j) {
        const Index src = c + j - pad;
        if (src >= 0 && src < C) acc += kv[j] * v.value()[n * C + src];
      }
      out[n * C + c] = acc;
    }
  }
  detail::add_cost(N * C * k, 2 * N * C * k);
  auto rule = [v, kernel, N, C, k, pad](Node<Scalar>& self) {
    const auto& g = self.grad;
    const auto& vn = v.node();
    const auto& kn = kernel.node();
    Vector<Scalar> dk = Vector<Scalar>::Zero(k);
    Vector<Scalar> dv = Vector<Scalar>::Zero(N * C);
    for (Index n = 0; n < N; ++n) {
      for (Index c = 0; c < C; ++c) {
        for (Index j = 0; j < k; ++j) {
          const Index src = c + j - pad;
          if (src < 0 || src >= C) continue;
          dk[j] += v.value()[n * C + src] * g[n * C + c];
          dv[n * C + src] += kernel.value()[j] * g[n * C + c];
        }
      }
    }
    vn->accumulate(dv);
    kn->accumulate(dk);
  };
  return detail::make_result<Scalar>("conv1d_channels", {N, C}, std::move(out), {&v, &kernel},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& v, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (v.rank() != 2 || weight.rank() != 2 || weight.dim(1) != v.dim(1) ||
      bias.shape() != Shape{weight.dim(0)}) {
    throw ShapeError("linear: input " + to_string(v.shape()) + ", weight " + to_string(weight.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  const Index N = v.dim(0);
  const Index in = v.dim(1);
  const Index out_features = weight.dim(0);
  RowMatrix<Scalar> out = ConstMap(v.data(), N, in) * ConstMap(weight.data(), out_features, in).transpose();
  out.rowwise() += bias.value().transpose();
  detail::add_cost(N * in * out_features, 2 * N * in * out_features + N * out_features);
  auto rule = [v, weight, bias, N, in, out_features](Node<Scalar>& self) {
    ConstMap g(self.grad.data(), N, out_features);
    if (v.requires_grad()) {
      RowMatrix<Scalar> dv = g * ConstMap(weight.data(), out_features, in);
      v.node()->accumulate(Eigen::Map<const Vector<Scalar>>(dv.data(), dv.size()));
    }
    if (weight.requires_grad()) {
      RowMatrix<Scalar> dw = g.transpose() * ConstMap(v.data(), N, in);
      weight.node()->accumulate(Eigen::Map<const Vector<Scalar>>(dw.data(), dw.size()));
    }
    if (bias.requires_grad()) bias.node()->accumulate(g.colwise().sum().transpose());
  };
  return detail::make_result<Scalar>(
      "linear", {N, out_features},
      Vector<Scalar>(Eigen::Map<const Vector<Scalar>>(out.data(), out.size())), {&v, &weight, &bias},
      std::move(rule));
}

#define FUSIONUNET_INSTANTIATE_CONV(Scalar)                                                      \
  template Tensor<Scalar> conv2d(const Tensor<Scalar>&, const ConvParams<Scalar>&);             \
  template Tensor<Scalar> conv1d_channels(const Tensor<Scalar>&, const Tensor<Scalar>&);        \
  template Tensor<Scalar> linear(const Tensor<Scalar>&, const Tensor<Scalar>&, const Tensor<Scalar>&);

FUSIONUNET_INSTANTIATE_CONV(float)
FUSIONUNET_INSTANTIATE_CONV(double)

}  // namespace fusionunet
