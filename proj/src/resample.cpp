#include "fusionunet/ops.hpp"

#include <algorithm>
#include <cmath>

namespace fusionunet {

namespace {

void require_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects NCHW input, got " + to_string(s));
}

// Source taps for one output coordinate along an axis being doubled.
struct Tap {
  Index lo, hi;
  double frac;  // weight of `hi`
};

std::vector<Tap> upsample_taps(Index in) {
  std::vector<Tap> taps(static_cast<std::size_t>(2 * in));
  for (Index o = 0; o < 2 * in; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) / 2.0 - 0.5);
    const Index lo = std::min(static_cast<Index>(src), in - 1);
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x) {
  require_nchw(x.shape(), "maxpool2d");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("maxpool2d needs even spatial dims, got " + to_string(x.shape()));
  const Index Ho = H / 2, Wo = W / 2;
  Vector<Scalar> out(N * C * Ho * Wo);
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Scalar* in = x.data();
  const bool probe = detail::kink_sink() != nullptr;
  Index o = 0;
  for (Index plane = 0; plane < N * C; ++plane) {
    const Index base = plane * H * W;
    for (Index i = 0; i < Ho; ++i) {
      for (Index j = 0; j < Wo; ++j, ++o) {
        const Index offsets[4] = {2 * i * W + 2 * j, 2 * i * W + 2 * j + 1, (2 * i + 1) * W + 2 * j,
                                  (2 * i + 1) * W + 2 * j + 1};
        int best = 0;
        for (int t = 1; t < 4; ++t) {
          if (in[base + offsets[t]] > in[base + offsets[best]]) best = t;
        }
        argmax[static_cast<std::size_t>(o)] = base + offsets[best];
        out[o] = in[base + offsets[best]];
        if (probe) detail::mix_kink(static_cast<std::uint64_t>(o * 4 + best));
      }
    }
  }
  detail::add_cost(0, x.size());
  auto rule = [x, argmax = std::move(argmax)](Node<Scalar>& self) {
    Vector<Scalar>& dx = x.node()->grad_buffer();
    for (std::size_t k = 0; k < argmax.size(); ++k) dx[argmax[k]] += self.grad[static_cast<Index>(k)];
  };
  return detail::make_result<Scalar>("maxpool2d", {N, C, Ho, Wo}, std::move(out), {&x}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> bilinear_upsample2x(const Tensor<Scalar>& x) {
  require_nchw(x.shape(), "bilinear_upsample2x");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Ho = 2 * H, Wo = 2 * W;
  const auto rows = upsample_taps(H);
  const auto cols = upsample_taps(W);
  Vector<Scalar> out(N * C * Ho * Wo);
  for (Index plane = 0; plane < N * C; ++plane) {
    const Scalar* in = x.data() + plane * H * W;
    Scalar* dst = out.data() + plane * Ho * Wo;
    for (Index oi = 0; oi < Ho; ++oi) {
      const Tap& r = rows[static_cast<std::size_t>(oi)];
      const Scalar wr = static_cast<Scalar>(r.frac);
      const Scalar* top = in + r.lo * W;
      const Scalar* bottom = in + r.hi * W;
      for (Index oj = 0; oj < Wo; ++oj) {
        const Tap& c = cols[static_cast<std::size_t>(oj)];
        const Scalar wc = static_cast<Scalar>(c.frac);
        const Scalar upper = (Scalar(1) - wc) * top[c.lo] + wc * top[c.hi];
        const Scalar lower = (Scalar(1) - wc) * bottom[c.lo] + wc * bottom[c.hi];
        dst[oi * Wo + oj] = (Scalar(1) - wr) * upper + wr * lower;
      }
    }
  }
  detail::add_cost(0, 4 * out.size());
  auto rule = [x, rows, cols, N, C, H, W, Ho, Wo](Node<Scalar>& self) {
    Vector<Scalar>& dx = x.node()->grad_buffer();
    for (Index plane = 0; plane < N * C; ++plane) {
      Scalar* din = dx.data() + plane * H * W;
      const Scalar* g = self.grad.data() + plane * Ho * Wo;
      for (Index oi = 0; oi < Ho; ++oi) {
        const Tap& r = rows[static_cast<std::size_t>(oi)];
        const Scalar wr = static_cast<Scalar>(r.frac);
        for (Index oj = 0; oj < Wo; ++oj) {
          const Tap& c = cols[static_cast<std::size_t>(oj)];
          const Scalar wc = static_cast<Scalar>(c.frac);
          const Scalar go = g[oi * Wo + oj];
          din[r.lo * W + c.lo] += (Scalar(1) - wr) * (Scalar(1) - wc) * go;
          din[r.lo * W + c.hi] += (Scalar(1) - wr) * wc * go;
          din[r.hi * W + c.lo] += wr * (Scalar(1) - wc) * go;
          din[r.hi * W + c.hi] += wr * wc * go;
        }
      }
    }
  };
  return detail::make_result<Scalar>("bilinear_upsample2x", {N, C, Ho, Wo}, std::move(out), {&x},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  require_nchw(x.shape(), "global_avg_pool");
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  Vector<Scalar> out = ConstMap(x.data(), N * C, HW).rowwise().mean();
  detail::add_cost(0, x.size());
  auto rule = [x, N, C, HW](Node<Scalar>& self) {
    Vector<Scalar>& dx = x.node()->grad_buffer();
    Eigen::Map<RowMatrix<Scalar>>(dx.data(), N * C, HW).colwise() += self.grad / static_cast<Scalar>(HW);
  };
  return detail::make_result<Scalar>("global_avg_pool", {N, C, 1, 1}, std::move(out), {&x},
                                     std::move(rule));
}

#define FUSIONUNET_INSTANTIATE_RESAMPLE(Scalar)                        \
  template Tensor<Scalar> maxpool2d(const Tensor<Scalar>&);           \
  template Tensor<Scalar> bilinear_upsample2x(const Tensor<Scalar>&); \
  template Tensor<Scalar> global_avg_pool(const Tensor<Scalar>&);

FUSIONUNET_INSTANTIATE_RESAMPLE(float)
FUSIONUNET_INSTANTIATE_RESAMPLE(double)

}  // namespace fusionunet
