#include "fusionunet/fusion.hpp"

namespace fusionunet {

namespace {

// Scatter/gather between (c, 2i+dy, 2j+dx) and (4c + 2dy + dx, i, j) for one
// sample. `to_depth` copies spatial -> channel, otherwise channel -> spatial.
template <typename Scalar>
void permute_blocks(const Scalar* src, Scalar* dst, Index C, Index H, Index W, bool to_depth) {
  const Index Hh = H / 2, Wh = W / 2;
  for (Index c = 0; c < C; ++c) {
    for (Index dy = 0; dy < 2; ++dy) {
      for (Index dx = 0; dx < 2; ++dx) {
        const Index depth_plane = (4 * c + 2 * dy + dx) * Hh * Wh;
        for (Index i = 0; i < Hh; ++i) {
          const Index spatial_row = (c * H + 2 * i + dy) * W + dx;
          const Index depth_row = depth_plane + i * Wh;
          for (Index j = 0; j < Wh; ++j) {
            if (to_depth) {
              dst[depth_row + j] = src[spatial_row + 2 * j];
            } else {
              dst[spatial_row + 2 * j] = src[depth_row + j];
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
Vector<Scalar> permute_batch(const Vector<Scalar>& src, Index N, Index C, Index H, Index W, bool to_depth) {
  Vector<Scalar> dst(src.size());
  const Index per_sample = C * H * W;
  for (Index n = 0; n < N; ++n) {
    permute_blocks(src.data() + n * per_sample, dst.data() + n * per_sample, C, H, W, to_depth);
  }
  return dst;
}

template <typename Scalar>
void require_pair(const Tensor<Scalar>& shallow, const Tensor<Scalar>& deep, const char* op) {
  const bool ok = shallow.rank() == 4 && deep.rank() == 4 && shallow.dim(0) == deep.dim(0) &&
                  deep.dim(1) == 2 * shallow.dim(1) && shallow.dim(2) == 2 * deep.dim(2) &&
                  shallow.dim(3) == 2 * deep.dim(3);
  if (!ok) {
    throw ShapeError(std::string(op) + ": expected shallow (C, H, W) and deep (2C, H/2, W/2), got " +
                     to_string(shallow.shape()) + " and " + to_string(deep.shape()));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> reorganize(const Tensor<Scalar>& x) {
  if (x.rank() != 4) throw ShapeError("reorganize expects NCHW input, got " + to_string(x.shape()));
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("reorganize needs even spatial dims, got " + to_string(x.shape()));
  auto rule = [x, N, C, H, W](Node<Scalar>& self) {
    x.node()->accumulate(permute_batch(self.grad, N, C, H, W, false));
  };
  return detail::make_result<Scalar>("reorganize", {N, 4 * C, H / 2, W / 2}, permute_batch(x.value(), N, C, H, W, true),
                                     {&x}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> inverse_reorganize(const Tensor<Scalar>& x) {
  if (x.rank() != 4) throw ShapeError("inverse_reorganize expects NCHW input, got " + to_string(x.shape()));
  if (x.dim(1) % 4 != 0) {
    throw ShapeError("inverse_reorganize needs channels divisible by 4, got " + std::to_string(x.dim(1)));
  }
  const Index N = x.dim(0), C = x.dim(1) / 4, H = 2 * x.dim(2), W = 2 * x.dim(3);
  auto rule = [x, N, C, H, W](Node<Scalar>& self) {
    x.node()->accumulate(permute_batch(self.grad, N, C, H, W, true));
  };
  return detail::make_result<Scalar>("inverse_reorganize", {N, C, H, W}, permute_batch(x.value(), N, C, H, W, false),
                                     {&x}, std::move(rule));
}

std::string_view to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::none: return "none";
    case FusionMode::down_only: return "down_only";
    case FusionMode::up_only: return "up_only";
    case FusionMode::both: return "both";
  }
  return "?";
}

std::string_view to_string(ResampleMode mode) {
  return mode == ResampleMode::pool_conv ? "pool_conv" : "reorganize_groupconv";
}

FusionMode parse_fusion_mode(std::string_view text) {
  for (auto m : {FusionMode::none, FusionMode::down_only, FusionMode::up_only, FusionMode::both}) {
    if (text == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown fusion_mode '" + std::string(text) + "'");
}

ResampleMode parse_resample_mode(std::string_view text) {
  for (auto m : {ResampleMode::reorganize_groupconv, ResampleMode::pool_conv}) {
    if (text == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown resample_mode '" + std::string(text) + "'");
}

template <typename Scalar>
void FeaturePyramid<Scalar>::validate() const {
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!levels[i].defined() || levels[i].rank() != 4) throw ShapeError("pyramid level is not an NCHW tensor");
  }
  for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
    const auto& a = levels[i];
    const auto& b = levels[i + 1];
    if (b.dim(0) != a.dim(0) || b.dim(1) != 2 * a.dim(1) || a.dim(2) != 2 * b.dim(2) || a.dim(3) != 2 * b.dim(3)) {
      throw ShapeError("pyramid levels " + std::to_string(i + 1) + " and " + std::to_string(i + 2) +
                       " break the halve/double rule: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
  }
}

template <typename Scalar>
Tensor<Scalar> group_fuse_down(const Tensor<Scalar>& x, const ConvParams<Scalar>& conv) {
  if (x.rank() != 4 || x.dim(1) != 4 * conv.groups || conv.out_channels() != 2 * conv.groups) {
    throw ShapeError("group_fuse_down: needs 4*groups input and 2*groups output channels, got input " +
                     to_string(x.shape()) + " with " + std::to_string(conv.groups) + " groups");
  }
  return conv2d(x, conv);
}

template <typename Scalar>
Tensor<Scalar> group_fuse_up(const Tensor<Scalar>& x, const ConvParams<Scalar>& conv) {
  if (x.rank() != 4 || x.dim(1) != 2 * conv.groups || conv.out_channels() != 4 * conv.groups) {
    throw ShapeError("group_fuse_up: needs 2*groups input and 4*groups output channels, got input " +
                     to_string(x.shape()) + " with " + std::to_string(conv.groups) + " groups");
  }
  return conv2d(x, conv);
}

template <typename Scalar>
Tensor<Scalar> pool_conv_down(const Tensor<Scalar>& shallow, const ConvParams<Scalar>& conv) {
  return conv2d(maxpool2d(shallow), conv);
}

template <typename Scalar>
Tensor<Scalar> upsample_conv_up(const Tensor<Scalar>& deep, const ConvParams<Scalar>& conv) {
  return conv2d(bilinear_upsample2x(deep), conv);
}

template <typename Scalar>
DownFuse<Scalar> DownFuse<Scalar>::make(Index shallow_channels, ResampleMode resample, Rng& rng) {
  const Index C = shallow_channels;
  DownFuse unit;
  unit.resample = resample;
  unit.resample_conv = resample == ResampleMode::reorganize_groupconv ? make_conv<Scalar>(4 * C, 2 * C, 3, 1, C, rng)
                                                                      : make_conv<Scalar>(C, 2 * C, 3, 1, 1, rng);
  unit.alpha = Tensor<Scalar>::scalar(Scalar(0.5), true);
  unit.beta = Tensor<Scalar>::scalar(Scalar(0.5), true);
  unit.post = ConvBnRelu<Scalar>::make(2 * C, 2 * C, rng);
  unit.eca = EcaLayer<Scalar>::make(2 * C, rng);
  return unit;
}

template <typename Scalar>
UpFuse<Scalar> UpFuse<Scalar>::make(Index shallow_channels, ResampleMode resample, Rng& rng) {
  const Index C = shallow_channels;
  UpFuse unit;
  unit.resample = resample;
  unit.resample_conv = resample == ResampleMode::reorganize_groupconv ? make_conv<Scalar>(2 * C, 4 * C, 3, 1, C, rng)
                                                                      : make_conv<Scalar>(2 * C, C, 3, 1, 1, rng);
  unit.alpha = Tensor<Scalar>::scalar(Scalar(0.5), true);
  unit.beta = Tensor<Scalar>::scalar(Scalar(0.5), true);
  unit.post = ConvBnRelu<Scalar>::make(C, C, rng);
  unit.eca = EcaLayer<Scalar>::make(C, rng);
  return unit;
}

template <typename Scalar>
Tensor<Scalar> down_fuse(const Tensor<Scalar>& shallow, const Tensor<Scalar>& deep, DownFuse<Scalar>& unit,
                         Mode mode) {
  require_pair(shallow, deep, "down_fuse");
  const Tensor<Scalar> resampled = unit.resample == ResampleMode::reorganize_groupconv
                                       ? group_fuse_down(reorganize(shallow), unit.resample_conv)
                                       : pool_conv_down(shallow, unit.resample_conv);
  const Tensor<Scalar> combined = add_weighted(resampled, deep, unit.alpha, unit.beta);
  return eca_forward(conv_bn_relu_forward(combined, unit.post, mode), unit.eca);
}

template <typename Scalar>
Tensor<Scalar> up_fuse(const Tensor<Scalar>& deep, const Tensor<Scalar>& shallow, UpFuse<Scalar>& unit, Mode mode) {
  require_pair(shallow, deep, "up_fuse");
  const Tensor<Scalar> resampled = unit.resample == ResampleMode::reorganize_groupconv
                                       ? inverse_reorganize(group_fuse_up(deep, unit.resample_conv))
                                       : upsample_conv_up(deep, unit.resample_conv);
  const Tensor<Scalar> combined = add_weighted(resampled, shallow, unit.alpha, unit.beta);
  return eca_forward(conv_bn_relu_forward(combined, unit.post, mode), unit.eca);
}

template <typename Scalar>
FuseBlock<Scalar> FuseBlock<Scalar>::make(Index base_channels, FusionMode mode, ResampleMode resample, Rng& rng) {
  FuseBlock block;
  block.mode = mode;
  const bool downward = mode == FusionMode::down_only || mode == FusionMode::both;
  const bool upward = mode == FusionMode::up_only || mode == FusionMode::both;
  for (Index i = 0; i < 3 && downward; ++i) block.down.push_back(DownFuse<Scalar>::make(base_channels << i, resample, rng));
  for (Index i = 0; i < 3 && upward; ++i) block.up.push_back(UpFuse<Scalar>::make(base_channels << i, resample, rng));
  return block;
}

template <typename Scalar>
FeaturePyramid<Scalar> fuse_block_forward(const FeaturePyramid<Scalar>& pyramid, FuseBlock<Scalar>& block, Mode mode) {
  pyramid.validate();
  FeaturePyramid<Scalar> out = pyramid;
  auto& t = out.levels;
  if (!block.down.empty()) {
    for (std::size_t i = 0; i < 3; ++i) t[i + 1] = down_fuse(t[i], t[i + 1], block.down[i], mode);
  }
  if (!block.up.empty()) {
    for (std::size_t i = 3; i-- > 0;) t[i] = up_fuse(t[i + 1], t[i], block.up[i], mode);
  }
  return out;
}

template <typename Scalar>
FeaturePyramid<Scalar> fusion_module_forward(const FeaturePyramid<Scalar>& pyramid,
                                             std::span<FuseBlock<Scalar>> blocks, Mode mode) {
  FeaturePyramid<Scalar> current = pyramid;
  for (FuseBlock<Scalar>& block : blocks) current = fuse_block_forward(current, block, mode);
  return current;
}

template <typename Scalar>
void collect(const std::string& prefix, DownFuse<Scalar>& unit, ParamList<Scalar>& out) {
  collect(prefix + ".resample", unit.resample_conv, out);
  out.push_back({prefix + ".alpha", unit.alpha, true});
  out.push_back({prefix + ".beta", unit.beta, true});
  collect(prefix + ".post", unit.post, out);
  collect(prefix + ".eca", unit.eca, out);
}

template <typename Scalar>
void collect(const std::string& prefix, UpFuse<Scalar>& unit, ParamList<Scalar>& out) {
  collect(prefix + ".resample", unit.resample_conv, out);
  out.push_back({prefix + ".alpha", unit.alpha, true});
  out.push_back({prefix + ".beta", unit.beta, true});
  collect(prefix + ".post", unit.post, out);
  collect(prefix + ".eca", unit.eca, out);
}

template <typename Scalar>
void collect(const std::string& prefix, FuseBlock<Scalar>& block, ParamList<Scalar>& out) {
  for (std::size_t i = 0; i < block.down.size(); ++i) collect(prefix + ".down." + std::to_string(i), block.down[i], out);
  for (std::size_t i = 0; i < block.up.size(); ++i) collect(prefix + ".up." + std::to_string(i), block.up[i], out);
}

#define FUSIONUNET_INSTANTIATE_FUSION(Scalar)                                                                          \
  template Tensor<Scalar> reorganize(const Tensor<Scalar>&);                                                          \
  template Tensor<Scalar> inverse_reorganize(const Tensor<Scalar>&);                                                  \
  template struct FeaturePyramid<Scalar>;                                                                              \
  template Tensor<Scalar> group_fuse_down(const Tensor<Scalar>&, const ConvParams<Scalar>&);                          \
  template Tensor<Scalar> group_fuse_up(const Tensor<Scalar>&, const ConvParams<Scalar>&);                            \
  template Tensor<Scalar> pool_conv_down(const Tensor<Scalar>&, const ConvParams<Scalar>&);                           \
  template Tensor<Scalar> upsample_conv_up(const Tensor<Scalar>&, const ConvParams<Scalar>&);                         \
  template struct DownFuse<Scalar>;                                                                                    \
  template struct UpFuse<Scalar>;                                                                                      \
  template struct FuseBlock<Scalar>;                                                                                   \
  template Tensor<Scalar> down_fuse(const Tensor<Scalar>&, const Tensor<Scalar>&, DownFuse<Scalar>&, Mode);           \
  template Tensor<Scalar> up_fuse(const Tensor<Scalar>&, const Tensor<Scalar>&, UpFuse<Scalar>&, Mode);               \
  template FeaturePyramid<Scalar> fuse_block_forward(const FeaturePyramid<Scalar>&, FuseBlock<Scalar>&, Mode);        \
  template FeaturePyramid<Scalar> fusion_module_forward(const FeaturePyramid<Scalar>&, std::span<FuseBlock<Scalar>>, \
                                                        Mode);                                                         \
  template void collect(const std::string&, DownFuse<Scalar>&, ParamList<Scalar>&);                                   \
  template void collect(const std::string&, UpFuse<Scalar>&, ParamList<Scalar>&);                                     \
  template void collect(const std::string&, FuseBlock<Scalar>&, ParamList<Scalar>&);

FUSIONUNET_INSTANTIATE_FUSION(float)
FUSIONUNET_INSTANTIATE_FUSION(double)

}  // namespace fusionunet
