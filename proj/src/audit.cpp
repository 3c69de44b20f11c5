#include "fusionunet/audit.hpp"

#include "fusionunet/fusion.hpp"
#include "fusionunet/losses.hpp"
#include "fusionunet/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace fusionunet {

namespace {

using T = Tensor<double>;

T randn(Shape shape, Rng& rng, double scale = 1.0) {
  Vector<double> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = scale * normal(rng);
  return T(std::move(shape), std::move(v));
}

T positive(Shape shape, Rng& rng) {
  Vector<double> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, 0.5, 1.5);
  return T(std::move(shape), std::move(v));
}

constexpr double kObjectiveScale = 1e-3;

/// Scalar objective s * <y, R> / sqrt(numel) for a fixed random R.
struct Projection {
  T weights;

  Projection(const Shape& shape, Rng& rng)
      : weights(randn(shape, rng, kObjectiveScale / std::sqrt(static_cast<double>(numel(shape))))) {}
  T operator()(const T& y) const { return sum(y * weights); }
};

std::vector<std::int32_t> random_labels(Index count, Index classes, Rng& rng) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(count));
  for (auto& l : out) l = static_cast<std::int32_t>(uniform_int(rng, 0, classes - 1));
  return out;
}

std::vector<T> trainable(ParamList<double> params) {
  std::vector<T> out;
  for (auto& p : params) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

class Auditor {
 public:
  Auditor(const AuditOptions& options, const AuditCallback& on_entry)
      : options_(options), on_entry_(on_entry), rng_(options.seed) {}

  Rng& rng() { return rng_; }

  void check(const std::string& name, const std::function<T()>& f, std::vector<T> wrt, Index coords = 0) {
    GradCheckOptions gc;
    gc.max_coords_per_tensor = coords;
    gc.seed = derive_seed(options_.seed, hash_label(name));
    AuditEntry entry{name, grad_check(f, wrt, gc), false};
    entry.passed = entry.result.checked > 0 && entry.result.max_rel_error < options_.tolerance;
    report_.entries.push_back(entry);
    if (on_entry_) on_entry_(entry);
  }

  AuditReport finish() {
    std::set<std::string> seen;
    for (const auto& e : report_.entries) seen.insert(e.result.ops_seen.begin(), e.result.ops_seen.end());
    for (auto op : differentiable_ops()) {
      if (!seen.count(std::string(op))) report_.missing_ops.emplace_back(op);
    }
    report_.tolerance = options_.tolerance;
    return std::move(report_);
  }

 private:
  AuditOptions options_;
  AuditCallback on_entry_;
  Rng rng_;
  AuditReport report_;
};

void audit_ops(Auditor& a) {
  Rng& rng = a.rng();
  {
    T x = randn({2, 4, 6, 6}, rng);
    ConvParams<double> p{randn({6, 2, 3, 3}, rng, 0.3), randn({6}, rng), 2, 1, 2};
    Projection proj({2, 6, 3, 3}, rng);
    a.check("conv2d", [&] { return proj(conv2d(x, p)); }, {x, p.weight, *p.bias});
  }
  {
    T x = randn({2, 3, 5, 5}, rng);
    ConvParams<double> p{randn({4, 3, 1, 1}, rng, 0.5), std::nullopt, 1, 0, 1};
    Projection proj({2, 4, 5, 5}, rng);
    a.check("conv2d_pointwise", [&] { return proj(conv2d(x, p)); }, {x, p.weight});
  }
  {
    T v = randn({3, 7}, rng), k = randn({3}, rng);
    Projection proj({3, 7}, rng);
    a.check("conv1d_channels", [&] { return proj(conv1d_channels(v, k)); }, {v, k});
  }
  {
    T v = randn({3, 5}, rng), w = randn({4, 5}, rng), b = randn({4}, rng);
    Projection proj({3, 4}, rng);
    a.check("linear", [&] { return proj(linear(v, w, b)); }, {v, w, b});
  }
  {
    T x = randn({2, 3, 6, 6}, rng);
    Projection proj({2, 3, 3, 3}, rng);
    a.check("maxpool2d", [&] { return proj(maxpool2d(x)); }, {x});
  }
  {
    T x = randn({2, 3, 4, 5}, rng);
    Projection proj({2, 3, 8, 10}, rng);
    a.check("bilinear_upsample2x", [&] { return proj(bilinear_upsample2x(x)); }, {x});
  }
  {
    T x = randn({2, 3, 4, 4}, rng);
    Projection proj({2, 3, 1, 1}, rng);
    a.check("global_avg_pool", [&] { return proj(global_avg_pool(x)); }, {x});
  }
  {
    T x = randn({2, 3, 4, 4}, rng);
    Projection proj({2, 3, 4, 4}, rng);
    a.check("relu", [&] { return proj(relu(x)); }, {x});
    a.check("sigmoid", [&] { return proj(sigmoid(x)); }, {x});
    a.check("softmax_channels", [&] { return proj(softmax_channels(x)); }, {x});
  }
  {
    T x = randn({3, 4, 3, 3}, rng, 2.0);
    T gamma = positive({4}, rng), beta = randn({4}, rng);
    BatchNormStats<double> stats{randn({4}, rng), positive({4}, rng)};
    Projection proj({3, 4, 3, 3}, rng);
    a.check("batchnorm2d_train", [&] { return proj(batchnorm2d(x, gamma, beta, stats, Mode::train)); },
            {x, gamma, beta});
    a.check("batchnorm2d_eval", [&] { return proj(batchnorm2d(x, gamma, beta, stats, Mode::eval)); },
            {x, gamma, beta});
  }
  {
    T x = randn({2, 2, 3, 3}, rng), y = randn({2, 3, 3, 3}, rng);
    Projection proj({2, 5, 3, 3}, rng);
    a.check("concat_channels", [&] { return proj(concat_channels(x, y)); }, {x, y});
  }
  {
    T x = randn({2, 3, 4, 4}, rng), y = randn({2, 3, 4, 4}, rng);
    T alpha = T::scalar(0.5), beta = T::scalar(-0.7);
    Projection proj({2, 3, 4, 4}, rng);
    a.check("add_weighted", [&] { return proj(add_weighted(x, y, alpha, beta)); }, {x, y, alpha, beta});
    a.check("add", [&] { return proj(x + y); }, {x, y});
    a.check("sub", [&] { return proj(x - y); }, {x, y});
    a.check("mul", [&] { return proj(x * y); }, {x, y});
    a.check("scale", [&] { return proj(1.7 * x); }, {x});
    a.check("sum", [&] { return sum(x * x); }, {x});
    a.check("mean", [&] { return mean(x * x); }, {x});
  }
  {
    T x = randn({2, 3, 4, 4}, rng), s = randn({2, 3, 1, 1}, rng);
    Projection proj({2, 3, 4, 4}, rng);
    a.check("mul_channelwise", [&] { return proj(mul_channelwise(x, s)); }, {x, s});
  }
  {
    T x = randn({2, 12}, rng);
    Projection proj({4, 6}, rng);
    a.check("reshape", [&] { return proj(reshape(x, {4, 6})); }, {x});
  }
  {
    T x = randn({2, 3, 4, 6}, rng);
    Projection proj({2, 12, 2, 3}, rng);
    a.check("reorganize", [&] { return proj(reorganize(x)); }, {x});
    T y = randn({2, 8, 3, 2}, rng);
    Projection proj_inv({2, 2, 6, 4}, rng);
    a.check("inverse_reorganize", [&] { return proj_inv(inverse_reorganize(y)); }, {y});
  }
  {
    T z = randn({2, 3, 4, 4}, rng, 1.5);
    const auto labels = random_labels(2 * 16, 3, rng);
    a.check("cross_entropy", [&] { return cross_entropy(z, labels); }, {z});
    a.check("dice_loss", [&] { return dice_loss(z, labels); }, {z});
    a.check("focal_loss", [&] { return focal_loss(z, labels); }, {z});
  }
}

void audit_blocks(Auditor& a) {
  Rng& rng = a.rng();
  {
    auto block = ConvBlock<double>::make(3, 4, rng);
    ParamList<double> params;
    collect("block", block, params);
    T x = randn({2, 3, 6, 6}, rng);
    Projection proj({2, 4, 6, 6}, rng);
    auto wrt = trainable(params);
    wrt.push_back(x);
    a.check("ConvBlock", [&] { return proj(conv_block_forward(x, block, Mode::train)); }, wrt);
  }
  {
    auto eca = EcaLayer<double>::make(8, rng);
    T x = randn({2, 8, 4, 4}, rng);
    Projection proj({2, 8, 4, 4}, rng);
    a.check("ECA", [&] { return proj(eca_forward(x, eca)); }, {x, eca.kernel});
  }
  {
    auto cca = CcaLayer<double>::make(4, 6, rng);
    T skip = randn({2, 4, 4, 4}, rng), dec = randn({2, 6, 4, 4}, rng);
    Projection proj({2, 4, 4, 4}, rng);
    a.check("CCA", [&] { return proj(cca_forward(skip, dec, cca)); },
            {skip, dec, cca.skip_weight, cca.skip_bias, cca.decoder_weight, cca.decoder_bias});
  }
  for (ResampleMode resample : {ResampleMode::reorganize_groupconv, ResampleMode::pool_conv}) {
    const std::string suffix = std::string(" (") + std::string(to_string(resample)) + ")";
    {
      auto unit = DownFuse<double>::make(4, resample, rng);
      ParamList<double> params;
      collect("down", unit, params);
      T shallow = randn({2, 4, 8, 8}, rng), deep = randn({2, 8, 4, 4}, rng);
      Projection proj({2, 8, 4, 4}, rng);
      auto wrt = trainable(params);
      wrt.push_back(shallow);
      wrt.push_back(deep);
      a.check("DownFuse" + suffix, [&] { return proj(down_fuse(shallow, deep, unit, Mode::train)); }, wrt);
    }
    {
      auto unit = UpFuse<double>::make(4, resample, rng);
      ParamList<double> params;
      collect("up", unit, params);
      T deep = randn({2, 8, 4, 4}, rng), shallow = randn({2, 4, 8, 8}, rng);
      Projection proj({2, 4, 8, 8}, rng);
      auto wrt = trainable(params);
      wrt.push_back(deep);
      wrt.push_back(shallow);
      a.check("UpFuse" + suffix, [&] { return proj(up_fuse(deep, shallow, unit, Mode::train)); }, wrt);
    }
    {
      const Index C = 4;
      auto block = FuseBlock<double>::make(C, FusionMode::both, resample, rng);
      ParamList<double> params;
      collect("fuse", block, params);
      FeaturePyramid<double> pyramid;
      std::vector<Projection> projs;
      for (Index i = 0; i < 4; ++i) {
        const Index side = 16 >> i;
        pyramid.levels[static_cast<std::size_t>(i)] = randn({2, C << i, side, side}, rng);
        projs.emplace_back(Shape{2, C << i, side, side}, rng);
      }
      pyramid.bottleneck = randn({2, C << 4, 1, 1}, rng);
      auto wrt = trainable(params);
      for (const auto& level : pyramid.levels) wrt.push_back(level);
      a.check(
          "FuseBlock" + suffix,
          [&] {
            const auto out = fuse_block_forward(pyramid, block, Mode::train);
            T total = projs[0](out.levels[0]);
            for (std::size_t i = 1; i < 4; ++i) total = total + projs[i](out.levels[i]);
            return total;
          },
          wrt);
    }
  }
}

void audit_model(Auditor& a, Index coords) {
  Rng& rng = a.rng();
  FusionConfig config;
  config.base_width = 8;
  config.input_side = 32;
  config.precision = Precision::f64;
  auto model = FusionUNet<double>::build(config, derive_seed(rng(), 0));
  T x = randn({2, 3, 32, 32}, rng);
  Projection proj({2, config.n_classes, 32, 32}, rng);
  auto wrt = model.trainable();
  wrt.push_back(x);
  a.check("FusionUNet (C=8, S=32)", [&] { return proj(model.forward(x, Mode::train)); }, wrt, coords);
}

}  // namespace

bool AuditReport::passed() const {
  if (!missing_ops.empty() || entries.empty()) return false;
  return std::all_of(entries.begin(), entries.end(), [](const AuditEntry& e) { return e.passed; });
}

AuditReport run_gradient_audit(const AuditOptions& options, const AuditCallback& on_entry) {
  Auditor auditor(options, on_entry);
  audit_ops(auditor);
  audit_blocks(auditor);
  audit_model(auditor, options.model_coords_per_tensor);
  return auditor.finish();
}

}  // namespace fusionunet
