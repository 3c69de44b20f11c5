#include "fusionunet/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace fusionunet {

namespace {

constexpr double kPi = 3.141592653589793;

using Color = std::array<double, 3>;

struct Canvas {
  Index channels, side;
  std::vector<double> pixels;  // C x S x S

  Canvas(Index c, Index s) : channels(c), side(s), pixels(c * s * s, 0.0) {}
  double& at(Index c, Index y, Index x) { return pixels[(c * side + y) * side + x]; }

  void set(Index y, Index x, const Color& color) {
    for (Index c = 0; c < channels; ++c) at(c, y, x) = color[std::min<Index>(c, 2)];
  }
};

Color jitter(const Color& base, double amount, Rng& rng) {
  Color out;
  for (std::size_t i = 0; i < 3; ++i) out[i] = base[i] + uniform(rng, -amount, amount);
  return out;
}

Color mix(const Color& a, const Color& b, double t) {
  return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])};
}

// Stain-like background: base colour plus a few low-frequency waves.
void paint_background(Canvas& canvas, const Color& base, Rng& rng) {
  struct Wave {
    double fy, fx, phase, amplitude;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves) {
    w = {uniform(rng, 0.5, 2.0), uniform(rng, 0.5, 2.0), uniform(rng, 0.0, 2.0 * kPi), uniform(rng, 0.01, 0.04)};
  }
  const double s = static_cast<double>(canvas.side);
  for (Index y = 0; y < canvas.side; ++y) {
    for (Index x = 0; x < canvas.side; ++x) {
      double shade = 0.0;
      for (const auto& w : waves) shade += w.amplitude * std::sin(2.0 * kPi * (w.fy * y + w.fx * x) / s + w.phase);
      canvas.set(y, x, {base[0] + shade, base[1] + shade, base[2] + shade});
    }
  }
}

// Thin darker strands of stroma; background label.
void paint_fibres(Canvas& canvas, const Color& stroma, const Color& dark, Rng& rng) {
  const Index count = uniform_int(rng, 3, 8);
  const double side = static_cast<double>(canvas.side);
  for (Index f = 0; f < count; ++f) {
    const double y0 = uniform(rng, 0.0, side), x0 = uniform(rng, 0.0, side);
    const double angle = uniform(rng, 0.0, kPi);
    const double length = uniform(rng, 15.0, 40.0);
    const double bend = uniform(rng, -0.04, 0.04);
    const Color color = mix(stroma, dark, uniform(rng, 0.3, 0.6));
    for (double t = 0.0; t <= length; t += 0.5) {
      const double a = angle + bend * t;
      const double y = y0 + t * std::sin(a), x = x0 + t * std::cos(a);
      const auto iy = static_cast<Index>(std::floor(y)), ix = static_cast<Index>(std::floor(x));
      if (iy >= 0 && iy < canvas.side && ix >= 0 && ix < canvas.side) canvas.set(iy, ix, color);
    }
  }
}

// 3x3 binomial blur with clamped edges.
void blur(Canvas& canvas) {
  const Index S = canvas.side;
  std::vector<double> out(canvas.pixels.size());
  constexpr double w[3] = {0.25, 0.5, 0.25};
  for (Index c = 0; c < canvas.channels; ++c) {
    for (Index y = 0; y < S; ++y) {
      for (Index x = 0; x < S; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const Index yy = std::clamp<Index>(y + dy, 0, S - 1), xx = std::clamp<Index>(x + dx, 0, S - 1);
            acc += w[dy + 1] * w[dx + 1] * canvas.at(c, yy, xx);
          }
        }
        out[static_cast<std::size_t>((c * S + y) * S + x)] = acc;
      }
    }
  }
  canvas.pixels = std::move(out);
}

void render_nuclei(const SynthSpec& spec, Rng& rng, Canvas& canvas, LabelMap& mask) {
  const Color stroma = jitter({0.86, 0.68, 0.80}, 0.04, rng);
  const Color nucleus = jitter({0.36, 0.20, 0.52}, 0.04, rng);
  paint_background(canvas, stroma, rng);
  paint_fibres(canvas, stroma, nucleus, rng);
  const Index count = uniform_int(rng, spec.min_objects, spec.max_objects);
  const double side = static_cast<double>(spec.side);
  for (Index k = 0; k < count; ++k) {
    const double cy = uniform(rng, 0.0, side);
    const double cx = uniform(rng, 0.0, side);
    const double ra = uniform(rng, 2.0, 6.0);
    const double rb = uniform(rng, 2.0, 6.0);
    const double angle = uniform(rng, 0.0, kPi);
    const Color color = mix(stroma, nucleus, uniform(rng, 0.3, 1.0));
    const double c = std::cos(angle), s = std::sin(angle);
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - 7.0)));
    const Index y1 = std::min<Index>(spec.side - 1, static_cast<Index>(std::ceil(cy + 7.0)));
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - 7.0)));
    const Index x1 = std::min<Index>(spec.side - 1, static_cast<Index>(std::ceil(cx + 7.0)));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double u = (dx * c + dy * s) / ra;
        const double v = (-dx * s + dy * c) / rb;
        if (u * u + v * v <= 1.0) {
          // Chromatin texture.
          const double grain = 1.0 + 0.12 * normal(rng);
          canvas.set(y, x, {color[0] * grain, color[1] * grain, color[2] * grain});
          mask(y, x) = 1;
        }
      }
    }
  }
}

void render_glands(const SynthSpec& spec, Rng& rng, Canvas& canvas, LabelMap& mask) {
  const Color stroma = jitter({0.88, 0.70, 0.82}, 0.04, rng);
  const Color epithelium = jitter({0.45, 0.28, 0.58}, 0.04, rng);
  const Color lumen = jitter({0.96, 0.94, 0.96}, 0.02, rng);
  paint_background(canvas, stroma, rng);
  paint_fibres(canvas, stroma, epithelium, rng);
  const Index count = uniform_int(rng, spec.min_objects, spec.max_objects);
  const double side = static_cast<double>(spec.side);
  for (Index k = 0; k < count; ++k) {
    const double cy = uniform(rng, 0.0, side);
    const double cx = uniform(rng, 0.0, side);
    const double outer = uniform(rng, 6.0, 14.0);
    const double inner = outer - uniform(rng, 2.0, 4.0);
    const Color ring = mix(stroma, epithelium, uniform(rng, 0.6, 1.0));
    for (Index y = 0; y < spec.side; ++y) {
      for (Index x = 0; x < spec.side; ++x) {
        const double r = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
        if (r > outer) continue;
        if (r >= inner) {
          canvas.set(y, x, ring);
          mask(y, x) = 1;
        } else {
          canvas.set(y, x, lumen);
          mask(y, x) = 0;
        }
      }
    }
  }
}

}  // namespace

void validate_sample(const SegSample& sample, Index n_classes) {
  const auto& img = sample.image;
  if (!img.defined() || img.rank() != 3) throw std::invalid_argument("sample image must be C x S x S");
  if (img.dim(1) != sample.mask.height || img.dim(2) != sample.mask.width) {
    throw std::invalid_argument("sample image " + to_string(img.shape()) + " does not match its mask");
  }
  if (static_cast<Index>(sample.mask.labels.size()) != sample.mask.size()) {
    throw std::invalid_argument("mask label count does not match its dimensions");
  }
  for (auto label : sample.mask.labels) {
    if (label < 0 || label >= n_classes) throw std::invalid_argument("mask label " + std::to_string(label) + " out of range");
  }
}

std::string_view to_string(SynthStyle style) { return style == SynthStyle::glands ? "glands" : "nuclei"; }

SynthStyle parse_synth_style(std::string_view text) {
  if (text == "nuclei") return SynthStyle::nuclei;
  if (text == "glands") return SynthStyle::glands;
  throw std::invalid_argument("unknown synthetic style '" + std::string(text) + "'");
}

SynthSpec SynthSpec::defaults(SynthStyle style) {
  SynthSpec spec;
  spec.style = style;
  if (style == SynthStyle::glands) {
    spec.min_objects = 2;
    spec.max_objects = 5;
  }
  return spec;
}

void SynthSpec::validate() const {
  if (side < 8) throw std::invalid_argument("synthetic side must be at least 8");
  if (channels != 1 && channels != 3) throw std::invalid_argument("synthetic images have 1 or 3 channels");
  if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("invalid object count range");
  if (!(noise >= 0.0) || noise > 1.0) throw std::invalid_argument("noise must be in [0, 1]");
}

std::string SynthSpec::to_json() const {
  nlohmann::ordered_json j;
  j["style"] = std::string(fusionunet::to_string(style));
  j["side"] = side;
  j["channels"] = channels;
  j["min_objects"] = min_objects;
  j["max_objects"] = max_objects;
  j["noise"] = noise;
  j["seed"] = seed;
  return j.dump();
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  const SynthStyle style = j.contains("style") ? parse_synth_style(j["style"].get<std::string>()) : SynthStyle::nuclei;
  SynthSpec spec = defaults(style);
  spec.side = j.value("side", spec.side);
  spec.channels = j.value("channels", spec.channels);
  spec.min_objects = j.value("min_objects", spec.min_objects);
  spec.max_objects = j.value("max_objects", spec.max_objects);
  spec.noise = j.value("noise", spec.noise);
  spec.seed = j.value("seed", spec.seed);
  spec.validate();
  return spec;
}

SegSample generate_sample(const SynthSpec& spec, std::uint64_t sample_seed) {
  spec.validate();
  Rng rng(sample_seed);
  Canvas canvas(spec.channels, spec.side);
  LabelMap mask(spec.side, spec.side, 0);
  if (spec.style == SynthStyle::nuclei) {
    render_nuclei(spec, rng, canvas, mask);
  } else {
    render_glands(spec, rng, canvas, mask);
  }
  blur(canvas);
  Vector<float> values(canvas.pixels.size());
  for (std::size_t i = 0; i < canvas.pixels.size(); ++i) {
    const double v = std::clamp(canvas.pixels[i] + spec.noise * normal(rng), 0.0, 1.0);
    values[static_cast<Index>(i)] = static_cast<float>(std::round(v * 255.0) / 255.0);
  }
  return {Tensor<float>({spec.channels, spec.side, spec.side}, std::move(values)), std::move(mask)};
}

std::vector<SegSample> generate_dataset(const SynthSpec& spec, Index n) {
  spec.validate();
  if (n < 0) throw std::invalid_argument("sample count must be non-negative");
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(generate_sample(spec, derive_seed(spec.seed, static_cast<std::uint64_t>(i))));
  return out;
}

SegSample apply_augmentation(const SegSample& sample, Augmentation which) {
  const Index S = sample.side();
  if (sample.mask.width != S || sample.image.dim(1) != S || sample.image.dim(2) != S) {
    throw std::invalid_argument("augment expects a square sample");
  }
  if (which == Augmentation::identity) return sample;
  // Source coordinate of output pixel (y, x).
  auto source = [which, S](Index y, Index x) -> std::pair<Index, Index> {
    switch (which) {
      case Augmentation::hflip: return {y, S - 1 - x};
      case Augmentation::vflip: return {S - 1 - y, x};
      case Augmentation::rot90: return {x, S - 1 - y};
      case Augmentation::rot180: return {S - 1 - y, S - 1 - x};
      case Augmentation::rot270: return {S - 1 - x, y};
      case Augmentation::identity: break;
    }
    return {y, x};
  };
  const Index C = sample.channels();
  Vector<float> image(C * S * S);
  LabelMap mask(S, S);
  const float* in = sample.image.data();
  for (Index y = 0; y < S; ++y) {
    for (Index x = 0; x < S; ++x) {
      const auto [sy, sx] = source(y, x);
      mask(y, x) = sample.mask(sy, sx);
      for (Index c = 0; c < C; ++c) image[(c * S + y) * S + x] = in[(c * S + sy) * S + sx];
    }
  }
  return {Tensor<float>({C, S, S}, std::move(image)), std::move(mask)};
}

SegSample augment(const SegSample& sample, Rng& rng) {
  return apply_augmentation(sample, static_cast<Augmentation>(uniform_int(rng, 0, 5)));
}

template <typename Scalar>
Tensor<Scalar> stack_images(std::span<const SegSample> samples, std::span<const Index> indices) {
  if (indices.empty()) throw std::invalid_argument("cannot stack an empty batch");
  const Shape& first = samples[indices[0]].image.shape();
  const Index per = numel(first);
  Vector<Scalar> values(static_cast<Index>(indices.size()) * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = samples[indices[b]].image;
    if (img.shape() != first) throw ShapeError("batch images differ in shape");
    values.segment(static_cast<Index>(b) * per, per) = img.value().template cast<Scalar>();
  }
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), first.begin(), first.end());
  return Tensor<Scalar>(std::move(shape), std::move(values));
}

std::vector<std::int32_t> stack_labels(std::span<const SegSample> samples, std::span<const Index> indices) {
  std::vector<std::int32_t> out;
  for (Index i : indices) {
    const auto& l = samples[i].mask.labels;
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

double foreground_fraction(std::span<const SegSample> samples) {
  std::int64_t fg = 0, total = 0;
  for (const auto& s : samples) {
    fg += std::count_if(s.mask.labels.begin(), s.mask.labels.end(), [](std::int32_t l) { return l > 0; });
    total += s.mask.size();
  }
  return total == 0 ? 0.0 : static_cast<double>(fg) / static_cast<double>(total);
}

template Tensor<float> stack_images(std::span<const SegSample>, std::span<const Index>);
template Tensor<double> stack_images(std::span<const SegSample>, std::span<const Index>);

}  // namespace fusionunet
