#pragma once

#include "fusionunet/random.hpp"
#include "fusionunet/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fusionunet {

/// Dense integer label image, row-major H x W.
struct LabelMap {
  Index height = 0;
  Index width = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(Index h, Index w, std::int32_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::int32_t& operator()(Index y, Index x) { return labels[y * width + x]; }
  std::int32_t operator()(Index y, Index x) const { return labels[y * width + x]; }
  Index size() const { return height * width; }

  bool operator==(const LabelMap&) const = default;
};

/// image: C x S x S in [0, 1] (multiples of 1/255); mask: S x S in [0, n_classes).
struct SegSample {
  Tensor<float> image;
  LabelMap mask;

  Index channels() const { return image.dim(0); }
  Index side() const { return mask.height; }
};

/// Throws std::invalid_argument unless shapes agree and every label is in [0, n_classes).
void validate_sample(const SegSample& sample, Index n_classes);

enum class SynthStyle { nuclei, glands };

std::string_view to_string(SynthStyle style);
SynthStyle parse_synth_style(std::string_view text);

struct SynthSpec {
  SynthStyle style = SynthStyle::nuclei;
  Index side = 64;
  Index channels = 3;
  Index min_objects = 10;
  Index max_objects = 40;
  double noise = 0.10;  // std-dev of per-pixel Gaussian noise
  std::uint64_t seed = 0;

  /// Object count range defaults for a style: 10-40 nuclei, 2-5 glands.
  static SynthSpec defaults(SynthStyle style);
  void validate() const;
  std::string to_json() const;
  static SynthSpec from_json(const std::string& text);

  bool operator==(const SynthSpec&) const = default;
};

/// Sample i is rendered from its own stream derive_seed(spec.seed, i), so any
/// prefix of a dataset is independent of n.
std::vector<SegSample> generate_dataset(const SynthSpec& spec, Index n);
SegSample generate_sample(const SynthSpec& spec, std::uint64_t sample_seed);

enum class Augmentation { identity, hflip, vflip, rot90, rot180, rot270 };

/// Applies one transform to image and mask alike. rot90 is counter-clockwise.
SegSample apply_augmentation(const SegSample& sample, Augmentation which);
/// Uniform choice among the six transforms.
SegSample augment(const SegSample& sample, Rng& rng);

/// Stacks samples[indices] into an N x C x S x S batch and N*S*S labels.
template <typename Scalar>
Tensor<Scalar> stack_images(std::span<const SegSample> samples, std::span<const Index> indices);
std::vector<std::int32_t> stack_labels(std::span<const SegSample> samples, std::span<const Index> indices);

/// Foreground (label > 0) pixel fraction over a set of samples.
double foreground_fraction(std::span<const SegSample> samples);

// Image files. Binary netpbm: P6 for 3-channel images, P5 for 1-channel
// images and for masks (raw label values). maxval must be in 1..255.

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_image(const Tensor<float>& image, const std::filesystem::path& path);
Tensor<float> read_image(const std::filesystem::path& path);
void write_mask(const LabelMap& mask, const std::filesystem::path& path);
/// Rejects labels >= n_classes.
LabelMap read_mask(const std::filesystem::path& path, Index n_classes);

/// 64-bit FNV-1a of a file's bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

// Dataset directory: images/NNNN.ppm, masks/NNNN.pgm, manifest.json holding
// the spec, n_classes and per-file checksums.
void save_dataset(std::span<const SegSample> samples, const SynthSpec& spec, Index n_classes,
                  const std::filesystem::path& dir);
/// Verifies every checksum in the manifest.
std::vector<SegSample> load_dataset(const std::filesystem::path& dir, Index n_classes);

}  // namespace fusionunet
