#pragma once

#include "fusionunet/fusion.hpp"
#include "fusionunet/serialize.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fusionunet {

enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

struct FusionConfig {
  Index in_channels = 3;
  Index n_classes = 2;
  Index base_width = 64;
  Index input_side = 224;
  FusionMode fusion_mode = FusionMode::both;
  ResampleMode resample_mode = ResampleMode::reorganize_groupconv;
  Index fuse_stack = 1;
  Precision precision = Precision::f32;

  /// Throws std::invalid_argument on an unusable configuration.
  void validate() const;
  /// Fuse blocks actually instantiated (0 when fusion_mode is none).
  Index fuse_blocks() const { return fusion_mode == FusionMode::none ? 0 : fuse_stack; }

  std::string to_json() const;
  static FusionConfig from_json(const std::string& text);

  bool operator==(const FusionConfig&) const = default;
};

/// Encoder (stem + 4 DownBlocks), fusion module over T1..T4, decoder
/// (4 UpBlocks with CCA) and a 1x1 classifier.
template <typename Scalar>
class FusionUNet {
 public:
  /// Deterministic for a given (config, seed).
  static FusionUNet build(const FusionConfig& config, std::uint64_t seed);

  const FusionConfig& config() const { return config_; }

  FeaturePyramid<Scalar> encode(const Tensor<Scalar>& x, Mode mode);
  FeaturePyramid<Scalar> fuse(const FeaturePyramid<Scalar>& pyramid, Mode mode);
  Tensor<Scalar> decode(const FeaturePyramid<Scalar>& pyramid, Mode mode);

  /// N x in_channels x S x S -> N x n_classes x S x S logits.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);

  /// Parameters then running statistics, in a fixed order that doubles as
  /// the checkpoint layout.
  ParamList<Scalar> state();
  std::vector<Tensor<Scalar>> trainable();

 private:
  FusionConfig config_;
  ConvBlock<Scalar> stem_;
  std::vector<DownBlock<Scalar>> down_;
  std::vector<FuseBlock<Scalar>> fusion_;
  std::vector<UpBlock<Scalar>> up_;
  ConvParams<Scalar> head_;
};

template <typename Scalar>
Index count_params(FusionUNet<Scalar>& model);

struct CostReport {
  Index params = 0;
  std::int64_t macs = 0;
  /// 2 per multiply-accumulate, 1 per bias add, 1 per output element of
  /// pooling/activation/elementwise ops (batch norm 2, bilinear 4, softmax 3).
  std::int64_t flops = 0;
};

/// Builds the model in single precision and tallies one eval-mode forward
/// pass on a zero input of `input_shape`.
CostReport count_cost(const FusionConfig& config, const Shape& input_shape);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Checkpoint layout, little-endian:
//   "FUNW" | version u32 | config length u64 | config JSON (UTF-8) |
//   tensor count u64 | FTEN records in state() order
template <typename Scalar>
void save_checkpoint(FusionUNet<Scalar>& model, const std::filesystem::path& path);

/// Rebuilds the model from the stored config. Throws FormatError on
/// corruption or when the stored precision is not Scalar's.
template <typename Scalar>
FusionUNet<Scalar> load_checkpoint(const std::filesystem::path& path);

/// Loads into an existing model; the stored config must equal model.config().
template <typename Scalar>
void load_checkpoint_into(FusionUNet<Scalar>& model, const std::filesystem::path& path);

/// Reads only the config header.
FusionConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace fusionunet
