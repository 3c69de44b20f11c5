#pragma once

#include "fusionunet/tensor.hpp"

#include <cstdint>
#include <span>
#include <string_view>

namespace fusionunet {

// Segmentation losses over N x K x H x W logits and N*H*W integer labels.
// Each is a single recorded op; labels outside [0, K) throw std::out_of_range.

/// Mean over pixels of -log softmax(logits)[label].
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels);

/// 1 - mean over classes of (2 * sum(p * y) + eps) / (sum(p) + sum(y) + eps),
/// sums taken over the whole batch.
template <typename Scalar>
Tensor<Scalar> dice_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels,
                         double eps = 1e-5);

/// Mean over pixels of -(1 - p_t)^gamma * log p_t.
template <typename Scalar>
Tensor<Scalar> focal_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels,
                          double gamma = 2.0);

enum class LossKind { ce, dice, ce_dice, focal };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view text);

template <typename Scalar>
Tensor<Scalar> segmentation_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels,
                                 LossKind kind);

}  // namespace fusionunet
