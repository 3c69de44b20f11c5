#pragma once

#include "fusionunet/tensor.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace fusionunet {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SgdConfig {
  double lr = 1e-2;
  double momentum = 0.9;
};

template <typename Scalar>
struct AdamState {
  std::vector<Vector<Scalar>> m;
  std::vector<Vector<Scalar>> v;
  std::int64_t steps = 0;
};

template <typename Scalar>
struct SgdState {
  std::vector<Vector<Scalar>> velocity;
};

/// One bias-corrected Adam update at learning rate `lr`. A parameter without
/// a gradient is treated as having a zero gradient. State is sized on first
/// use; later calls throw ShapeError if the parameter set changes.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state, const AdamConfig& config, double lr);

/// Heavy-ball SGD: v = momentum * v + g, p -= lr * v.
template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, SgdState<Scalar>& state, const SgdConfig& config, double lr);

/// SGDR schedule at integer step `step` (epochs here). Cycle i lasts
/// t0 * t_mult^i steps; within a cycle
///   lr = eta_min + (lr_max - eta_min) * (1 + cos(pi * t_cur / T_i)) / 2.
double cosine_warm_restart_lr(std::int64_t step, std::int64_t t0, double t_mult, double lr_max, double eta_min);

enum class OptimizerKind { adam, sgd };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view text);

/// Selected optimizer plus its state.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, AdamConfig adam, SgdConfig sgd) : kind_(kind), adam_(adam), sgd_(sgd) {}

  double base_lr() const { return kind_ == OptimizerKind::adam ? adam_.lr : sgd_.lr; }

  void step(std::span<Tensor<Scalar>> params, double lr) {
    if (kind_ == OptimizerKind::adam) {
      adam_step(params, adam_state_, adam_, lr);
    } else {
      sgd_step(params, sgd_state_, sgd_, lr);
    }
  }

 private:
  OptimizerKind kind_;
  AdamConfig adam_;
  SgdConfig sgd_;
  AdamState<Scalar> adam_state_;
  SgdState<Scalar> sgd_state_;
};

}  // namespace fusionunet
