#pragma once

#include "fusionunet/tensor.hpp"

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>

namespace fusionunet {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Coordinates sampled per tensor; 0 checks every element.
  Index max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Step shrink attempts when a perturbation crosses a relu/maxpool kink.
  int kink_retries = 3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index checked = 0;
  /// Coordinates excluded because every step size crossed a kink.
  Index skipped_kinks = 0;
  std::set<std::string> ops_seen;
};

/// Compares backward() against central differences for every tensor in
/// `wrt`. `f` must be scalar valued and is re-run with `wrt` perturbed in
/// place. The error per coordinate is
///   |analytic - fd| / max(|analytic|, |fd|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::span<Tensor<double>> wrt,
                           const GradCheckOptions& options = {});

/// Single-input form; returns the maximum relative error.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps = 1e-4);

}  // namespace fusionunet
