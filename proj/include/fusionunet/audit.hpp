#pragma once

#include "fusionunet/grad_check.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fusionunet {

struct AuditEntry {
  std::string name;
  GradCheckResult result;
  bool passed = false;
};

struct AuditReport {
  double tolerance = 1e-4;
  std::vector<AuditEntry> entries;
  /// Names from differentiable_ops() that no entry exercised.
  std::vector<std::string> missing_ops;

  bool passed() const;
};

struct AuditOptions {
  double tolerance = 1e-4;
  std::uint64_t seed = 2024;
  /// Coordinates sampled per parameter tensor in the full-model check.
  Index model_coords_per_tensor = 3;
};

using AuditCallback = std::function<void(const AuditEntry&)>;

/// Central-difference audit in double precision of every differentiable op,
/// every composite block (ConvBlock, ECA, CCA, DownFuse, UpFuse, FuseBlock
/// in both resample modes) and the full model at C=8, S=32. Each scalar
/// objective is a fixed random projection of the block output.
AuditReport run_gradient_audit(const AuditOptions& options = {}, const AuditCallback& on_entry = {});

}  // namespace fusionunet
