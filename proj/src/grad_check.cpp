#include "fusionunet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace fusionunet {

namespace {

struct Probe {
  double value;
  std::uint64_t fingerprint;
};

Probe evaluate(const std::function<Tensor<double>()>& f) {
  NoGradGuard no_grad;
  std::uint64_t sink = 0;
  detail::set_kink_sink(&sink);
  double value = 0.0;
  try {
    value = f().item();
  } catch (...) {
    detail::set_kink_sink(nullptr);
    throw;
  }
  detail::set_kink_sink(nullptr);
  return {value, sink};
}

std::vector<Index> pick_coordinates(Index size, Index limit, std::mt19937_64& rng) {
  std::vector<Index> all(static_cast<std::size_t>(size));
  std::iota(all.begin(), all.end(), Index{0});
  if (limit <= 0 || limit >= size) return all;
  // partial Fisher-Yates
  for (Index i = 0; i < limit; ++i) {
    const Index j = i + static_cast<Index>(rng() % static_cast<std::uint64_t>(size - i));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(limit));
  return all;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::span<Tensor<double>> wrt,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  for (Tensor<double>& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor<double> loss = f();
  const auto tape = Tape<double>::trace(loss);
  for (const Node<double>* n : tape.order()) {
    if (n->op) result.ops_seen.insert(n->op);
  }
  loss.backward();

  std::vector<Vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (Tensor<double>& t : wrt) {
    analytic.push_back(t.has_grad() ? t.grad() : Vector<double>::Zero(t.size()));
    t.zero_grad();
  }

  const std::uint64_t base_fingerprint = evaluate(f).fingerprint;
  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    Vector<double>& values = wrt[k].mutable_value();
    for (Index i : pick_coordinates(values.size(), options.max_coords_per_tensor, rng)) {
      const double original = values[i];
      double eps = options.eps;
      bool smooth = false;
      double fd = 0.0;
      for (int attempt = 0; attempt <= options.kink_retries; ++attempt, eps /= 10.0) {
        values[i] = original + eps;
        const Probe plus = evaluate(f);
        values[i] = original - eps;
        const Probe minus = evaluate(f);
        values[i] = original;
        if (plus.fingerprint == base_fingerprint && minus.fingerprint == base_fingerprint) {
          fd = (plus.value - minus.value) / (2.0 * eps);
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++result.skipped_kinks;
        continue;
      }
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - fd) / denom);
      ++result.checked;
    }
  }
  return result;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps) {
  Tensor<double> input(x.shape(), x.value(), true);
  std::vector<Tensor<double>> wrt{input};
  GradCheckOptions options;
  options.eps = eps;
  return grad_check([&] { return f(input); }, wrt, options).max_rel_error;
}

}  // namespace fusionunet
