#include "fusionunet/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fusionunet {

namespace {

template <typename Scalar>
void size_slots(std::span<Tensor<Scalar>> params, std::vector<Vector<Scalar>>& slots) {
  if (slots.empty()) {
    for (const auto& p : params) slots.push_back(Vector<Scalar>::Zero(p.size()));
    return;
  }
  if (slots.size() != params.size()) throw ShapeError("optimizer state does not match the parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (slots[i].size() != params[i].size()) throw ShapeError("optimizer state does not match a parameter size");
  }
}

template <typename Scalar>
bool usable_grad(const Tensor<Scalar>& p) {
  if (!p.has_grad()) return false;
  if (p.grad().size() != p.size()) throw ShapeError("gradient size does not match its parameter");
  return true;
}

}  // namespace

template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state, const AdamConfig& config, double lr) {
  size_slots(params, state.m);
  size_slots(params, state.v);
  ++state.steps;
  const auto b1 = static_cast<Scalar>(config.beta1);
  const auto b2 = static_cast<Scalar>(config.beta2);
  const auto eps = static_cast<Scalar>(config.eps);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(config.beta1, static_cast<double>(state.steps)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(config.beta2, static_cast<double>(state.steps)));
  const auto rate = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (usable_grad(params[i])) {
      const auto& g = params[i].grad();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    } else {
      m *= b1;
      v *= b2;
    }
    params[i].mutable_value().array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, SgdState<Scalar>& state, const SgdConfig& config, double lr) {
  size_slots(params, state.velocity);
  const auto mu = static_cast<Scalar>(config.momentum);
  const auto rate = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = state.velocity[i];
    v *= mu;
    if (usable_grad(params[i])) v += params[i].grad();
    params[i].mutable_value() -= rate * v;
  }
}

double cosine_warm_restart_lr(std::int64_t step, std::int64_t t0, double t_mult, double lr_max, double eta_min) {
  if (step < 0) throw std::invalid_argument("scheduler step must be non-negative");
  if (t0 < 1 || t_mult < 1.0) throw std::invalid_argument("scheduler needs T_0 >= 1 and T_mult >= 1");
  double t_cur = static_cast<double>(step);
  double period = static_cast<double>(t0);
  while (t_cur >= period) {
    t_cur -= period;
    period *= t_mult;
  }
  constexpr double kPi = 3.141592653589793;
  return eta_min + (lr_max - eta_min) * (1.0 + std::cos(kPi * t_cur / period)) / 2.0;
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(std::string_view text) {
  if (text == "adam") return OptimizerKind::adam;
  if (text == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + std::string(text) + "'");
}

template void adam_step(std::span<Tensor<float>>, AdamState<float>&, const AdamConfig&, double);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&, const AdamConfig&, double);
template void sgd_step(std::span<Tensor<float>>, SgdState<float>&, const SgdConfig&, double);
template void sgd_step(std::span<Tensor<double>>, SgdState<double>&, const SgdConfig&, double);

}  // namespace fusionunet
