#include "fusionunet/losses.hpp"

#include "fusionunet/ops.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace fusionunet {

namespace {

struct LossGeometry {
  Index batch, classes, pixels;
  Index count() const { return batch * pixels; }
  Index offset(Index n, Index k, Index p) const { return (n * classes + k) * pixels + p; }
};

template <typename Scalar>
LossGeometry loss_geometry(const char* op, const Tensor<Scalar>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 4 || logits.dim(1) < 2) {
    throw ShapeError(std::string(op) + " expects N x K x H x W logits with K >= 2, got " + to_string(logits.shape()));
  }
  LossGeometry g{logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3)};
  if (static_cast<Index>(labels.size()) != g.count()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(g.count()) + " pixels");
  }
  for (auto label : labels) {
    if (label < 0 || label >= g.classes) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(label) + " outside [0, " +
                              std::to_string(g.classes) + ")");
    }
  }
  return g;
}

// Softmax probabilities and log-probabilities in logits layout.
template <typename Scalar>
void log_softmax(const Tensor<Scalar>& logits, const LossGeometry& g, Vector<Scalar>& prob, Vector<Scalar>& logp) {
  const Scalar* z = logits.data();
  prob.resize(logits.size());
  logp.resize(logits.size());
  for (Index n = 0; n < g.batch; ++n) {
    for (Index p = 0; p < g.pixels; ++p) {
      Scalar peak = z[g.offset(n, 0, p)];
      for (Index k = 1; k < g.classes; ++k) peak = std::max(peak, z[g.offset(n, k, p)]);
      Scalar total(0);
      for (Index k = 0; k < g.classes; ++k) total += std::exp(z[g.offset(n, k, p)] - peak);
      const Scalar log_total = std::log(total);
      for (Index k = 0; k < g.classes; ++k) {
        const Index i = g.offset(n, k, p);
        logp[i] = z[i] - peak - log_total;
        prob[i] = std::exp(logp[i]);
      }
    }
  }
}

std::vector<std::int32_t> copy_labels(std::span<const std::int32_t> labels) { return {labels.begin(), labels.end()}; }

}  // namespace

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels) {
  const LossGeometry g = loss_geometry("cross_entropy", logits, labels);
  Vector<Scalar> prob, logp;
  log_softmax(logits, g, prob, logp);
  Scalar total(0);
  for (Index n = 0; n < g.batch; ++n) {
    for (Index p = 0; p < g.pixels; ++p) total -= logp[g.offset(n, labels[n * g.pixels + p], p)];
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(g.count());
  detail::add_cost(0, 4 * logits.size());
  auto rule = [logits, prob = std::move(prob), y = copy_labels(labels), g, inv](Node<Scalar>& self) {
    const Scalar scale = self.grad[0] * inv;
    Vector<Scalar> dz = prob * scale;
    for (Index n = 0; n < g.batch; ++n) {
      for (Index p = 0; p < g.pixels; ++p) dz[g.offset(n, y[n * g.pixels + p], p)] -= scale;
    }
    logits.node()->accumulate(dz);
  };
  return detail::make_result<Scalar>("cross_entropy", {1}, Vector<Scalar>::Constant(1, total * inv), {&logits},
                                     std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> dice_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels, double eps) {
  const LossGeometry g = loss_geometry("dice_loss", logits, labels);
  Vector<Scalar> prob, logp;
  log_softmax(logits, g, prob, logp);
  Vector<Scalar> inter = Vector<Scalar>::Zero(g.classes);
  Vector<Scalar> denom = Vector<Scalar>::Constant(g.classes, static_cast<Scalar>(eps));
  for (Index n = 0; n < g.batch; ++n) {
    for (Index k = 0; k < g.classes; ++k) {
      for (Index p = 0; p < g.pixels; ++p) {
        const Scalar pk = prob[g.offset(n, k, p)];
        const bool hit = labels[n * g.pixels + p] == k;
        denom[k] += pk + (hit ? Scalar(1) : Scalar(0));
        if (hit) inter[k] += pk;
      }
    }
  }
  const Scalar e = static_cast<Scalar>(eps);
  Scalar dice_sum(0);
  for (Index k = 0; k < g.classes; ++k) dice_sum += (2 * inter[k] + e) / denom[k];
  const Scalar K = static_cast<Scalar>(g.classes);
  detail::add_cost(0, 6 * logits.size());
  auto rule = [logits, prob = std::move(prob), y = copy_labels(labels), g, inter, denom, e,
               K](Node<Scalar>& self) {
    // d loss / d p_k(i) = -(1/K) * (2 y_k(i) denom_k - (2 inter_k + eps)) / denom_k^2
    Vector<Scalar> hit_coef(g.classes), miss_coef(g.classes);
    for (Index k = 0; k < g.classes; ++k) {
      const Scalar d2 = denom[k] * denom[k];
      miss_coef[k] = self.grad[0] * (2 * inter[k] + e) / (K * d2);
      hit_coef[k] = miss_coef[k] - self.grad[0] * 2 * denom[k] / (K * d2);
    }
    Vector<Scalar> dz(prob.size());
    for (Index n = 0; n < g.batch; ++n) {
      for (Index p = 0; p < g.pixels; ++p) {
        const std::int32_t label = y[n * g.pixels + p];
        // Softmax chain rule: dz_k = p_k * (dp_k - sum_j p_j dp_j).
        Scalar weighted(0);
        for (Index k = 0; k < g.classes; ++k) {
          const Scalar dp = k == label ? hit_coef[k] : miss_coef[k];
          weighted += prob[g.offset(n, k, p)] * dp;
        }
        for (Index k = 0; k < g.classes; ++k) {
          const Index i = g.offset(n, k, p);
          const Scalar dp = k == label ? hit_coef[k] : miss_coef[k];
          dz[i] = prob[i] * (dp - weighted);
        }
      }
    }
    logits.node()->accumulate(dz);
  };
  return detail::make_result<Scalar>("dice_loss", {1}, Vector<Scalar>::Constant(1, Scalar(1) - dice_sum / K),
                                     {&logits}, std::move(rule));
}

template <typename Scalar>
Tensor<Scalar> focal_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels, double gamma) {
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_loss gamma must be non-negative");
  const LossGeometry g = loss_geometry("focal_loss", logits, labels);
  Vector<Scalar> prob, logp;
  log_softmax(logits, g, prob, logp);
  const Scalar gam = static_cast<Scalar>(gamma);
  Scalar total(0);
  // Per pixel: c = d loss / d z_j divided by (delta_jt - p_j).
  Vector<Scalar> coef(g.count());
  for (Index n = 0; n < g.batch; ++n) {
    for (Index p = 0; p < g.pixels; ++p) {
      const Index t = g.offset(n, labels[n * g.pixels + p], p);
      const Scalar pt = prob[t], lp = logp[t];
      const Scalar rest = Scalar(1) - pt;
      const Scalar weight = gam == Scalar(0) ? Scalar(1) : std::pow(rest, gam);
      total -= weight * lp;
      const Scalar slope = (gam == Scalar(0) || rest <= Scalar(0)) ? Scalar(0) : gam * std::pow(rest, gam - 1) * pt * lp;
      coef[n * g.pixels + p] = slope - weight;
    }
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(g.count());
  detail::add_cost(0, 8 * logits.size());
  auto rule = [logits, prob = std::move(prob), coef = std::move(coef), y = copy_labels(labels), g,
               inv](Node<Scalar>& self) {
    const Scalar scale = self.grad[0] * inv;
    Vector<Scalar> dz(prob.size());
    for (Index n = 0; n < g.batch; ++n) {
      for (Index p = 0; p < g.pixels; ++p) {
        const Scalar c = coef[n * g.pixels + p] * scale;
        const std::int32_t label = y[n * g.pixels + p];
        for (Index k = 0; k < g.classes; ++k) {
          const Index i = g.offset(n, k, p);
          dz[i] = c * ((k == label ? Scalar(1) : Scalar(0)) - prob[i]);
        }
      }
    }
    logits.node()->accumulate(dz);
  };
  return detail::make_result<Scalar>("focal_loss", {1}, Vector<Scalar>::Constant(1, total * inv), {&logits},
                                     std::move(rule));
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::ce: return "ce";
    case LossKind::dice: return "dice";
    case LossKind::ce_dice: return "ce_dice";
    case LossKind::focal: return "focal";
  }
  return "ce_dice";
}

LossKind parse_loss_kind(std::string_view text) {
  if (text == "ce") return LossKind::ce;
  if (text == "dice") return LossKind::dice;
  if (text == "ce_dice") return LossKind::ce_dice;
  if (text == "focal") return LossKind::focal;
  throw std::invalid_argument("unknown loss '" + std::string(text) + "'");
}

template <typename Scalar>
Tensor<Scalar> segmentation_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels, LossKind kind) {
  switch (kind) {
    case LossKind::ce: return cross_entropy(logits, labels);
    case LossKind::dice: return dice_loss(logits, labels);
    case LossKind::focal: return focal_loss(logits, labels);
    case LossKind::ce_dice: break;
  }
  return cross_entropy(logits, labels) + dice_loss(logits, labels);
}

#define FUSIONUNET_INSTANTIATE_LOSSES(Scalar)                                                               \
  template Tensor<Scalar> cross_entropy(const Tensor<Scalar>&, std::span<const std::int32_t>);            \
  template Tensor<Scalar> dice_loss(const Tensor<Scalar>&, std::span<const std::int32_t>, double);        \
  template Tensor<Scalar> focal_loss(const Tensor<Scalar>&, std::span<const std::int32_t>, double);       \
  template Tensor<Scalar> segmentation_loss(const Tensor<Scalar>&, std::span<const std::int32_t>, LossKind);

FUSIONUNET_INSTANTIATE_LOSSES(float)
FUSIONUNET_INSTANTIATE_LOSSES(double)

}  // namespace fusionunet
