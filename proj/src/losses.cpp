#include "dnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dnet/nn_ops.hpp"
#include "dnet/ops.hpp"

namespace dnet {

namespace {

// Probabilities may drift outside [0,1] by rounding only.
constexpr double kProbTolerance = 1e-9;

void check_layout(const Tensor& y, const OneHotTarget& target, std::span<const double> weights, const char* op) {
  const std::size_t k = target.num_classes();
  if (y.shape() != Shape{k, target.pixels()})
    throw TensorError(std::string(op) + ": prediction shape " + shape_to_string(y.shape()) + " does not match target [" +
                      std::to_string(k) + "," + std::to_string(target.pixels()) + "]");
  if (weights.size() != k) throw TensorError(std::string(op) + ": need one weight per class");
}

void check_probabilities(const Tensor& y, const char* op) {
  for (double v : y.data())
    if (!(v >= -kProbTolerance && v <= 1.0 + kProbTolerance))
      throw TensorError(std::string(op) + ": probability outside [0,1]");
}

// Constant [K,M] map holding w_c * t_cm.
Tensor weighted_target(const OneHotTarget& target, std::span<const double> weights) {
  const std::size_t m = target.pixels();
  std::vector<double> v(target.num_classes() * m, 0.0);
  const auto& labels = target.labels();
  for (std::size_t p = 0; p < m; ++p) v[labels[p] * m + p] = weights[labels[p]];
  return Tensor::from({target.num_classes(), m}, std::move(v));
}

Tensor wce_from_log_probs(const Tensor& log_probs, const OneHotTarget& target, std::span<const double> weights) {
  const double m = static_cast<double>(target.pixels());
  return mul(sum(mul(log_probs, weighted_target(target, weights))), -1.0 / m);
}

}  // namespace

ClassStats class_weights(std::span<const std::uint64_t> counts, WeightBasis basis) {
  if (counts.size() < 2) throw std::invalid_argument("class_weights: need at least two classes");
  ClassStats stats;
  stats.counts.assign(counts.begin(), counts.end());
  stats.weights.assign(counts.size(), 0.0);
  double total = 0.0;
  for (auto n : counts) total += static_cast<double>(n);
  double cap = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    const double f = basis == WeightBasis::Count ? static_cast<double>(counts[c]) : static_cast<double>(counts[c]) / total;
    stats.weights[c] = 1.0 / std::sqrt(f);
    cap = std::max(cap, stats.weights[c]);
  }
  if (cap == 0.0) throw std::invalid_argument("class_weights: all class counts are zero");
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] == 0) stats.weights[c] = cap;
  return stats;
}

OneHotTarget::OneHotTarget(std::span<const std::uint8_t> labels, std::size_t num_classes)
    : num_classes_(num_classes), labels_(labels.begin(), labels.end()) {
  if (num_classes < 2) throw std::invalid_argument("OneHotTarget: need at least two classes");
  if (labels.empty()) throw std::invalid_argument("OneHotTarget: empty label set");
  const std::size_t m = labels.size();
  std::vector<double> v(num_classes * m, 0.0);
  for (std::size_t p = 0; p < m; ++p) {
    if (labels[p] >= num_classes)
      throw std::invalid_argument("OneHotTarget: label " + std::to_string(labels[p]) + " outside [0,K)");
    v[labels[p] * m + p] = 1.0;
  }
  t_ = Tensor::from({num_classes, m}, std::move(v));
}

std::vector<std::uint64_t> OneHotTarget::class_counts() const {
  std::vector<std::uint64_t> counts(num_classes_, 0);
  for (auto l : labels_) ++counts[l];
  return counts;
}

Tensor weighted_cross_entropy(const Tensor& probs, const OneHotTarget& target, std::span<const double> weights) {
  check_layout(probs, target, weights, "weighted_cross_entropy");
  check_probabilities(probs, "weighted_cross_entropy");
  // Off-target entries are multiplied by zero; the floor only keeps log finite.
  const Tensor floored = clamp_min(probs, std::numeric_limits<double>::min());
  return wce_from_log_probs(log(floored), target, weights);
}

Tensor weighted_cross_entropy_logits(const Tensor& logits, const OneHotTarget& target,
                                     std::span<const double> weights) {
  check_layout(logits, target, weights, "weighted_cross_entropy");
  return wce_from_log_probs(log_softmax_channels(logits), target, weights);
}

Tensor generalized_dice(const Tensor& probs, const OneHotTarget& target, std::span<const double> weights) {
  check_layout(probs, target, weights, "generalized_dice");
  const std::size_t k = target.num_classes(), m = target.pixels();
  std::vector<double> wmap(k * m);
  for (std::size_t c = 0; c < k; ++c) std::fill_n(wmap.begin() + c * m, m, weights[c]);
  const Tensor w = Tensor::from({k, m}, std::move(wmap));

  // t is one-hot, so sum_m t^2 is the class pixel count.
  double target_mass = 0.0;
  const auto counts = target.class_counts();
  for (std::size_t c = 0; c < k; ++c) target_mass += weights[c] * static_cast<double>(counts[c]);

  const Tensor intersection = sum(mul(probs, weighted_target(target, weights)));
  const Tensor denominator = add(sum(mul(square(probs), w)), target_mass + kDiceEpsilon);
  if (!(denominator.item() > 0.0)) throw TensorError("generalized_dice: degenerate denominator");
  const Tensor numerator = add(mul(intersection, 2.0), kDiceEpsilon);
  return rsub(1.0, div(numerator, denominator));
}

double presence_ratio(const OneHotTarget& target) {
  std::size_t present = 0;
  for (auto count : target.class_counts())
    if (count > 0) ++present;
  return static_cast<double>(present) / static_cast<double>(target.num_classes());
}

Tensor hybrid_combine(const Tensor& wce, const Tensor& gdice, double gamma, CeClamp clamp) {
  const Tensor ce_term = clamp == CeClamp::Max ? clamp_min(wce, 1.0) : wce;
  return add(mul(ce_term, 1.0 - gamma), mul(gdice, gamma));
}

LossTerms hybrid_loss(const Tensor& logits, const OneHotTarget& target, std::span<const double> weights,
                      CeClamp clamp) {
  const Tensor wce = weighted_cross_entropy_logits(logits, target, weights);
  const Tensor gdice = generalized_dice(softmax_channels(logits), target, weights);
  const double gamma = presence_ratio(target);
  return {hybrid_combine(wce, gdice, gamma, clamp), gamma, wce.item(), gdice.item()};
}

LossTerms compute_loss(LossKind kind, const Tensor& logits, const OneHotTarget& target,
                       std::span<const double> weights, CeClamp clamp) {
  const double gamma = presence_ratio(target);
  switch (kind) {
    case LossKind::Ce: {
      const std::vector<double> ones(target.num_classes(), 1.0);
      Tensor l = weighted_cross_entropy_logits(logits, target, ones);
      return {l, gamma, l.item(), 0.0};
    }
    case LossKind::Wce: {
      Tensor l = weighted_cross_entropy_logits(logits, target, weights);
      return {l, gamma, l.item(), 0.0};
    }
    case LossKind::Gdice: {
      Tensor l = generalized_dice(softmax_channels(logits), target, weights);
      return {l, gamma, 0.0, l.item()};
    }
    case LossKind::Hybrid:
      return hybrid_loss(logits, target, weights, clamp);
  }
  throw std::logic_error("unknown loss kind");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::Ce: return "ce";
    case LossKind::Wce: return "wce";
    case LossKind::Gdice: return "gdice";
    case LossKind::Hybrid: return "hybrid";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "ce") return LossKind::Ce;
  if (name == "wce") return LossKind::Wce;
  if (name == "gdice") return LossKind::Gdice;
  if (name == "hybrid") return LossKind::Hybrid;
  throw std::invalid_argument("unknown loss '" + name + "' (expected ce, wce, gdice or hybrid)");
}

std::string to_string(CeClamp clamp) { return clamp == CeClamp::Max ? "max" : "none"; }

CeClamp parse_ce_clamp(const std::string& name) {
  if (name == "max") return CeClamp::Max;
  if (name == "none") return CeClamp::None;
  throw std::invalid_argument("unknown ce_clamp '" + name + "' (expected max or none)");
}

std::string to_string(WeightBasis basis) { return basis == WeightBasis::Count ? "count" : "frequency"; }

WeightBasis parse_weight_basis(const std::string& name) {
  if (name == "count") return WeightBasis::Count;
  if (name == "frequency") return WeightBasis::Frequency;
  throw std::invalid_argument("unknown class weight basis '" + name + "' (expected frequency or count)");
}

}  // namespace dnet
