#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dnet/tensor.hpp"

namespace dnet {

/// Per-class pixel counts and the derived class weights w_c = 1/sqrt(f_c).
/// Classes with no pixels get the largest weight among present classes.
struct ClassStats {
  std::vector<std::uint64_t> counts;
  std::vector<double> weights;

  std::size_t num_classes() const { return counts.size(); }
};

/// What f_c is taken to be: the raw pixel count, or the count divided by the
/// total pixel count. The two differ by the uniform factor sqrt(total), which
/// decides whether a per-pixel L_wce ever reaches the max(1, .) threshold.
enum class WeightBasis { Count, Frequency };

ClassStats class_weights(std::span<const std::uint64_t> counts, WeightBasis basis = WeightBasis::Count);

/// One-hot target t[K,M] built from per-pixel class ids.
class OneHotTarget {
 public:
  OneHotTarget(std::span<const std::uint8_t> labels, std::size_t num_classes);

  const Tensor& tensor() const { return t_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t pixels() const { return labels_.size(); }
  const std::vector<std::uint8_t>& labels() const { return labels_; }
  /// Pixels of each class in this target.
  std::vector<std::uint64_t> class_counts() const;

 private:
  std::size_t num_classes_;
  std::vector<std::uint8_t> labels_;
  Tensor t_;
};

/// Mean over pixels of -sum_c w_c t_cm log(y_cm). `probs` is [K,M] with
/// columns on the simplex.
Tensor weighted_cross_entropy(const Tensor& probs, const OneHotTarget& target, std::span<const double> weights);
/// Same loss computed from logits through log-softmax.
Tensor weighted_cross_entropy_logits(const Tensor& logits, const OneHotTarget& target,
                                     std::span<const double> weights);

/// 1 - (2 sum_c w_c sum_m y t + eps) / (sum_c w_c sum_m (y^2 + t^2) + eps).
Tensor generalized_dice(const Tensor& probs, const OneHotTarget& target, std::span<const double> weights);

constexpr double kDiceEpsilon = 1e-7;

/// Fraction of the K classes that have at least one pixel in the target.
double presence_ratio(const OneHotTarget& target);

enum class CeClamp { Max, None };

/// (1 - gamma) * max(1, wce) + gamma * gdice. gamma is a constant.
Tensor hybrid_combine(const Tensor& wce, const Tensor& gdice, double gamma, CeClamp clamp = CeClamp::Max);

enum class LossKind { Ce, Wce, Gdice, Hybrid };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);
std::string to_string(CeClamp clamp);
CeClamp parse_ce_clamp(const std::string& name);
std::string to_string(WeightBasis basis);
WeightBasis parse_weight_basis(const std::string& name);

/// A selected training loss together with the component values it was built
/// from (for logging).
struct LossTerms {
  Tensor loss;
  double gamma = 1.0;
  double wce = 0.0;
  double gdice = 0.0;
};

/// Evaluates the selected loss on logits [K,M]. `ce` uses unit weights.
LossTerms compute_loss(LossKind kind, const Tensor& logits, const OneHotTarget& target,
                       std::span<const double> weights, CeClamp clamp = CeClamp::Max);

/// Hybrid loss from logits with every component exposed.
LossTerms hybrid_loss(const Tensor& logits, const OneHotTarget& target, std::span<const double> weights,
                      CeClamp clamp = CeClamp::Max);

}  // namespace dnet
