#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dnet/label_map.hpp"

namespace dnet {

/// K x K pixel counts; entry (i, j) counts pixels of true class i predicted
/// as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  void accumulate(const LabelMap& predicted, const LabelMap& truth);
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
  std::uint64_t total() const;
  std::uint64_t true_pixels(std::size_t cls) const;
  std::uint64_t predicted_pixels(std::size_t cls) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

/// Recall per class; nullopt for classes with no true pixels.
std::vector<std::optional<double>> per_class_accuracy(const ConfusionMatrix& cm);
std::vector<std::optional<double>> per_class_precision(const ConfusionMatrix& cm);
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);

/// Unweighted mean of the defined recalls over `defect_classes`. Throws when
/// none of them is defined.
double average_defect_accuracy(const ConfusionMatrix& cm, std::span<const std::size_t> defect_classes);

/// Metrics report JSON: per-class recall/precision/IoU, defect average,
/// pixel totals and the raw matrix.
std::string metrics_report_json(const ConfusionMatrix& cm, std::span<const std::size_t> defect_classes);

}  // namespace dnet
