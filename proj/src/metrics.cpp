#include "dnet/metrics.hpp"

#include <stdexcept>

#include "json.hpp"

namespace dnet {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

void ConfusionMatrix::accumulate(const LabelMap& predicted, const LabelMap& truth) {
  if (predicted.height != truth.height || predicted.width != truth.width)
    throw std::invalid_argument("prediction and truth label maps differ in size");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = truth.values[i], p = predicted.values[i];
    if (t >= k_ || p >= k_) throw std::invalid_argument("label value outside [0,K)");
    ++counts_[t * k_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw std::invalid_argument("cannot merge confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

std::uint64_t ConfusionMatrix::true_pixels(std::size_t cls) const {
  std::uint64_t n = 0;
  for (std::size_t j = 0; j < k_; ++j) n += at(cls, j);
  return n;
}

std::uint64_t ConfusionMatrix::predicted_pixels(std::size_t cls) const {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < k_; ++i) n += at(i, cls);
  return n;
}

std::vector<std::optional<double>> per_class_accuracy(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.num_classes());
  for (std::size_t c = 0; c < cm.num_classes(); ++c)
    if (const auto n = cm.true_pixels(c); n > 0) out[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(n);
  return out;
}

std::vector<std::optional<double>> per_class_precision(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.num_classes());
  for (std::size_t c = 0; c < cm.num_classes(); ++c)
    if (const auto n = cm.predicted_pixels(c); n > 0)
      out[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(n);
  return out;
}

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.num_classes());
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const auto uni = cm.true_pixels(c) + cm.predicted_pixels(c) - cm.at(c, c);
    if (uni > 0) out[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(uni);
  }
  return out;
}

double average_defect_accuracy(const ConfusionMatrix& cm, std::span<const std::size_t> defect_classes) {
  const auto recall = per_class_accuracy(cm);
  double total = 0.0;
  std::size_t defined = 0;
  for (auto c : defect_classes) {
    if (c >= cm.num_classes()) throw std::invalid_argument("defect class id outside [0,K)");
    if (recall[c]) {
      total += *recall[c];
      ++defined;
    }
  }
  if (defined == 0) throw std::runtime_error("average_defect_accuracy: no listed class has true pixels");
  return total / static_cast<double>(defined);
}

std::string metrics_report_json(const ConfusionMatrix& cm, std::span<const std::size_t> defect_classes) {
  using nlohmann::ordered_json;
  auto to_json = [](const std::vector<std::optional<double>>& v) {
    ordered_json arr = ordered_json::array();
    for (const auto& x : v) arr.push_back(x ? ordered_json(*x) : ordered_json(nullptr));
    return arr;
  };
  ordered_json j;
  j["num_classes"] = cm.num_classes();
  j["recall"] = to_json(per_class_accuracy(cm));
  j["precision"] = to_json(per_class_precision(cm));
  j["iou"] = to_json(per_class_iou(cm));
  j["defect_classes"] = std::vector<std::size_t>(defect_classes.begin(), defect_classes.end());
  try {
    j["defect_average_recall"] = average_defect_accuracy(cm, defect_classes);
  } catch (const std::runtime_error&) {
    j["defect_average_recall"] = nullptr;
  }
  std::vector<std::uint64_t> truth, predicted;
  ordered_json matrix = ordered_json::array();
  for (std::size_t i = 0; i < cm.num_classes(); ++i) {
    truth.push_back(cm.true_pixels(i));
    predicted.push_back(cm.predicted_pixels(i));
    std::vector<std::uint64_t> row;
    for (std::size_t jx = 0; jx < cm.num_classes(); ++jx) row.push_back(cm.at(i, jx));
    matrix.push_back(row);
  }
  j["true_pixels"] = truth;
  j["predicted_pixels"] = predicted;
  j["total_pixels"] = cm.total();
  j["confusion"] = matrix;
  return j.dump(2);
}

}  // namespace dnet
