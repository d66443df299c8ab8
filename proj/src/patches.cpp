#include "dnet/patches.hpp"

#include <algorithm>
#include <stdexcept>

namespace dnet {

std::vector<std::size_t> patch_starts(std::size_t extent, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0) throw std::invalid_argument("patch size and stride must be positive");
  if (extent < patch)
    throw std::invalid_argument("image extent " + std::to_string(extent) + " is smaller than patch size " +
                                std::to_string(patch));
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + patch <= extent; s += stride) starts.push_back(s);
  if (starts.back() + patch != extent) starts.push_back(extent - patch);
  return starts;
}

Tensor crop_image(const Tensor& image, Origin origin, std::size_t size) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (origin.row + size > h || origin.col + size > w) throw std::out_of_range("crop outside image bounds");
  std::vector<double> v(c * size * size);
  auto src = image.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(src.begin() + (ch * h + origin.row + y) * w + origin.col, size, v.begin() + (ch * size + y) * size);
  return Tensor::from({c, size, size}, std::move(v));
}

LabelMap crop_labels(const LabelMap& labels, Origin origin, std::size_t size) {
  if (origin.row + size > labels.height || origin.col + size > labels.width)
    throw std::out_of_range("crop outside label bounds");
  LabelMap out(size, size);
  for (std::size_t y = 0; y < size; ++y)
    std::copy_n(labels.values.begin() + (origin.row + y) * labels.width + origin.col, size,
                out.values.begin() + y * size);
  return out;
}

std::vector<Origin> training_patch_origins(const LabelMap& labels, const TrainingPatchOptions& options) {
  std::vector<Origin> out;
  for (auto r : patch_starts(labels.height, options.patch_size, options.stride)) {
    for (auto c : patch_starts(labels.width, options.patch_size, options.stride)) {
      const Origin o{r, c};
      if (crop_labels(labels, o, options.patch_size).distinct_classes() >= options.min_distinct_classes)
        out.push_back(o);
    }
  }
  return out;
}

std::vector<Patch> extract_training_patches(const Tensor& image, const LabelMap& labels,
                                            const TrainingPatchOptions& options, const std::string& source) {
  if (image.rank() != 3 || image.dim(1) != labels.height || image.dim(2) != labels.width)
    throw std::invalid_argument("image and label map sizes differ");
  std::vector<Patch> out;
  for (const auto& o : training_patch_origins(labels, options))
    out.push_back({crop_image(image, o, options.patch_size), crop_labels(labels, o, options.patch_size), o, source});
  return out;
}

std::vector<Origin> tile_origins(std::size_t height, std::size_t width, std::size_t patch, std::size_t overlap) {
  if (overlap >= patch) throw std::invalid_argument("tile overlap must be smaller than the tile size");
  const std::size_t stride = patch - overlap;
  std::vector<Origin> out;
  for (auto r : patch_starts(height, patch, stride))
    for (auto c : patch_starts(width, patch, stride)) out.push_back({r, c});
  return out;
}

std::vector<Patch> tile_for_inference(const Tensor& image, std::size_t patch, std::size_t overlap) {
  std::vector<Patch> out;
  for (const auto& o : tile_origins(image.dim(1), image.dim(2), patch, overlap))
    out.push_back({crop_image(image, o, patch), {}, o, {}});
  return out;
}

LabelMap argmax_labels(const Tensor& probs) {
  const std::size_t k = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  const std::size_t plane = h * w;
  LabelMap out(h, w);
  auto v = probs.data();
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (v[c * plane + p] > v[best * plane + p]) best = c;
    out.values[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ProbAccumulator::ProbAccumulator(std::size_t classes, std::size_t height, std::size_t width)
    : classes_(classes), height_(height), width_(width), sums_(classes * height * width, 0.0), counts_(height * width, 0) {}

void ProbAccumulator::add(const Tensor& tile_probs, Origin origin) {
  if (tile_probs.rank() != 3 || tile_probs.dim(0) != classes_)
    throw std::invalid_argument("tile probabilities must be [K,P,P]");
  const std::size_t th = tile_probs.dim(1), tw = tile_probs.dim(2);
  if (origin.row + th > height_ || origin.col + tw > width_) throw std::out_of_range("tile outside accumulator");
  auto v = tile_probs.data();
  for (std::size_t c = 0; c < classes_; ++c)
    for (std::size_t y = 0; y < th; ++y) {
      double* dst = sums_.data() + (c * height_ + origin.row + y) * width_ + origin.col;
      const double* src = v.data() + (c * th + y) * tw;
      for (std::size_t x = 0; x < tw; ++x) dst[x] += src[x];
    }
  for (std::size_t y = 0; y < th; ++y)
    for (std::size_t x = 0; x < tw; ++x) ++counts_[(origin.row + y) * width_ + origin.col + x];
}

bool ProbAccumulator::fully_covered() const {
  return std::all_of(counts_.begin(), counts_.end(), [](auto n) { return n > 0; });
}

std::pair<Tensor, LabelMap> ProbAccumulator::finalize() const {
  if (!fully_covered()) throw std::runtime_error("finalize: some pixels are not covered by any tile");
  const std::size_t plane = height_ * width_;
  std::vector<double> mean(sums_.size());
  for (std::size_t c = 0; c < classes_; ++c)
    for (std::size_t p = 0; p < plane; ++p) mean[c * plane + p] = sums_[c * plane + p] / counts_[p];
  Tensor probs = Tensor::from({classes_, height_, width_}, std::move(mean));
  LabelMap labels = argmax_labels(probs);
  return {std::move(probs), std::move(labels)};
}

std::pair<Tensor, LabelMap> merge_tiles(std::size_t classes, std::size_t height, std::size_t width,
                                        std::vector<TileProbs> tiles) {
  std::sort(tiles.begin(), tiles.end(), [](const TileProbs& a, const TileProbs& b) { return a.origin < b.origin; });
  ProbAccumulator acc(classes, height, width);
  for (const auto& t : tiles) acc.add(t.probs, t.origin);
  return acc.finalize();
}

}  // namespace dnet
