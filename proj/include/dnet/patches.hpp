#pragma once

#include <compare>
#include <string>
#include <utility>
#include <vector>

#include "dnet/label_map.hpp"
#include "dnet/tensor.hpp"

namespace dnet {

struct Origin {
  std::size_t row = 0;
  std::size_t col = 0;
  auto operator<=>(const Origin&) const = default;
};

/// A square crop of a source image (and, for training patches, its labels).
struct Patch {
  Tensor image;     // [3,P,P]
  LabelMap labels;  // empty for inference tiles
  Origin origin;
  std::string source;
};

/// Start offsets along one axis: 0, stride, 2*stride, ... plus a final start
/// snapped to `extent - patch` when the grid does not land on it.
std::vector<std::size_t> patch_starts(std::size_t extent, std::size_t patch, std::size_t stride);

struct TrainingPatchOptions {
  std::size_t patch_size = 64;
  std::size_t stride = 16;
  /// Patches with fewer distinct classes are dropped.
  std::size_t min_distinct_classes = 3;
};

/// Origins of every grid placement that survives the class-count filter.
std::vector<Origin> training_patch_origins(const LabelMap& labels, const TrainingPatchOptions& options);
std::vector<Patch> extract_training_patches(const Tensor& image, const LabelMap& labels,
                                            const TrainingPatchOptions& options, const std::string& source = {});

/// Overlapping tiles with stride patch - overlap; the last row/column of
/// tiles is snapped to the image border so every pixel is covered.
std::vector<Origin> tile_origins(std::size_t height, std::size_t width, std::size_t patch, std::size_t overlap);
std::vector<Patch> tile_for_inference(const Tensor& image, std::size_t patch, std::size_t overlap);

Tensor crop_image(const Tensor& image, Origin origin, std::size_t size);
LabelMap crop_labels(const LabelMap& labels, Origin origin, std::size_t size);

/// Argmax over axis 0 of [K,H,W]; ties go to the lowest class index.
LabelMap argmax_labels(const Tensor& probs);

/// Running per-pixel sums of tile probabilities and how many tiles covered
/// each pixel.
class ProbAccumulator {
 public:
  ProbAccumulator(std::size_t classes, std::size_t height, std::size_t width);

  void add(const Tensor& tile_probs, Origin origin);
  bool fully_covered() const;
  /// Equal-weight mean per pixel plus its argmax label map. Throws if any
  /// pixel was never covered.
  std::pair<Tensor, LabelMap> finalize() const;

  std::size_t classes() const { return classes_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

 private:
  std::size_t classes_, height_, width_;
  std::vector<double> sums_;
  std::vector<std::uint32_t> counts_;
};

struct TileProbs {
  Origin origin;
  Tensor probs;  // [K,P,P]
};

/// Accumulates tiles in origin order, so the result does not depend on the
/// order the tiles arrive in.
std::pair<Tensor, LabelMap> merge_tiles(std::size_t classes, std::size_t height, std::size_t width,
                                        std::vector<TileProbs> tiles);

}  // namespace dnet
