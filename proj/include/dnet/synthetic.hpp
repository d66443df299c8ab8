#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dnet/label_map.hpp"
#include "dnet/losses.hpp"
#include "dnet/tensor.hpp"

namespace dnet {

/// Raised when minority blobs cannot be placed without collisions.
class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Recipe for a synthetic class-imbalanced scene.
///
/// Class 0 is background, class 1 one elongated "structure" band, classes
/// 2..K-1 small elliptical blobs placed on the structure. `ratios` gives the
/// target pixel frequency of each class; `blob_radius` gives the semi-axis
/// range for each blob class (index 0 is class 2).
struct SceneSpec {
  std::size_t height = 96;
  std::size_t width = 96;
  std::size_t num_classes = 4;
  std::vector<double> ratios{1000.0, 300.0, 10.0, 1.0};
  std::vector<std::pair<double, double>> blob_radius{{2.0, 4.0}, {2.5, 4.0}};
  /// Std-dev of the per-pixel Gaussian texture noise (intensity units in [0,1]).
  double noise_sigma = 0.06;
  /// Distance of each blob color from the structure color.
  double defect_contrast = 0.25;
  std::uint64_t seed = 7;
  std::size_t max_placement_attempts = 400;

  void validate() const;
  /// Mean RGB color of each class.
  std::vector<std::array<double, 3>> class_colors() const;
  /// Expected number of blobs of `cls` in one scene.
  double expected_blobs(std::size_t cls) const;
};

struct Scene {
  Tensor image;  // [3,H,W] in [0,1]
  LabelMap labels;
};

/// Pure function of (spec, scene index).
Scene generate(const SceneSpec& spec, std::size_t scene_index = 0);
std::vector<Scene> generate_corpus(const SceneSpec& spec, std::size_t count);

/// Exact per-class pixel counts over all maps, plus derived class weights.
ClassStats dataset_stats(std::span<const LabelMap> corpus, std::size_t num_classes,
                         WeightBasis basis = WeightBasis::Count);

}  // namespace dnet
