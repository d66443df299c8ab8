#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dnet/losses.hpp"
#include "dnet/model.hpp"
#include "dnet/synthetic.hpp"
#include "dnet/trainer.hpp"

namespace dnet {

/// Raised for malformed or inconsistent configuration (CLI exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  SceneSpec scene;
  std::size_t scenes = 200;
  /// Fraction of scenes (taken from the end of the corpus) held out for
  /// evaluation.
  double test_fraction = 1.0 / 3.0;
};

struct PipelineConfig {
  std::size_t patch_size = 64;
  std::size_t train_stride = 16;
  std::size_t min_distinct_classes = 3;
  std::size_t tile_overlap = 32;
};

struct AblateConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<LossKind> losses{LossKind::Ce, LossKind::Wce, LossKind::Gdice, LossKind::Hybrid};
  /// Classes averaged into the defect score; empty means 2..K-1.
  std::vector<std::size_t> defect_classes;
};

struct RunConfig {
  std::string profile = "desk";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  PipelineConfig pipeline;
  AblateConfig ablate;

  void validate() const;
  std::vector<std::size_t> defect_classes() const;

  static RunConfig desk();
  static RunConfig paper();
  static RunConfig preset(const std::string& profile);
};

/// Starts from the preset named by the document's `profile` (or
/// `default_profile` when absent) and applies every given key. Unknown keys,
/// wrong types and invalid values raise ConfigError.
RunConfig parse_run_config(const std::string& json_text, const std::string& default_profile = "desk");
RunConfig load_run_config(const std::string& path, const std::string& default_profile = "desk");
/// Full JSON form, every key spelled out.
std::string to_json(const RunConfig& config);

}  // namespace dnet
