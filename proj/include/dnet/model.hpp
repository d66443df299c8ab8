#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dnet/tensor.hpp"

namespace dnet {

/// Architecture of the two-path network.
///
/// Path A is a VGG-style stack of conv blocks, each followed by a 2x2 max-pool,
/// with 1x1 score layers on the pool outputs listed in `skip_stages` and
/// FCN-style x2 upsample-and-sum back to input resolution. Path B branches off
/// after pool `branch_stage`, runs one dilated 3x3 conv per entry of
/// `dilation_schedule` at constant width, scores, and upsamples back. The two
/// score maps are summed.
struct ModelConfig {
  std::size_t num_classes = 4;
  std::vector<std::size_t> block_channels{16, 32, 64, 64, 64};
  std::vector<std::size_t> block_convs{1, 1, 1, 1, 1};
  std::size_t dilated_channels = 64;
  std::vector<std::size_t> dilation_schedule{2, 4, 8, 16, 16, 8, 4, 2};
  std::vector<std::size_t> skip_stages{1, 2, 3, 4, 5};
  std::size_t branch_stage = 2;
  double leaky_alpha = 0.1;
  /// Zero-pad inputs up to `input_multiple()` and crop the logits back.
  bool pad_input = false;

  std::size_t num_stages() const { return block_channels.size(); }
  std::size_t input_multiple() const { return std::size_t{1} << num_stages(); }
  void validate() const;

  static ModelConfig desk();
  /// VGG-19 widths and conv counts.
  static ModelConfig paper(std::size_t num_classes = 9);
};

struct Parameter {
  std::string name;
  Tensor value;
};

class DefectNet {
 public:
  /// Builds the parameter set and initializes it from `seed`.
  explicit DefectNet(ModelConfig config, std::uint64_t seed = 0);

  /// image [3,H,W] -> logits [K,H,W].
  Tensor forward(const Tensor& image) const;
  Tensor forward_path_a(const Tensor& image) const;
  Tensor forward_path_b(const Tensor& image) const;

  /// He-normal conv weights, zero biases, bilinear upsampling kernels.
  void init_params(std::uint64_t seed);
  void zero_grad();

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Tensor& parameter(const std::string& name);
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

 private:
  struct Paths {
    Tensor a, b;
  };
  Paths run(const Tensor& image, bool want_a, bool want_b) const;
  Tensor padded(const Tensor& image) const;
  Tensor cropped(const Tensor& logits, std::size_t h, std::size_t w) const;
  Tensor add_param(std::string name, Shape shape);

  ModelConfig config_;
  std::vector<Parameter> params_;
};

struct LayerField {
  std::string layer;
  std::size_t dilation = 1;
  /// Receptive field measured in input pixels.
  std::size_t input_pixels = 1;
  /// Receptive field measured in pixels of the layer's own grid, counted from
  /// the point where its path starts (1 at the start).
  std::size_t local_pixels = 1;
};

struct ReceptiveFields {
  std::vector<LayerField> path_a;
  std::vector<LayerField> path_b;
};

/// Analytic receptive fields of every conv/pool layer in both paths.
ReceptiveFields receptive_field(const ModelConfig& config);

/// Flat binary weights: "DNETW1", u32 record count, then per parameter
/// u32 name length, name bytes, u32 rank, u64 extents, f64 values; all
/// little-endian, in parameter order.
void write_weights(std::ostream& out, const std::vector<Parameter>& params);
void read_weights(std::istream& in, std::vector<Parameter>& params);
void save_weights(const std::string& path, const DefectNet& model);
void load_weights(const std::string& path, DefectNet& model);

}  // namespace dnet
