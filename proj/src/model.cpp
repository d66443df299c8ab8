#include "dnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "dnet/nn_ops.hpp"
#include "dnet/ops.hpp"

namespace dnet {

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
  if (block_channels.empty()) throw std::invalid_argument("model: need at least one conv block");
  if (block_convs.size() != block_channels.size())
    throw std::invalid_argument("model: block_convs and block_channels lengths differ");
  for (auto c : block_channels)
    if (c == 0) throw std::invalid_argument("model: block widths must be positive");
  for (auto n : block_convs)
    if (n == 0) throw std::invalid_argument("model: every block needs at least one conv");
  if (dilated_channels == 0) throw std::invalid_argument("model: dilated_channels must be positive");
  if (dilation_schedule.empty()) throw std::invalid_argument("model: empty dilation schedule");
  for (auto l : dilation_schedule)
    if (l < 1) throw std::invalid_argument("model: dilation factors must be >= 1");
  if (skip_stages.empty()) throw std::invalid_argument("model: need at least one skip stage");
  for (auto s : skip_stages)
    if (s < 1 || s > num_stages()) throw std::invalid_argument("model: skip stage out of range");
  if (branch_stage < 1 || branch_stage > num_stages() || !is_supported_upsample_factor(std::size_t{1} << branch_stage))
    throw std::invalid_argument("model: invalid branch stage");
  if (!(leaky_alpha >= 0.0 && leaky_alpha < 1.0)) throw std::invalid_argument("model: leaky_alpha must be in [0,1)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.block_channels = {8, 16, 32, 32, 32};
  c.dilated_channels = 8;
  return c;
}

ModelConfig ModelConfig::paper(std::size_t num_classes) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.block_channels = {64, 128, 256, 512, 512};
  c.block_convs = {2, 2, 4, 4, 4};
  c.dilated_channels = 128;
  c.pad_input = true;
  return c;
}

namespace {

std::string block_conv_name(std::size_t block, std::size_t conv) {
  return "a.block" + std::to_string(block) + ".conv" + std::to_string(conv);
}

std::size_t deepest_skip(const ModelConfig& c) { return *std::max_element(c.skip_stages.begin(), c.skip_stages.end()); }

bool is_skip(const ModelConfig& c, std::size_t stage) {
  return std::find(c.skip_stages.begin(), c.skip_stages.end(), stage) != c.skip_stages.end();
}

}  // namespace

DefectNet::DefectNet(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t k = config_.num_classes;
  const std::size_t stages = config_.num_stages();
  const std::size_t deepest = std::max(deepest_skip(config_), config_.branch_stage);

  std::size_t in_ch = 3;
  for (std::size_t b = 1; b <= deepest; ++b) {
    const std::size_t out_ch = config_.block_channels[b - 1];
    for (std::size_t j = 1; j <= config_.block_convs[b - 1]; ++j) {
      add_param(block_conv_name(b, j) + ".weight", {out_ch, in_ch, 3, 3});
      add_param(block_conv_name(b, j) + ".bias", {out_ch});
      in_ch = out_ch;
    }
  }
  for (std::size_t s = 1; s <= stages; ++s) {
    if (!is_skip(config_, s)) continue;
    add_param("a.score" + std::to_string(s) + ".weight", {k, config_.block_channels[s - 1], 1, 1});
    add_param("a.score" + std::to_string(s) + ".bias", {k});
  }
  for (std::size_t s = deepest_skip(config_); s >= 1; --s) add_param("a.up" + std::to_string(s) + ".weight", {k, k, 4, 4});

  std::size_t b_in = config_.block_channels[config_.branch_stage - 1];
  for (std::size_t i = 0; i < config_.dilation_schedule.size(); ++i) {
    const std::string name = "b.dil" + std::to_string(i + 1);
    add_param(name + ".weight", {config_.dilated_channels, b_in, 3, 3});
    add_param(name + ".bias", {config_.dilated_channels});
    b_in = config_.dilated_channels;
  }
  add_param("b.score.weight", {k, config_.dilated_channels, 1, 1});
  add_param("b.score.bias", {k});
  const std::size_t b_factor = std::size_t{1} << config_.branch_stage;
  add_param("b.up.weight", {k, k, 2 * b_factor, 2 * b_factor});

  init_params(seed);
}

Tensor DefectNet::add_param(std::string name, Shape shape) {
  for (const auto& p : params_)
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
  return params_.back().value;
}

void DefectNet::init_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    auto values = p.value.mutable_data();
    const auto& shape = p.value.shape();
    const bool is_weight = p.name.ends_with(".weight");
    if (is_weight && p.name.find(".up") != std::string::npos) {
      const Tensor bilinear = bilinear_upsample_weights(shape[0], shape[2] / 2);
      std::copy(bilinear.data().begin(), bilinear.data().end(), values.begin());
    } else if (is_weight) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : values) v = dist(rng);
    } else {
      std::fill(values.begin(), values.end(), 0.0);
    }
    p.value.zero_grad();
  }
}

void DefectNet::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

Tensor& DefectNet::parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p.value;
  throw std::out_of_range("no parameter named " + name);
}

const Tensor& DefectNet::parameter(const std::string& name) const {
  return const_cast<DefectNet*>(this)->parameter(name);
}

std::size_t DefectNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Tensor DefectNet::padded(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("model input must be [3,H,W], got " + shape_to_string(image.shape()));
  const std::size_t m = config_.input_multiple();
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h % m == 0 && w % m == 0) return image;
  if (!config_.pad_input)
    throw std::invalid_argument("model input " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not divisible by " + std::to_string(m));
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  std::vector<double> v(3 * ph * pw, 0.0);
  auto src = image.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(src.begin() + (c * h + y) * w, w, v.begin() + (c * ph + y) * pw);
  return Tensor::from({3, ph, pw}, std::move(v));
}

Tensor DefectNet::cropped(const Tensor& logits, std::size_t h, std::size_t w) const {
  const std::size_t k = logits.dim(0), ph = logits.dim(1), pw = logits.dim(2);
  if (ph == h && pw == w) return logits;
  std::vector<double> v(k * h * w);
  auto src = logits.data();
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t y = 0; y < h; ++y) std::copy_n(src.begin() + (c * ph + y) * pw, w, v.begin() + (c * h + y) * w);
  auto ln = logits.node();
  return detail::make_result("crop", {k, h, w}, std::move(v), {logits}, [ln, k, h, w, ph, pw](const detail::Node& o) {
    if (!ln->requires_grad) return;
    auto& g = ln->ensure_grad();
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) g[(c * ph + y) * pw + x] += o.grad[(c * h + y) * w + x];
  });
}

DefectNet::Paths DefectNet::run(const Tensor& image, bool want_a, bool want_b) const {
  const Tensor input = padded(image);
  const double alpha = config_.leaky_alpha;
  const std::size_t deepest_a = deepest_skip(config_);
  const std::size_t deepest = std::max(want_a ? deepest_a : 0, want_b ? config_.branch_stage : 0);

  std::vector<Tensor> pools(config_.num_stages() + 1);
  Tensor x = input;
  for (std::size_t b = 1; b <= deepest; ++b) {
    for (std::size_t j = 1; j <= config_.block_convs[b - 1]; ++j) {
      const std::string name = block_conv_name(b, j);
      x = leaky_relu(conv2d(x, parameter(name + ".weight"), parameter(name + ".bias")), alpha);
    }
    x = max_pool2(x);
    pools[b] = x;
  }

  Paths out;
  if (want_a) {
    Tensor fused;
    for (std::size_t s = deepest_a; s >= 1; --s) {
      if (is_skip(config_, s)) {
        const std::string name = "a.score" + std::to_string(s);
        Tensor score = conv2d(pools[s], parameter(name + ".weight"), parameter(name + ".bias"));
        fused = fused.defined() ? add(fused, score) : score;
      }
      fused = upsample(fused, parameter("a.up" + std::to_string(s) + ".weight"), 2);
    }
    out.a = cropped(fused, image.dim(1), image.dim(2));
  }
  if (want_b) {
    Tensor y = pools[config_.branch_stage];
    for (std::size_t i = 0; i < config_.dilation_schedule.size(); ++i) {
      const std::string name = "b.dil" + std::to_string(i + 1);
      y = leaky_relu(conv2d(y, parameter(name + ".weight"), parameter(name + ".bias"), config_.dilation_schedule[i]),
                     alpha);
    }
    y = conv2d(y, parameter("b.score.weight"), parameter("b.score.bias"));
    y = upsample(y, parameter("b.up.weight"), std::size_t{1} << config_.branch_stage);
    out.b = cropped(y, image.dim(1), image.dim(2));
  }
  return out;
}

Tensor DefectNet::forward(const Tensor& image) const {
  auto paths = run(image, true, true);
  return sum_fusion(paths.a, paths.b);
}

Tensor DefectNet::forward_path_a(const Tensor& image) const { return run(image, true, false).a; }
Tensor DefectNet::forward_path_b(const Tensor& image) const { return run(image, false, true).b; }

ReceptiveFields receptive_field(const ModelConfig& config) {
  config.validate();
  ReceptiveFields fields;
  std::size_t rf = 1, jump = 1;
  std::size_t branch_rf = 1, branch_jump = 1;
  for (std::size_t b = 1; b <= config.num_stages(); ++b) {
    for (std::size_t j = 1; j <= config.block_convs[b - 1]; ++j) {
      rf += 2 * jump;
      fields.path_a.push_back({block_conv_name(b, j), 1, rf, rf});
    }
    rf += jump;
    jump *= 2;
    fields.path_a.push_back({"a.pool" + std::to_string(b), 1, rf, rf});
    if (b == config.branch_stage) {
      branch_rf = rf;
      branch_jump = jump;
    }
  }
  std::size_t local = 1;
  for (std::size_t i = 0; i < config.dilation_schedule.size(); ++i) {
    const std::size_t l = config.dilation_schedule[i];
    local += 2 * l;
    branch_rf += 2 * l * branch_jump;
    fields.path_b.push_back({"b.dil" + std::to_string(i + 1), l, branch_rf, local});
  }
  return fields;
}

}  // namespace dnet
