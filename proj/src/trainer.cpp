#include "dnet/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "dnet/ops.hpp"
#include "dnet/serial.hpp"
#include "json.hpp"

namespace dnet {

namespace {

constexpr std::string_view kOptimizerMagic = "DNETOPT1";

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      const auto b = static_cast<unsigned char>(v >> (8 * i));
      bytes(&b, 1);
    }
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
};

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("train: learning rate must be finite and non-negative");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("train: Adam betas must lie in [0,1)");
  if (!(adam_epsilon > 0.0)) throw std::invalid_argument("train: Adam epsilon must be positive");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("train: grad_clip must be non-negative");
}

std::uint64_t TrainConfig::fingerprint() const {
  Fnv1a f;
  f.u64(static_cast<std::uint64_t>(loss));
  f.f64(learning_rate);
  f.u64(batch_size);
  f.u64(seed);
  f.f64(beta1);
  f.f64(beta2);
  f.f64(adam_epsilon);
  f.u64(static_cast<std::uint64_t>(ce_clamp));
  f.u64(static_cast<std::uint64_t>(class_weight_basis));
  f.f64(grad_clip);
  return f.h;
}

void AdamState::reset(const std::vector<Parameter>& params) {
  step = 0;
  m.assign(params.size(), {});
  v.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].value.numel(), 0.0);
    v[i].assign(params[i].value.numel(), 0.0);
  }
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t t, const TrainConfig& config) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw std::invalid_argument("adam_update: parameter, grad and moment sizes differ");
  if (t == 0) throw std::invalid_argument("adam_update: step numbers start at 1");
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_epsilon);
  }
}

void adam_step(std::vector<Parameter>& params, AdamState& state, const TrainConfig& config) {
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match model");
  ++state.step;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    std::span<const double> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), 0.0);
      g = zeros;
    }
    adam_update(p.mutable_data(), g, state.m[i], state.v[i], state.step, config);
  }
}

double clip_grad_norm(std::vector<Parameter>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.value.has_grad())
      for (double g : p.value.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params)
      if (p.value.has_grad())
        for (double& g : p.value.mutable_grad()) g *= scale;
  }
  return norm;
}

std::string to_json_line(const StepRecord& r, LossKind kind) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["loss_kind"] = to_string(kind);
  j["loss"] = r.loss;
  j["gamma"] = r.gamma;
  j["wce"] = r.wce;
  j["gdice"] = r.gdice;
  j["grad_norm"] = r.grad_norm;
  return j.dump();
}

Trainer::Trainer(DefectNet& model, TrainConfig config, std::vector<Patch> patches, std::vector<double> class_weights)
    : model_(model), config_(config), patches_(std::move(patches)), weights_(std::move(class_weights)) {
  config_.validate();
  if (patches_.empty()) throw std::invalid_argument("train: no training patches");
  if (weights_.size() != model_.config().num_classes)
    throw std::invalid_argument("train: need one class weight per model class");
  adam_.reset(model_.parameters());
}

std::vector<std::size_t> Trainer::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(patches_.size());
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x0e90cu};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with our own index draw so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::pair<Tensor, OneHotTarget> Trainer::assemble(std::span<const std::size_t> batch) const {
  const std::size_t k = model_.config().num_classes;
  std::vector<Tensor> logits;
  std::vector<std::uint8_t> labels;
  for (auto idx : batch) {
    const auto& p = patches_.at(idx);
    const Tensor out = model_.forward(p.image);
    logits.push_back(reshape(out, {k, out.dim(1) * out.dim(2)}));
    labels.insert(labels.end(), p.labels.values.begin(), p.labels.values.end());
  }
  Tensor stacked = logits.size() == 1 ? logits.front() : concat(logits, 1);
  return {std::move(stacked), OneHotTarget(labels, k)};
}

LossTerms Trainer::evaluate(std::span<const std::size_t> batch) const {
  NoGradGuard guard;
  auto [logits, target] = assemble(batch);
  return compute_loss(config_.loss, logits, target, weights_, config_.ce_clamp);
}

std::string Trainer::batch_diagnostic(std::span<const std::size_t> batch, const LossTerms& terms) const {
  nlohmann::ordered_json j;
  j["error"] = "non-finite loss";
  j["step"] = adam_.step + 1;
  j["epoch"] = epoch_;
  j["loss_kind"] = to_string(config_.loss);
  j["loss"] = terms.loss.defined() ? terms.loss.item() : std::nan("");
  j["gamma"] = terms.gamma;
  j["wce"] = terms.wce;
  j["gdice"] = terms.gdice;
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  for (auto idx : batch) {
    const auto& p = patches_.at(idx);
    std::vector<std::uint64_t> counts(model_.config().num_classes, 0);
    for (auto v : p.labels.values) ++counts.at(v);
    bool finite = true;
    for (double v : p.image.data()) finite = finite && std::isfinite(v);
    items.push_back({{"index", idx},
                     {"source", p.source},
                     {"origin", {p.origin.row, p.origin.col}},
                     {"class_counts", counts},
                     {"image_finite", finite}});
  }
  j["batch"] = items;
  bool params_finite = true;
  for (const auto& p : model_.parameters())
    for (double v : p.value.data()) params_finite = params_finite && std::isfinite(v);
  j["parameters_finite"] = params_finite;
  return j.dump();
}

StepRecord Trainer::step(std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("train: empty batch");
  model_.zero_grad();
  auto [logits, target] = assemble(batch);
  LossTerms terms = compute_loss(config_.loss, logits, target, weights_, config_.ce_clamp);
  const double loss = terms.loss.item();
  if (!std::isfinite(loss))
    throw NonFiniteLossError("non-finite loss at step " + std::to_string(adam_.step + 1),
                             batch_diagnostic(batch, terms));
  terms.loss.backward();

  StepRecord rec;
  rec.step = adam_.step + 1;
  rec.epoch = epoch_;
  rec.loss = loss;
  rec.gamma = terms.gamma;
  rec.wce = terms.wce;
  rec.gdice = terms.gdice;
  rec.grad_norm = clip_grad_norm(model_.parameters(), config_.grad_clip);
  if (!std::isfinite(rec.grad_norm))
    throw NonFiniteLossError("non-finite gradient at step " + std::to_string(rec.step), batch_diagnostic(batch, terms));
  if (hook_) hook_(rec, model_.parameters());
  adam_step(model_.parameters(), adam_, config_);
  history_.push_back(rec);
  return rec;
}

void Trainer::run_epoch() {
  const auto order = epoch_order(epoch_);
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t n = std::min(config_.batch_size, order.size() - start);
    step(std::span<const std::size_t>(order).subspan(start, n));
  }
  ++epoch_;
  if (on_epoch_) on_epoch_(epoch_);
}

void Trainer::train() {
  while (epoch_ < config_.epochs) run_epoch();
}

void Trainer::write_checkpoint(std::ostream& out) const {
  write_weights(out, model_.parameters());
  serial::put_magic(out, kOptimizerMagic);
  serial::put_u64(out, config_.fingerprint());
  serial::put_u64(out, adam_.step);
  serial::put_u64(out, epoch_);
  serial::put_u32(out, static_cast<std::uint32_t>(adam_.m.size()));
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    serial::put_u64(out, adam_.m[i].size());
    for (double x : adam_.m[i]) serial::put_f64(out, x);
    for (double x : adam_.v[i]) serial::put_f64(out, x);
  }
  serial::put_u64(out, history_.size());
  for (const auto& r : history_) {
    serial::put_u64(out, r.step);
    serial::put_u64(out, r.epoch);
    for (double x : {r.loss, r.gamma, r.wce, r.gdice, r.grad_norm}) serial::put_f64(out, x);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void Trainer::read_checkpoint(std::istream& in) {
  // Parse into temporaries first so a bad file leaves the trainer untouched.
  std::vector<Parameter> params;
  for (const auto& p : model_.parameters()) params.push_back({p.name, Tensor::zeros(p.value.shape())});
  read_weights(in, params);
  serial::expect_magic(in, kOptimizerMagic);
  if (serial::get_u64(in) != config_.fingerprint())
    throw std::runtime_error("checkpoint: training configuration differs from the one that wrote it");
  AdamState adam;
  adam.step = serial::get_u64(in);
  const std::uint64_t epoch = serial::get_u64(in);
  const std::uint32_t n = serial::get_u32(in);
  if (n != params.size()) throw std::runtime_error("checkpoint: optimizer state does not match model");
  adam.m.resize(n);
  adam.v.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t len = serial::get_u64(in);
    if (len != params[i].value.numel()) throw std::runtime_error("checkpoint: moment size mismatch for " + params[i].name);
    adam.m[i].resize(len);
    adam.v[i].resize(len);
    for (auto& x : adam.m[i]) x = serial::get_f64(in);
    for (auto& x : adam.v[i]) x = serial::get_f64(in);
  }
  std::vector<StepRecord> history(serial::get_u64(in));
  for (auto& r : history) {
    r.step = serial::get_u64(in);
    r.epoch = serial::get_u64(in);
    r.loss = serial::get_f64(in);
    r.gamma = serial::get_f64(in);
    r.wce = serial::get_f64(in);
    r.gdice = serial::get_f64(in);
    r.grad_norm = serial::get_f64(in);
  }
  auto& live = model_.parameters();
  for (std::size_t i = 0; i < live.size(); ++i) {
    auto src = params[i].value.data();
    std::copy(src.begin(), src.end(), live[i].value.mutable_data().begin());
  }
  adam_ = std::move(adam);
  epoch_ = epoch;
  history_ = std::move(history);
}

void Trainer::save_checkpoint(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + tmp);
    write_checkpoint(out);
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  read_checkpoint(in);
}

}  // namespace dnet
