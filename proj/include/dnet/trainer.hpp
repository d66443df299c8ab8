#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dnet/losses.hpp"
#include "dnet/model.hpp"
#include "dnet/patches.hpp"

namespace dnet {

struct TrainConfig {
  LossKind loss = LossKind::Hybrid;
  double learning_rate = 1e-4;
  std::size_t batch_size = 4;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  CeClamp ce_clamp = CeClamp::Max;
  /// Basis of the class weights callers derive from the training corpus.
  WeightBasis class_weight_basis = WeightBasis::Frequency;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double grad_clip = 10.0;

  void validate() const;
  /// FNV-1a over every field except `epochs`, so a run can be resumed with a
  /// larger epoch budget.
  std::uint64_t fingerprint() const;
};

/// Adam first/second moments for each parameter plus the step counter.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void reset(const std::vector<Parameter>& params);
};

/// One bias-corrected Adam update of a flat parameter. `t` is the 1-based
/// step number.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t t, const TrainConfig& config);

/// Advances `state.step` and updates every parameter from its grad (a
/// missing grad counts as zero).
void adam_step(std::vector<Parameter>& params, AdamState& state, const TrainConfig& config);

/// Scales all grads so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
double clip_grad_norm(std::vector<Parameter>& params, double max_norm);

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss = 0.0;
  double gamma = 1.0;
  double wce = 0.0;
  double gdice = 0.0;
  double grad_norm = 0.0;

  bool operator==(const StepRecord&) const = default;
};

/// JSON-lines form of one history entry.
std::string to_json_line(const StepRecord& record, LossKind kind);

/// Raised when a step produces a NaN/Inf loss. `diagnostic()` is a JSON
/// document describing the offending batch.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& message, std::string diagnostic)
      : std::runtime_error(message), diagnostic_(std::move(diagnostic)) {}
  const std::string& diagnostic() const { return diagnostic_; }

 private:
  std::string diagnostic_;
};

class Trainer {
 public:
  /// Called after backward (and clipping), before the Adam update, so the
  /// parameter grads of the step are visible.
  using StepHook = std::function<void(const StepRecord&, const std::vector<Parameter>&)>;

  Trainer(DefectNet& model, TrainConfig config, std::vector<Patch> patches, std::vector<double> class_weights);

  /// Runs epochs until `config().epochs` have completed.
  void train();
  void run_epoch();
  /// One optimization step on the given patch indices.
  StepRecord step(std::span<const std::size_t> batch);

  /// Patch order for `epoch`, a pure function of (seed, epoch).
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;

  /// Loss of the current model on a batch without touching grads or state.
  LossTerms evaluate(std::span<const std::size_t> batch) const;

  void set_step_hook(StepHook hook) { hook_ = std::move(hook); }
  void set_epoch_callback(std::function<void(std::uint64_t)> cb) { on_epoch_ = std::move(cb); }

  const TrainConfig& config() const { return config_; }
  TrainConfig& mutable_config() { return config_; }
  const std::vector<StepRecord>& history() const { return history_; }
  std::uint64_t epochs_done() const { return epoch_; }
  const AdamState& optimizer() const { return adam_; }
  const std::vector<Patch>& patches() const { return patches_; }
  const std::vector<double>& class_weights() const { return weights_; }

  /// Weights section followed by "DNETOPT1", the config fingerprint, step and
  /// epoch counters, Adam moments and the loss history.
  void write_checkpoint(std::ostream& out) const;
  void read_checkpoint(std::istream& in);
  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  std::pair<Tensor, OneHotTarget> assemble(std::span<const std::size_t> batch) const;
  std::string batch_diagnostic(std::span<const std::size_t> batch, const LossTerms& terms) const;

  DefectNet& model_;
  TrainConfig config_;
  std::vector<Patch> patches_;
  std::vector<double> weights_;
  AdamState adam_;
  std::uint64_t epoch_ = 0;
  std::vector<StepRecord> history_;
  StepHook hook_;
  std::function<void(std::uint64_t)> on_epoch_;
};

}  // namespace dnet
