#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dnet/metrics.hpp"
#include "dnet/model.hpp"
#include "dnet/patches.hpp"
#include "dnet/run_config.hpp"
#include "dnet/synthetic.hpp"
#include "dnet/trainer.hpp"

namespace dnet {

/// Keeps large tensor buffers on the heap instead of fresh zeroed mappings
/// for every allocation (glibc only; no-op elsewhere).
void configure_allocator();

/// Worker count from DNET_THREADS (default: hardware concurrency, at least 1).
std::size_t worker_threads();

/// Scenes held in memory with the file stems they are stored under.
struct Corpus {
  SceneSpec spec;
  std::vector<std::string> names;
  std::vector<Tensor> images;
  std::vector<LabelMap> labels;

  std::size_t size() const { return images.size(); }
};

Corpus generate_corpus_in_memory(const SceneSpec& spec, std::size_t count);

/// Writes `<name>.png`, `<name>_labels.png`, manifest.json (spec plus file
/// list) and patches.jsonl (training patch origins of the train split).
void write_corpus(const std::string& dir, const Corpus& corpus, const RunConfig& config);
Corpus load_corpus(const std::string& dir);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// The last round(n * test_fraction) scenes form the test split.
Split split_corpus(std::size_t count, double test_fraction);

std::vector<Patch> collect_training_patches(const Corpus& corpus, const std::vector<std::size_t>& scenes,
                                            const PipelineConfig& pipeline);
ClassStats corpus_stats(const Corpus& corpus, const std::vector<std::size_t>& scenes,
                        WeightBasis basis = WeightBasis::Count);

/// Softmax probabilities of every tile, merged with equal weights.
/// Tiles are evaluated on up to `threads` workers; the merge order is fixed.
std::pair<Tensor, LabelMap> predict_tiled(const DefectNet& model, const Tensor& image, const PipelineConfig& pipeline,
                                          std::size_t threads = 1);

ConfusionMatrix evaluate(const DefectNet& model, const Corpus& corpus, const std::vector<std::size_t>& scenes,
                         const PipelineConfig& pipeline, std::size_t threads = 1);

struct RunResult {
  LossKind loss = LossKind::Hybrid;
  std::uint64_t seed = 0;
  std::vector<StepRecord> history;
  ConfusionMatrix confusion{1};
  std::vector<std::optional<double>> recall;
  std::optional<double> defect_average;
};

/// Trains one model from scratch with `loss` and `seed` on the train split
/// and evaluates it on the test split.
RunResult train_and_evaluate(const RunConfig& config, const Corpus& corpus, LossKind loss, std::uint64_t seed,
                             std::size_t threads = 1);

struct AblationRow {
  LossKind loss;
  /// Median over seeds of each class recall, then of the defect average.
  std::vector<std::optional<double>> class_recall;
  std::optional<double> defect_average;
};

struct AblationResult {
  std::vector<RunResult> runs;  // loss-major, seed-minor
  std::vector<AblationRow> rows;
};

/// Every (loss, seed) pair of the config, run on up to `threads` workers.
/// `on_run` is called after each run finishes.
AblationResult run_ablation(const RunConfig& config, const Corpus& corpus, std::size_t threads = 1,
                            const std::function<void(const RunResult&)>& on_run = {});

std::optional<double> median(std::vector<std::optional<double>> values);

std::string ablation_json(const AblationResult& result, const RunConfig& config);
std::string ablation_csv(const AblationResult& result, const RunConfig& config);
std::string history_jsonl(const std::vector<StepRecord>& history, LossKind kind);

}  // namespace dnet
