#include "dnet/experiment.hpp"

#include <algorithm>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "dnet/image_io.hpp"
#include "dnet/nn_ops.hpp"
#include "json.hpp"

namespace dnet {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string scene_name(std::size_t index) {
  std::ostringstream ss;
  ss << "scene_" << std::setw(4) << std::setfill('0') << index;
  return ss.str();
}

// Runs job(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            job(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = n;
          }
        }
      });
  }
  if (failure) std::rethrow_exception(failure);
}

json spec_to_json(const SceneSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"num_classes", s.num_classes},
          {"ratios", s.ratios},
          {"blob_radius", s.blob_radius},
          {"noise_sigma", s.noise_sigma},
          {"defect_contrast", s.defect_contrast},
          {"seed", s.seed},
          {"max_placement_attempts", s.max_placement_attempts}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.ratios = j.at("ratios").get<std::vector<double>>();
  s.blob_radius = j.at("blob_radius").get<std::vector<std::pair<double, double>>>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.defect_contrast = j.at("defect_contrast").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.max_placement_attempts = j.at("max_placement_attempts").get<std::size_t>();
  return s;
}

json optional_array(const std::vector<std::optional<double>>& v) {
  json arr = json::array();
  for (const auto& x : v) arr.push_back(x ? json(*x) : json(nullptr));
  return arr;
}

}  // namespace

void configure_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("DNET_THREADS"); env && *env) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end == '\0' && n >= 1) return static_cast<std::size_t>(n);
    throw std::invalid_argument("DNET_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Corpus generate_corpus_in_memory(const SceneSpec& spec, std::size_t count) {
  Corpus c;
  c.spec = spec;
  for (std::size_t i = 0; i < count; ++i) {
    auto scene = generate(spec, i);
    c.names.push_back(scene_name(i));
    c.images.push_back(std::move(scene.image));
    c.labels.push_back(std::move(scene.labels));
  }
  return c;
}

void write_corpus(const std::string& dir, const Corpus& corpus, const RunConfig& config) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["scene_spec"] = spec_to_json(corpus.spec);
  manifest["scenes"] = corpus.size();
  ordered_json files = ordered_json::array();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::string image = corpus.names[i] + ".png", labels = corpus.names[i] + "_labels.png";
    write_rgb_png((fs::path(dir) / image).string(), corpus.images[i]);
    write_label_png((fs::path(dir) / labels).string(), corpus.labels[i]);
    files.push_back({{"name", corpus.names[i]}, {"image", image}, {"labels", labels}});
  }
  manifest["files"] = files;
  const auto stats = dataset_stats(corpus.labels, corpus.spec.num_classes);
  manifest["class_pixel_counts"] = stats.counts;
  {
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << manifest.dump(2) << "\n";
  }
  // Patch origins of the training split, one JSON object per line.
  const auto split = split_corpus(corpus.size(), config.data.test_fraction);
  TrainingPatchOptions opts{config.pipeline.patch_size, config.pipeline.train_stride,
                            config.pipeline.min_distinct_classes};
  std::ofstream out(fs::path(dir) / "patches.jsonl");
  for (auto i : split.train)
    for (const auto& o : training_patch_origins(corpus.labels[i], opts))
      out << ordered_json{{"source", corpus.names[i] + ".png"}, {"row", o.row}, {"col", o.col},
                          {"size", opts.patch_size}}
                 .dump()
          << "\n";
  if (!out) throw std::runtime_error("cannot write corpus files in " + dir);
}

Corpus load_corpus(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest.json: " + std::string(e.what()));
  }
  Corpus c;
  c.spec = spec_from_json(manifest.at("scene_spec"));
  for (const auto& f : manifest.at("files")) {
    c.names.push_back(f.at("name").get<std::string>());
    c.images.push_back(read_rgb_png((fs::path(dir) / f.at("image").get<std::string>()).string()));
    c.labels.push_back(read_label_png((fs::path(dir) / f.at("labels").get<std::string>()).string()));
    if (c.images.back().dim(1) != c.labels.back().height || c.images.back().dim(2) != c.labels.back().width)
      throw std::runtime_error("image and label sizes differ for " + c.names.back());
  }
  if (c.images.empty()) throw std::runtime_error("corpus in " + dir + " is empty");
  return c;
}

Split split_corpus(std::size_t count, double test_fraction) {
  const auto test = static_cast<std::size_t>(std::lround(static_cast<double>(count) * test_fraction));
  Split s;
  for (std::size_t i = 0; i < count; ++i) (i + test < count ? s.train : s.test).push_back(i);
  return s;
}

std::vector<Patch> collect_training_patches(const Corpus& corpus, const std::vector<std::size_t>& scenes,
                                            const PipelineConfig& pipeline) {
  TrainingPatchOptions opts{pipeline.patch_size, pipeline.train_stride, pipeline.min_distinct_classes};
  std::vector<Patch> out;
  for (auto i : scenes) {
    auto patches = extract_training_patches(corpus.images.at(i), corpus.labels.at(i), opts, corpus.names.at(i));
    std::move(patches.begin(), patches.end(), std::back_inserter(out));
  }
  return out;
}

ClassStats corpus_stats(const Corpus& corpus, const std::vector<std::size_t>& scenes, WeightBasis basis) {
  std::vector<LabelMap> maps;
  for (auto i : scenes) maps.push_back(corpus.labels.at(i));
  return dataset_stats(maps, corpus.spec.num_classes, basis);
}

std::pair<Tensor, LabelMap> predict_tiled(const DefectNet& model, const Tensor& image, const PipelineConfig& pipeline,
                                          std::size_t threads) {
  const auto origins = tile_origins(image.dim(1), image.dim(2), pipeline.patch_size, pipeline.tile_overlap);
  std::vector<TileProbs> tiles(origins.size());
  parallel_for(origins.size(), threads, [&](std::size_t i) {
    NoGradGuard guard;
    const Tensor logits = model.forward(crop_image(image, origins[i], pipeline.patch_size));
    tiles[i] = {origins[i], softmax_channels(logits)};
  });
  return merge_tiles(model.config().num_classes, image.dim(1), image.dim(2), std::move(tiles));
}

ConfusionMatrix evaluate(const DefectNet& model, const Corpus& corpus, const std::vector<std::size_t>& scenes,
                         const PipelineConfig& pipeline, std::size_t threads) {
  ConfusionMatrix cm(model.config().num_classes);
  for (auto i : scenes) cm.accumulate(predict_tiled(model, corpus.images.at(i), pipeline, threads).second,
                                      corpus.labels.at(i));
  return cm;
}

RunResult train_and_evaluate(const RunConfig& config, const Corpus& corpus, LossKind loss, std::uint64_t seed,
                             std::size_t threads) {
  const auto split = split_corpus(corpus.size(), config.data.test_fraction);
  if (split.train.empty() || split.test.empty()) throw std::invalid_argument("corpus too small to split");
  TrainConfig tc = config.train;
  tc.loss = loss;
  tc.seed = seed;
  DefectNet model(config.model, seed);
  const auto stats = corpus_stats(corpus, split.train, tc.class_weight_basis);
  Trainer trainer(model, tc, collect_training_patches(corpus, split.train, config.pipeline), stats.weights);
  trainer.train();

  RunResult r;
  r.loss = loss;
  r.seed = seed;
  r.history = trainer.history();
  r.confusion = evaluate(model, corpus, split.test, config.pipeline, threads);
  r.recall = per_class_accuracy(r.confusion);
  const auto defects = config.defect_classes();
  try {
    r.defect_average = average_defect_accuracy(r.confusion, defects);
  } catch (const std::runtime_error&) {
    r.defect_average.reset();
  }
  return r;
}

std::optional<double> median(std::vector<std::optional<double>> values) {
  std::vector<double> v;
  for (const auto& x : values)
    if (x) v.push_back(*x);
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

AblationResult run_ablation(const RunConfig& config, const Corpus& corpus, std::size_t threads,
                            const std::function<void(const RunResult&)>& on_run) {
  config.validate();
  const auto& losses = config.ablate.losses;
  const auto& seeds = config.ablate.seeds;
  AblationResult result;
  result.runs.resize(losses.size() * seeds.size());
  std::mutex report_mutex;
  // Runs are independent, so they are spread over the workers; each run keeps
  // tile inference single-threaded.
  parallel_for(result.runs.size(), threads, [&](std::size_t i) {
    result.runs[i] = train_and_evaluate(config, corpus, losses[i / seeds.size()], seeds[i % seeds.size()], 1);
    if (on_run) {
      std::lock_guard lock(report_mutex);
      on_run(result.runs[i]);
    }
  });
  const std::size_t k = config.model.num_classes;
  for (std::size_t li = 0; li < losses.size(); ++li) {
    AblationRow row{losses[li], std::vector<std::optional<double>>(k), std::nullopt};
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::optional<double>> xs;
      for (std::size_t si = 0; si < seeds.size(); ++si) xs.push_back(result.runs[li * seeds.size() + si].recall[c]);
      row.class_recall[c] = median(xs);
    }
    std::vector<std::optional<double>> avg;
    for (std::size_t si = 0; si < seeds.size(); ++si) avg.push_back(result.runs[li * seeds.size() + si].defect_average);
    row.defect_average = median(avg);
    result.rows.push_back(std::move(row));
  }
  return result;
}

std::string ablation_json(const AblationResult& result, const RunConfig& config) {
  ordered_json j;
  std::vector<std::string> columns;
  for (std::size_t c = 0; c < config.model.num_classes; ++c) columns.push_back("class" + std::to_string(c));
  columns.push_back("defect_average");
  j["columns"] = columns;
  j["seeds"] = config.ablate.seeds;
  j["defect_classes"] = config.defect_classes();
  ordered_json rows = ordered_json::array();
  for (const auto& r : result.rows) {
    auto values = r.class_recall;
    values.push_back(r.defect_average);
    rows.push_back({{"loss", to_string(r.loss)}, {"recall", optional_array(values)}});
  }
  j["rows"] = rows;
  ordered_json runs = ordered_json::array();
  for (const auto& r : result.runs)
    runs.push_back({{"loss", to_string(r.loss)},
                    {"seed", r.seed},
                    {"recall", optional_array(r.recall)},
                    {"defect_average", r.defect_average ? json(*r.defect_average) : json(nullptr)},
                    {"final_loss", r.history.empty() ? json(nullptr) : json(r.history.back().loss)}});
  j["runs"] = runs;
  return j.dump(2);
}

std::string ablation_csv(const AblationResult& result, const RunConfig& config) {
  std::ostringstream out;
  out << "loss";
  for (std::size_t c = 0; c < config.model.num_classes; ++c) out << ",class" << c;
  out << ",defect_average\n";
  out << std::setprecision(17);
  auto cell = [&](const std::optional<double>& v) {
    out << ',';
    if (v) out << *v;
  };
  for (const auto& r : result.rows) {
    out << to_string(r.loss);
    for (const auto& v : r.class_recall) cell(v);
    cell(r.defect_average);
    out << "\n";
  }
  return out.str();
}

std::string history_jsonl(const std::vector<StepRecord>& history, LossKind kind) {
  std::string out;
  for (const auto& r : history) out += to_json_line(r, kind) + "\n";
  return out;
}

}  // namespace dnet
