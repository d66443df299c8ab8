// dnet: synthetic data generation, training, tiled prediction, evaluation and
// the loss ablation.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dnet/experiment.hpp"
#include "dnet/image_io.hpp"
#include "dnet/metrics.hpp"
#include "dnet/run_config.hpp"
#include "dnet/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2 };

struct CommonArgs {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
};

void report_error(const std::string& kind, const std::string& message, const ordered_json& extra = {}) {
  ordered_json j{{"error", kind}, {"message", message}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) j[k] = v;
  std::cerr << j.dump() << std::endl;
}

void log_event(const ordered_json& j) { std::cerr << j.dump() << std::endl; }

dnet::RunConfig resolve_config(const CommonArgs& a) {
  const std::string profile = a.profile.empty() ? "desk" : a.profile;
  dnet::RunConfig c;
  if (a.config.empty()) {
    c = dnet::RunConfig::preset(profile);
  } else {
    c = dnet::load_run_config(a.config, profile);
    if (!a.profile.empty() && c.profile != a.profile)
      throw dnet::ConfigError("--profile " + a.profile + " conflicts with profile '" + c.profile + "' in " + a.config);
  }
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// An output directory must be absent or empty unless --force is given.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw dnet::ConfigError("output path exists and is not a directory: " + dir.string());
    if (!fs::is_empty(dir) && !force)
      throw dnet::ConfigError("output directory " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--profile", a.profile, "Preset profile")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", a.seed, "Seed override");
}

std::string stem_of(const std::string& path) {
  auto stem = fs::path(path).stem().string();
  return stem;
}

}  // namespace

int main(int argc, char** argv) {
  dnet::configure_allocator();
  CLI::App app{"DefectNet kit: dilated two-path segmentation with class-imbalance losses"};
  app.require_subcommand(1);

  // gen-data
  CommonArgs gen_args;
  std::string gen_out;
  std::optional<std::size_t> gen_scenes;
  bool gen_force = false;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  add_common(gen, gen_args);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", gen_scenes, "Number of scenes");
  gen->add_flag("--force", gen_force, "Allow writing into a non-empty directory");

  // train
  CommonArgs train_args;
  std::string train_data, train_out, train_loss, train_resume;
  std::optional<std::size_t> train_epochs;
  bool train_force = false;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  add_common(train, train_args);
  train->add_option("--data", train_data, "Corpus directory (from gen-data)")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--loss", train_loss, "Loss")->check(CLI::IsMember({"ce", "wce", "gdice", "hybrid"}));
  train->add_option("--epochs", train_epochs, "Epoch count override");
  train->add_option("--resume", train_resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_flag("--force", train_force, "Allow writing into a non-empty directory");

  // predict
  CommonArgs pred_args;
  std::string pred_model, pred_image, pred_out;
  bool pred_force = false;
  auto* predict = app.add_subcommand("predict", "Tile, predict and merge one image");
  add_common(predict, pred_args);
  predict->add_option("--model", pred_model, "Weights file")->required()->check(CLI::ExistingFile);
  predict->add_option("--image", pred_image, "RGB PNG")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", pred_out, "Output directory")->required();
  predict->add_flag("--force", pred_force, "Overwrite existing outputs");

  // eval
  CommonArgs eval_args;
  std::vector<std::string> eval_pred, eval_truth;
  std::string eval_out;
  auto* eval = app.add_subcommand("eval", "Confusion-matrix metrics of predicted label maps");
  add_common(eval, eval_args);
  eval->add_option("--pred", eval_pred, "Predicted label PNG(s)")->required()->check(CLI::ExistingFile);
  eval->add_option("--truth", eval_truth, "Ground-truth label PNG(s), same order")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Metrics JSON path (default: stdout)");

  // ablate
  CommonArgs abl_args;
  std::string abl_data, abl_out;
  std::optional<std::size_t> abl_epochs;
  bool abl_force = false;
  auto* ablate = app.add_subcommand("ablate", "Train every loss under identical seeds and tabulate recall");
  add_common(ablate, abl_args);
  ablate->add_option("--data", abl_data, "Corpus directory (default: generate from the config)");
  ablate->add_option("--out", abl_out, "Output directory")->required();
  ablate->add_option("--epochs", abl_epochs, "Epoch count override");
  ablate->add_flag("--force", abl_force, "Allow writing into a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("validation", e.what());
    return kValidation;
  }

  try {
    if (*gen) {
      auto cfg = resolve_config(gen_args);
      if (gen_scenes) cfg.data.scenes = *gen_scenes;
      if (gen_args.seed) cfg.data.scene.seed = *gen_args.seed;
      cfg.validate();
      prepare_out_dir(gen_out, gen_force);
      const auto corpus = dnet::generate_corpus_in_memory(cfg.data.scene, cfg.data.scenes);
      dnet::write_corpus(gen_out, corpus, cfg);
      write_text(fs::path(gen_out) / "config.json", dnet::to_json(cfg) + "\n");
      log_event({{"event", "gen-data"}, {"scenes", corpus.size()}, {"out", gen_out}});
    } else if (*train) {
      auto cfg = resolve_config(train_args);
      if (!train_loss.empty()) cfg.train.loss = dnet::parse_loss_kind(train_loss);
      if (train_args.seed) cfg.train.seed = *train_args.seed;
      if (train_epochs) cfg.train.epochs = *train_epochs;
      cfg.validate();
      prepare_out_dir(train_out, train_force || !train_resume.empty());
      const auto corpus = dnet::load_corpus(train_data);
      if (corpus.spec.num_classes != cfg.model.num_classes)
        throw dnet::ConfigError("corpus has " + std::to_string(corpus.spec.num_classes) + " classes, config has " +
                                std::to_string(cfg.model.num_classes));
      const auto split = dnet::split_corpus(corpus.size(), cfg.data.test_fraction);
      dnet::DefectNet model(cfg.model, cfg.train.seed);
      const auto stats = dnet::corpus_stats(corpus, split.train, cfg.train.class_weight_basis);
      dnet::Trainer trainer(model, cfg.train, dnet::collect_training_patches(corpus, split.train, cfg.pipeline),
                            stats.weights);
      if (!train_resume.empty()) trainer.load_checkpoint(train_resume);
      const fs::path out(train_out);
      write_text(out / "config.json", dnet::to_json(cfg) + "\n");
      trainer.set_epoch_callback([&](std::uint64_t epoch) {
        trainer.save_checkpoint((out / "checkpoint.bin").string());
        write_text(out / "history.jsonl", dnet::history_jsonl(trainer.history(), cfg.train.loss));
        const auto& last = trainer.history().back();
        log_event({{"event", "epoch"}, {"epoch", epoch}, {"step", last.step}, {"loss", last.loss}});
      });
      try {
        trainer.train();
      } catch (const dnet::NonFiniteLossError& e) {
        write_text(out / "nonfinite_dump.json", e.diagnostic() + "\n");
        throw;
      }
      write_text(out / "history.jsonl", dnet::history_jsonl(trainer.history(), cfg.train.loss));
      dnet::save_weights((out / "model.dnetw").string(), model);
      log_event({{"event", "train"}, {"patches", trainer.patches().size()}, {"steps", trainer.history().size()},
                 {"out", train_out}});
    } else if (*predict) {
      auto cfg = resolve_config(pred_args);
      // A config.json saved beside the weights describes the architecture.
      if (pred_args.config.empty()) {
        const auto sibling = fs::path(pred_model).parent_path() / "config.json";
        if (fs::exists(sibling)) cfg = dnet::load_run_config(sibling.string(), cfg.profile);
      }
      cfg.validate();
      dnet::DefectNet model(cfg.model);
      dnet::load_weights(pred_model, model);
      const auto image = dnet::read_rgb_png(pred_image);
      fs::create_directories(pred_out);
      const auto stem = stem_of(pred_image);
      const fs::path labels_path = fs::path(pred_out) / (stem + "_pred.png");
      const fs::path probs_path = fs::path(pred_out) / (stem + "_probs.npy");
      if (!pred_force && (fs::exists(labels_path) || fs::exists(probs_path)))
        throw dnet::ConfigError("prediction outputs already exist in " + pred_out + " (use --force)");
      const auto t0 = std::chrono::steady_clock::now();
      auto [probs, labels] = dnet::predict_tiled(model, image, cfg.pipeline, dnet::worker_threads());
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      dnet::write_label_png(labels_path.string(), labels);
      dnet::write_npy(probs_path.string(), probs);
      log_event({{"event", "predict"}, {"labels", labels_path.string()}, {"probs", probs_path.string()},
                 {"milliseconds", ms}});
    } else if (*eval) {
      auto cfg = resolve_config(eval_args);
      cfg.validate();
      if (eval_pred.size() != eval_truth.size())
        throw dnet::ConfigError("--pred and --truth need the same number of files");
      dnet::ConfusionMatrix cm(cfg.model.num_classes);
      for (std::size_t i = 0; i < eval_pred.size(); ++i)
        cm.accumulate(dnet::read_label_png(eval_pred[i]), dnet::read_label_png(eval_truth[i]));
      const auto report = dnet::metrics_report_json(cm, cfg.defect_classes());
      if (eval_out.empty())
        std::cout << report << std::endl;
      else
        write_text(eval_out, report + "\n");
    } else if (*ablate) {
      auto cfg = resolve_config(abl_args);
      if (abl_epochs) cfg.train.epochs = *abl_epochs;
      // --seed N replaces the seed list with N, N+1, ... of the same length.
      if (abl_args.seed)
        for (std::size_t i = 0; i < cfg.ablate.seeds.size(); ++i) cfg.ablate.seeds[i] = *abl_args.seed + i;
      cfg.validate();
      prepare_out_dir(abl_out, abl_force);
      const auto corpus = abl_data.empty() ? dnet::generate_corpus_in_memory(cfg.data.scene, cfg.data.scenes)
                                           : dnet::load_corpus(abl_data);
      if (corpus.spec.num_classes != cfg.model.num_classes)
        throw dnet::ConfigError("corpus class count differs from the config");
      const fs::path out(abl_out);
      write_text(out / "config.json", dnet::to_json(cfg) + "\n");
      const auto t0 = std::chrono::steady_clock::now();
      const auto result = dnet::run_ablation(cfg, corpus, dnet::worker_threads(), [&](const dnet::RunResult& r) {
        const fs::path dir = out / "runs" / (dnet::to_string(r.loss) + "_seed" + std::to_string(r.seed));
        fs::create_directories(dir);
        write_text(dir / "history.jsonl", dnet::history_jsonl(r.history, r.loss));
        write_text(dir / "metrics.json", dnet::metrics_report_json(r.confusion, cfg.defect_classes()) + "\n");
        log_event({{"event", "run"},
                   {"loss", dnet::to_string(r.loss)},
                   {"seed", r.seed},
                   {"defect_average", r.defect_average ? ordered_json(*r.defect_average) : ordered_json(nullptr)}});
      });
      write_text(out / "ablation.json", dnet::ablation_json(result, cfg) + "\n");
      write_text(out / "ablation.csv", dnet::ablation_csv(result, cfg));
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log_event({{"event", "ablate"}, {"runs", result.runs.size()}, {"seconds", s}, {"out", abl_out}});
    }
  } catch (const std::invalid_argument& e) {
    report_error("validation", e.what());
    return kValidation;
  } catch (const dnet::NonFiniteLossError& e) {
    report_error("runtime", e.what(), {{"diagnostic", nlohmann::json::parse(e.diagnostic())}});
    return kRuntime;
  } catch (const std::exception& e) {
    report_error("runtime", e.what());
    return kRuntime;
  }
  return kOk;
}
