#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dnet/image_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "dnet_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Result {
  int code;
  std::string err;
};

Result run(const std::string& args, const std::string& env = "") {
  const auto err = root() / "stderr.txt";
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" + std::string(DNET_CLI_PATH) + "' " + args + " 2> '" +
                          err.string() + "' > /dev/null";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

// Small enough that a full gen-data/train/predict cycle takes seconds.
fs::path tiny_config() {
  const auto path = root() / "tiny.json";
  if (!fs::exists(path)) {
    std::ofstream(path) << R"({
      "data": {"scenes": 6, "height": 64, "width": 64, "ratios": [1000, 300, 30, 10]},
      "model": {"block_channels": [4, 6, 8, 8, 8], "dilated_channels": 6},
      "train": {"epochs": 1, "batch_size": 2, "learning_rate": 0.001},
      "pipeline": {"patch_size": 32, "train_stride": 16, "tile_overlap": 16},
      "ablate": {"seeds": [0]}
    })";
  }
  return path;
}

fs::path corpus_dir() {
  const auto dir = root() / "corpus";
  if (!fs::exists(dir / "manifest.json")) {
    auto r = run("gen-data --config '" + tiny_config().string() + "' --out '" + dir.string() + "'");
    EXPECT_EQ(r.code, 0) << r.err;
  }
  return dir;
}

std::string cfg_arg() { return " --config '" + tiny_config().string() + "'"; }

}  // namespace

TEST(Cli, GenDataWritesPairsAndManifest) {
  const auto dir = corpus_dir();
  std::size_t images = 0, labels = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.ends_with("_labels.png"))
      ++labels;
    else if (name.ends_with(".png"))
      ++images;
  }
  EXPECT_EQ(images, 6u);
  EXPECT_EQ(labels, 6u);
  auto manifest = json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["scenes"], 6);
  EXPECT_EQ(manifest["files"].size(), 6u);
  EXPECT_TRUE(manifest.contains("scene_spec"));
  EXPECT_TRUE(fs::exists(dir / "patches.jsonl"));
  auto first = json::parse(slurp(dir / "patches.jsonl").substr(0, slurp(dir / "patches.jsonl").find('\n')));
  EXPECT_TRUE(first.contains("row") && first.contains("col"));
  EXPECT_TRUE(first.contains("source"));
}

TEST(Cli, GenDataIsByteIdenticalForSameSeed) {
  const auto a = root() / "gen_a", b = root() / "gen_b";
  ASSERT_EQ(run("gen-data" + cfg_arg() + " --seed 5 --out '" + a.string() + "'").code, 0);
  ASSERT_EQ(run("gen-data" + cfg_arg() + " --seed 5 --out '" + b.string() + "'").code, 0);
  for (const auto& e : fs::directory_iterator(a))
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path().filename();
}

TEST(Cli, GenDataValidation) {
  auto r = run("gen-data" + cfg_arg() + " --scenes 0 --out '" + (root() / "zero").string() + "'");
  EXPECT_EQ(r.code, 1);
  auto j = json::parse(r.err.substr(0, r.err.find('\n')));
  EXPECT_EQ(j["error"], "validation");
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  auto busy = run("gen-data" + cfg_arg() + " --out '" + corpus_dir().string() + "'");
  EXPECT_EQ(busy.code, 1);
  EXPECT_EQ(run("gen-data" + cfg_arg() + " --force --out '" + corpus_dir().string() + "'").code, 0);
  EXPECT_EQ(run("gen-data --bogus").code, 1);
  EXPECT_EQ(run("train --data '" + corpus_dir().string() + "' --out x --loss focal").code, 1);
}

TEST(Cli, TrainWritesHistoryWithGamma) {
  const auto out = root() / "train_hybrid";
  auto r = run("train" + cfg_arg() + " --data '" + corpus_dir().string() + "' --out '" + out.string() +
               "' --loss hybrid");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "model.dnetw"));
  EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
  std::istringstream lines(slurp(out / "history.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    auto j = json::parse(line);
    EXPECT_TRUE(j.contains("gamma"));
    EXPECT_EQ(j["loss_kind"], "hybrid");
    ++n;
  }
  EXPECT_GT(n, 0u);
}

TEST(Cli, LossSelectionChangesHistory) {
  const auto ce = root() / "train_ce", wce = root() / "train_wce";
  ASSERT_EQ(run("train" + cfg_arg() + " --data '" + corpus_dir().string() + "' --out '" + ce.string() + "' --loss ce")
                .code,
            0);
  ASSERT_EQ(
      run("train" + cfg_arg() + " --data '" + corpus_dir().string() + "' --out '" + wce.string() + "' --loss wce").code,
      0);
  EXPECT_NE(slurp(ce / "history.jsonl"), slurp(wce / "history.jsonl"));
}

TEST(Cli, ResumeEqualsUninterrupted) {
  const auto full = root() / "resume_full", part = root() / "resume_part";
  const std::string data = " --data '" + corpus_dir().string() + "'";
  ASSERT_EQ(run("train" + cfg_arg() + data + " --epochs 3 --out '" + full.string() + "'").code, 0);
  ASSERT_EQ(run("train" + cfg_arg() + data + " --epochs 1 --out '" + part.string() + "'").code, 0);
  auto r = run("train" + cfg_arg() + data + " --epochs 3 --resume '" + (part / "checkpoint.bin").string() +
               "' --out '" + part.string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(full / "history.jsonl"), slurp(part / "history.jsonl"));
  EXPECT_EQ(slurp(full / "model.dnetw"), slurp(part / "model.dnetw"));
}

TEST(Cli, PredictAndEval) {
  const auto model_dir = root() / "train_pred";
  const auto pred = root() / "pred";
  ASSERT_EQ(run("train" + cfg_arg() + " --data '" + corpus_dir().string() + "' --out '" + model_dir.string() + "'")
                .code,
            0);
  const auto image = corpus_dir() / "scene_0005.png";
  auto r = run("predict --model '" + (model_dir / "model.dnetw").string() + "' --image '" + image.string() +
               "' --out '" + pred.string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  auto labels = dnet::read_label_png((pred / "scene_0005_pred.png").string());
  EXPECT_EQ(labels.height, 64u);
  for (auto v : labels.values) ASSERT_LT(v, 4);
  auto probs = dnet::read_npy((pred / "scene_0005_probs.npy").string());
  ASSERT_EQ(probs.shape(), (dnet::Shape{4, 64, 64}));
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += probs[c * 64 * 64 + i];
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
  // Refuses to overwrite without --force.
  EXPECT_EQ(run("predict --model '" + (model_dir / "model.dnetw").string() + "' --image '" + image.string() +
                "' --out '" + pred.string() + "'")
                .code,
            1);

  const auto truth = corpus_dir() / "scene_0005_labels.png";
  const auto metrics = root() / "metrics.json";
  auto e = run("eval" + cfg_arg() + " --pred '" + (pred / "scene_0005_pred.png").string() + "' --truth '" +
               truth.string() + "' --out '" + metrics.string() + "'");
  ASSERT_EQ(e.code, 0) << e.err;
  auto j = json::parse(slurp(metrics));
  EXPECT_EQ(j["total_pixels"], 64 * 64);
  EXPECT_EQ(j["recall"].size(), 4u);

  // Evaluating the truth against itself is perfect.
  auto self = run("eval" + cfg_arg() + " --pred '" + truth.string() + "' --truth '" + truth.string() + "' --out '" +
                  metrics.string() + "'");
  ASSERT_EQ(self.code, 0);
  auto js = json::parse(slurp(metrics));
  for (const auto& v : js["recall"])
    if (!v.is_null()) EXPECT_EQ(v.get<double>(), 1.0);
}

TEST(Cli, AblateTableShape) {
  const auto out = root() / "ablate";
  auto r = run("ablate" + cfg_arg() + " --data '" + corpus_dir().string() + "' --out '" + out.string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(slurp(out / "ablation.json"));
  ASSERT_EQ(j["rows"].size(), 4u);
  EXPECT_EQ(j["columns"].size(), 5u);
  for (const auto& row : j["rows"]) EXPECT_EQ(row["recall"].size(), 5u);
  const auto csv = slurp(out / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  for (auto loss : {"ce", "wce", "gdice", "hybrid"}) {
    EXPECT_TRUE(fs::exists(out / "runs" / (std::string(loss) + "_seed0") / "history.jsonl"));
    EXPECT_TRUE(fs::exists(out / "runs" / (std::string(loss) + "_seed0") / "metrics.json"));
  }
}

TEST(Cli, RuntimeFailureExitCode) {
  auto r = run("train" + cfg_arg() + " --data '" + (root() / "no_such_corpus").string() + "' --out '" +
               (root() / "t_missing").string() + "'");
  EXPECT_EQ(r.code, 2);
  auto j = json::parse(r.err.substr(0, r.err.find('\n')));
  EXPECT_EQ(j["error"], "runtime");
}
