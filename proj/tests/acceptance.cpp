// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dnet/experiment.hpp"
#include "dnet/losses.hpp"
#include "dnet/nn_ops.hpp"
#include "dnet/ops.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace dnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor weighted_sum(const Tensor& x, const Tensor& r) { return reduce(ReduceKind::Sum, mul(x, r)); }

std::vector<std::uint8_t> random_labels(std::mt19937_64& rng, std::size_t m, std::size_t k) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(k) - 1);
  std::vector<std::uint8_t> out(m);
  for (auto& v : out) v = static_cast<std::uint8_t>(d(rng));
  return out;
}

// Random values kept at least `gap` away from zero, so kinks at 0 stay
// outside the finite-difference stencil.
std::vector<double> away_from_zero(std::mt19937_64& rng, std::size_t n, double gap) {
  auto v = oracle::uniform(rng, n);
  for (auto& x : v)
    if (std::abs(x) < gap) x = x < 0 ? x - gap : x + gap;
  return v;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> ch(1, 4), side(1, 24);
  const std::size_t dilations[] = {1, 2, 4, 8, 16};
  double worst = 0.0;
  for (std::size_t i = 0; i < 200; ++i) {
    const std::size_t l = dilations[i % 5];
    const std::size_t c = ch(rng), o = ch(rng), h = side(rng), w = side(rng);
    auto x = oracle::uniform(rng, c * h * w), k = oracle::uniform(rng, o * c * 9), b = oracle::uniform(rng, o);
    auto got = conv2d(Tensor::from({c, h, w}, x), Tensor::from({o, c, 3, 3}, k), Tensor::from({o}, b), l);
    auto want = oracle::dilated_conv(x, c, h, w, k, b, o, l);
    for (std::size_t j = 0; j < want.size(); ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
  }
  const double s = seconds_since(t0);
  return {worst <= 1e-10 && s < 10.0,
          "200 instances, max abs err " + fmt("%.3g", worst) + ", " + fmt("%.2f", s) + " s"};
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  double worst = 0.0;
  std::vector<std::string> failed;
  auto record = [&](const std::string& name, const oracle::GradCheck& r) {
    worst = std::max(worst, r.max_rel_error);
    if (!(r.max_rel_error < 1e-4) || r.checked == 0) failed.push_back(name);
  };

  for (std::size_t l : {1, 2, 4, 8, 16}) {
    const std::size_t c = 2, o = 2, side = 2 * l + 3;
    auto r = Tensor::from({o, side, side}, oracle::uniform(rng, o * side * side));
    record("conv2d l=" + std::to_string(l),
           oracle::check_gradients([&](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], in[2], l), r); },
                                   {Tensor::from({c, side, side}, oracle::uniform(rng, c * side * side)),
                                    Tensor::from({o, c, 3, 3}, oracle::uniform(rng, o * c * 9)),
                                    Tensor::from({o}, oracle::uniform(rng, o))}));
  }
  {
    auto r = Tensor::from({2, 5, 5}, oracle::uniform(rng, 50));
    record("leaky_relu",
           oracle::check_gradients([&](const std::vector<Tensor>& in) { return weighted_sum(leaky_relu(in[0]), r); },
                                   {Tensor::from({2, 5, 5}, away_from_zero(rng, 50, 1e-3))}));
  }
  {
    auto r = Tensor::from({2, 3, 3}, oracle::uniform(rng, 18));
    record("max_pool2",
           oracle::check_gradients([&](const std::vector<Tensor>& in) { return weighted_sum(max_pool2(in[0]), r); },
                                   {Tensor::from({2, 6, 6}, oracle::uniform(rng, 72))}));
  }
  for (std::size_t f : {2, 4}) {
    auto r = Tensor::from({2, 3 * f, 3 * f}, oracle::uniform(rng, 18 * f * f));
    auto w = bilinear_upsample_weights(2, f);
    record("upsample x" + std::to_string(f),
           oracle::check_gradients(
               [&](const std::vector<Tensor>& in) { return weighted_sum(upsample(in[0], in[1], f), r); },
               {Tensor::from({2, 3, 3}, oracle::uniform(rng, 18)),
                Tensor::from(w.shape(), std::vector<double>(w.data().begin(), w.data().end()))}));
  }
  {
    auto r = Tensor::from({4, 3, 3}, oracle::uniform(rng, 36));
    record("softmax_channels",
           oracle::check_gradients([&](const std::vector<Tensor>& in) { return weighted_sum(softmax_channels(in[0]), r); },
                                   {Tensor::from({4, 3, 3}, oracle::uniform(rng, 36))}));
  }

  const std::size_t k = 4, m = 12;
  std::vector<std::uint8_t> labels{0, 0, 1, 2, 0, 1, 1, 0, 2, 0, 1, 0};  // class 3 absent: gamma = 3/4
  OneHotTarget target(labels, k);
  auto logits = Tensor::from({k, m}, oracle::uniform(rng, k * m));
  const std::vector<double> base{0.3, 0.7, 1.5, 2.5};
  record("L_wce", oracle::check_gradients(
                      [&](const std::vector<Tensor>& in) { return weighted_cross_entropy(softmax_channels(in[0]), target, base); },
                      {logits}));
  record("L_gdice", oracle::check_gradients(
                        [&](const std::vector<Tensor>& in) { return generalized_dice(softmax_channels(in[0]), target, base); },
                        {logits}));
  // Scaling the weights moves L_wce across the clamp threshold.
  bool saw_above = false, saw_below = false;
  for (double scale : {0.05, 20.0}) {
    std::vector<double> w(base);
    for (auto& v : w) v *= scale;
    const double wce = weighted_cross_entropy_logits(logits, target, w).item();
    (wce > 1.0 ? saw_above : saw_below) = true;
    record(std::string("L_hybrid ") + (wce > 1.0 ? "wce>1" : "wce<1"),
           oracle::check_gradients([&](const std::vector<Tensor>& in) { return hybrid_loss(in[0], target, w).loss; },
                                   {logits}));
  }
  if (!(saw_above && saw_below)) failed.push_back("clamp regimes");

  const double s = seconds_since(t0);
  std::string detail = "max rel err " + fmt("%.3g", worst) + ", " + fmt("%.2f", s) + " s";
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty() && s < 60.0, detail};
}

Outcome criterion3() {
  std::mt19937_64 rng(303);
  const std::size_t k = 4, m = 64;
  auto labels = random_labels(rng, m, k);
  std::vector<double> perfect(k * m, 0.0), disjoint(k * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    perfect[labels[i] * m + i] = 1.0;
    disjoint[((labels[i] + 1) % k) * m + i] = 1.0;
  }
  OneHotTarget t(labels, k);
  const std::vector<double> w{0.1, 0.4, 2.0, 7.0};
  const double g0 = generalized_dice(Tensor::from({k, m}, perfect), t, w).item();
  const double g1 = generalized_dice(Tensor::from({k, m}, disjoint), t, w).item();

  // All classes present: the hybrid reduces to the dice term.
  std::vector<std::uint8_t> all{0, 1, 2, 3};
  auto extra = random_labels(rng, 60, k);
  all.insert(all.end(), extra.begin(), extra.end());
  OneHotTarget ta(all, k);
  auto logits = Tensor::from({k, all.size()}, oracle::uniform(rng, k * all.size()));
  const double hyb = hybrid_loss(logits, ta, w).loss.item();
  const double gd = generalized_dice(softmax_channels(logits), ta, w).item();

  std::size_t gamma_mismatch = 0;
  std::uniform_int_distribution<std::size_t> kd(2, 9), md(1, 200);
  for (std::size_t i = 0; i < 100; ++i) {
    const std::size_t kk = kd(rng);
    // Draw from a random subset of classes so presence varies.
    std::vector<std::uint8_t> pool;
    for (std::size_t c = 0; c < kk; ++c)
      if (rng() % 2) pool.push_back(static_cast<std::uint8_t>(c));
    if (pool.empty()) pool.push_back(0);
    std::vector<std::uint8_t> mask(md(rng));
    for (auto& v : mask) v = pool[rng() % pool.size()];
    if (presence_ratio(OneHotTarget(mask, kk)) != oracle::presence(mask, kk)) ++gamma_mismatch;
  }
  const bool pass = std::abs(g0) <= 1e-6 && std::abs(g1 - 1.0) <= 1e-6 && hyb == gd && gamma_mismatch == 0;
  return {pass, "gdice(perfect) " + fmt("%.3g", g0) + ", gdice(disjoint) " + fmt("%.9g", g1) + ", hybrid-gdice " +
                    fmt("%.3g", hyb - gd) + ", gamma mismatches " + std::to_string(gamma_mismatch) + "/100"};
}

Outcome criterion4() {
  auto wce = Tensor::scalar(0.3, true), gd = Tensor::scalar(0.4, true);
  auto h = hybrid_combine(wce, gd, 0.5);
  const double value = h.item();
  h.backward();
  const double g_low = wce.grad()[0];
  auto wce2 = Tensor::scalar(2.0, true), gd2 = Tensor::scalar(0.4, true);
  hybrid_combine(wce2, gd2, 0.5).backward();
  const double g_high = wce2.grad()[0];

  // Through the full loss on logits: with L_wce < 1 the gradient is exactly
  // gamma times the dice gradient; with L_wce > 1 it is not.
  std::mt19937_64 rng(404);
  const std::size_t k = 4, m = 16;
  std::vector<std::uint8_t> labels(m);
  for (std::size_t i = 0; i < m; ++i) labels[i] = static_cast<std::uint8_t>(i % 2);  // gamma = 0.5
  OneHotTarget t(labels, k);
  auto base = oracle::uniform(rng, k * m);
  auto grad_of = [&](const std::function<Tensor(const Tensor&)>& f) {
    auto x = Tensor::from({k, m}, base, true);
    f(x).backward();
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  bool gated = true, open = false;
  for (double scale : {0.05, 50.0}) {
    const std::vector<double> w{0.2 * scale, 0.3 * scale, 1.0 * scale, 2.0 * scale};
    const double wce_value = weighted_cross_entropy_logits(Tensor::from({k, m}, base), t, w).item();
    auto gh = grad_of([&](const Tensor& x) { return hybrid_loss(x, t, w).loss; });
    auto gg = grad_of([&](const Tensor& x) { return generalized_dice(softmax_channels(x), t, w); });
    double diff = 0.0;
    for (std::size_t i = 0; i < gh.size(); ++i) diff = std::max(diff, std::abs(gh[i] - 0.5 * gg[i]));
    if (wce_value < 1.0)
      gated = gated && diff <= 1e-15;
    else
      open = diff > 1e-6;
  }
  const bool pass = value == 0.7 && g_low == 0.0 && g_high != 0.0 && gated && open;
  return {pass, "hybrid " + fmt("%.17g", value) + ", dL/dwce at 0.3: " + fmt("%g", g_low) + ", at 2.0: " +
                    fmt("%g", g_high) + ", end-to-end gated " + (gated ? "yes" : "no") + ", open " +
                    (open ? "yes" : "no")};
}

Outcome criterion5() {
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<std::size_t> side(64, 512);
  const std::size_t patch = 64, overlap = 32, k = 4;
  std::size_t uncovered = 0, bad_sum = 0, order_dependent = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const std::size_t h = side(rng), w = side(rng);
    const auto origins = tile_origins(h, w, patch, overlap);
    std::vector<std::uint8_t> covered(h * w, 0);
    std::vector<TileProbs> tiles;
    for (const auto& o : origins) {
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) covered[(o.row + y) * w + o.col + x] = 1;
      auto logits = Tensor::from({k, patch, patch}, oracle::uniform(rng, k * patch * patch, -4, 4));
      tiles.push_back({o, softmax_channels(logits)});
    }
    uncovered += static_cast<std::size_t>(std::count(covered.begin(), covered.end(), 0));
    auto [probs, labels] = merge_tiles(k, h, w, tiles);
    for (std::size_t p = 0; p < h * w; ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += probs[c * h * w + p];
      if (std::abs(s - 1.0) > 1e-12) ++bad_sum;
    }
    std::shuffle(tiles.begin(), tiles.end(), rng);
    auto [again, again_labels] = merge_tiles(k, h, w, tiles);
    if (!std::equal(probs.data().begin(), probs.data().end(), again.data().begin()) || !(labels == again_labels))
      ++order_dependent;
  }

  const auto cfg = RunConfig::desk();
  const auto corpus = generate_corpus_in_memory(cfg.data.scene, cfg.data.scenes);
  const auto split = split_corpus(corpus.size(), cfg.data.test_fraction);
  const auto patches = collect_training_patches(corpus, split.train, cfg.pipeline);
  std::size_t thin = 0;
  for (const auto& p : patches)
    if (p.labels.distinct_classes() < 3) ++thin;

  const bool pass = uncovered == 0 && bad_sum == 0 && order_dependent == 0 && thin == 0 && !patches.empty();
  return {pass, "50 sizes: uncovered " + std::to_string(uncovered) + ", off-simplex " + std::to_string(bad_sum) +
                    ", order-dependent " + std::to_string(order_dependent) + "; " + std::to_string(patches.size()) +
                    " training patches, " + std::to_string(thin) + " with < 3 classes"};
}

// Elements of every parameter whose gradient stayed exactly zero through
// 20 training steps on patches that contain no minority class.
std::size_t dead_parameters(double alpha) {
  auto cfg = RunConfig::desk();
  SceneSpec majority = cfg.data.scene;
  majority.num_classes = 2;
  majority.ratios = {majority.ratios[0], majority.ratios[1]};
  majority.blob_radius.clear();
  const auto corpus = generate_corpus_in_memory(majority, 20);
  // Whole 96x96 scenes as patches, so every dilated tap reaches inside the
  // branch feature map.
  std::vector<Patch> patches;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    patches.push_back({corpus.images[i], corpus.labels[i], {0, 0}, corpus.names[i]});

  cfg.model.leaky_alpha = alpha;
  DefectNet model(cfg.model, 6);
  TrainConfig tc = cfg.train;
  tc.loss = LossKind::Hybrid;
  tc.seed = 6;
  tc.learning_rate = 1e-3;
  // Weights of the full four-class profile: the absent classes keep theirs.
  const std::vector<std::uint64_t> counts{1000, 300, 10, 1};
  Trainer trainer(model, tc, patches, class_weights(counts, tc.class_weight_basis).weights);

  std::vector<std::vector<bool>> moved;
  for (const auto& p : model.parameters()) moved.emplace_back(p.value.numel(), false);
  trainer.set_step_hook([&](const StepRecord&, const std::vector<Parameter>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].value.has_grad()) continue;
      const auto g = params[i].value.grad();
      for (std::size_t j = 0; j < g.size(); ++j)
        if (g[j] != 0.0) moved[i][j] = true;
    }
  });
  const auto order = trainer.epoch_order(0);
  for (std::size_t s = 0; s < 20; ++s) {
    std::vector<std::size_t> batch;
    for (std::size_t b = 0; b < tc.batch_size; ++b) batch.push_back(order[(s * tc.batch_size + b) % order.size()]);
    trainer.step(batch);
  }
  std::size_t dead = 0;
  for (const auto& m : moved) dead += static_cast<std::size_t>(std::count(m.begin(), m.end(), false));
  return dead;
}

Outcome criterion6() {
  const auto t0 = Clock::now();
  const std::size_t leaky = dead_parameters(0.1);
  const std::size_t relu = dead_parameters(0.0);
  const double s = seconds_since(t0);
  return {leaky == 0 && relu > 0 && s < 120.0, "dead parameter elements: leaky " + std::to_string(leaky) + ", relu " +
                                                    std::to_string(relu) + ", " + fmt("%.1f", s) + " s"};
}

int run_cli(const std::string& args, const std::string& env) {
  const std::string cmd = env + " '" + std::string(DNET_CLI_PATH) + "' " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct AblationRuns {
  fs::path first, second;
  int first_code = -1, second_code = -1;
  double first_seconds = 0.0;
};

AblationRuns run_ablations() {
  AblationRuns r;
  const auto root = fs::temp_directory_path() / "dnet_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  r.first = root / "ablate_a";
  r.second = root / "ablate_b";
  const auto t0 = Clock::now();
  r.first_code = run_cli("ablate --profile desk --out '" + r.first.string() + "'", "DNET_THREADS=1");
  r.first_seconds = seconds_since(t0);
  r.second_code = run_cli("ablate --profile desk --out '" + r.second.string() + "'", "DNET_THREADS=2");
  return r;
}

Outcome criterion7(const AblationRuns& runs) {
  if (runs.first_code != 0) return {false, "ablate exited with " + std::to_string(runs.first_code)};
  const auto j = nlohmann::json::parse(slurp(runs.first / "ablation.json"));
  std::map<std::string, double> avg;
  for (const auto& row : j["rows"]) {
    const auto& v = row["recall"].back();
    avg[row["loss"].get<std::string>()] = v.is_null() ? std::nan("") : v.get<double>();
  }
  const double ce = avg["ce"], wce = avg["wce"], gd = avg["gdice"], hy = avg["hybrid"];
  const bool pass = hy > wce && wce > ce && hy > gd && hy - ce >= 0.10 && runs.first_seconds < 1800.0;
  return {pass, "median defect-average recall: hybrid " + fmt("%.4f", hy) + ", wce " + fmt("%.4f", wce) + ", ce " +
                    fmt("%.4f", ce) + ", gdice " + fmt("%.4f", gd) + "; " + fmt("%.0f", runs.first_seconds) + " s"};
}

Outcome criterion8(const AblationRuns& runs) {
  if (runs.first_code != 0 || runs.second_code != 0) return {false, "ablate run failed"};
  std::size_t compared = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(runs.first)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name != "history.jsonl" && name != "metrics.json" && name != "ablation.json" && name != "ablation.csv")
      continue;
    const auto other = runs.second / fs::relative(e.path(), runs.first);
    ++compared;
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ++differing;
  }
  return {compared > 0 && differing == 0, std::to_string(compared) + " files compared (1 vs 2 worker threads), " +
                                              std::to_string(differing) + " differ"};
}

Outcome criterion9() {
  auto single = [](std::size_t l) {
    ModelConfig c = ModelConfig::desk();
    c.dilation_schedule = {l};
    return receptive_field(c).path_b.front().local_pixels;
  };
  ModelConfig c = ModelConfig::desk();
  c.dilation_schedule = {2, 4, 8, 16, 16, 8, 4, 2};
  const auto rf = receptive_field(c);
  // Each dilated 3x3 layer widens the field by 2*l: 1 + 2*(2+4+8+16+16+8+4+2).
  std::size_t want = 1;
  for (auto l : c.dilation_schedule) want += 2 * l;
  const std::size_t got = rf.path_b.back().local_pixels;
  const bool pass = single(1) == 3 && single(2) == 5 && got == 121 && want == 121;
  return {pass, "l=1: " + std::to_string(single(1)) + ", l=2: " + std::to_string(single(2)) + ", schedule: " +
                    std::to_string(got)};
}

}  // namespace

int main() {
  configure_allocator();
  int failures = 0;
  auto report = [&](int id, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %d: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  };
  report(1, criterion1);
  report(2, criterion2);
  report(3, criterion3);
  report(4, criterion4);
  report(5, criterion5);
  report(6, criterion6);
  AblationRuns runs;
  if (std::getenv("DNET_ACCEPTANCE_SKIP_ABLATION") == nullptr) runs = run_ablations();
  report(7, [&] { return criterion7(runs); });
  report(8, [&] { return criterion8(runs); });
  report(9, criterion9);
  return failures == 0 ? 0 : 1;
}
