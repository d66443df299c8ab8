#include "dnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace dnet {

namespace {

// Unit-ish RGB directions along which blob classes depart from the structure
// color; cycled (and flipped) for more than six blob classes.
constexpr std::array<std::array<double, 3>, 6> kDefectDirections{{
    {-0.45, -0.65, -0.9},
    {0.0, -0.9, -0.6},
    {-0.9, -0.2, 0.1},
    {-0.1, -0.2, -1.0},
    {-0.8, -0.8, -0.1},
    {-0.3, -1.0, 0.0},
}};

constexpr std::array<double, 3> kBackground{0.42, 0.58, 0.80};
constexpr std::array<double, 3> kStructure{0.80, 0.80, 0.78};

std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5ce9eu};
  return std::mt19937_64(seq);
}

// Corpus-level phase for the stratified blob counts of each class.
std::vector<double> blob_phases(const SceneSpec& spec) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0xb10bu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> phases(spec.num_classes, 0.0);
  for (auto& p : phases) p = u(rng);
  return phases;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

void SceneSpec::validate() const {
  if (num_classes < 2 || num_classes > 255) throw std::invalid_argument("scene: num_classes must be in [2,255]");
  if (height == 0 || width == 0) throw std::invalid_argument("scene: empty image size");
  if (ratios.size() != num_classes) throw std::invalid_argument("scene: need one frequency ratio per class");
  for (double r : ratios)
    if (!(r > 0.0)) throw std::invalid_argument("scene: frequency ratios must be strictly positive");
  if (blob_radius.size() != num_classes - 2)
    throw std::invalid_argument("scene: need one blob radius range per blob class");
  for (const auto& [lo, hi] : blob_radius)
    if (!(lo >= 0.5 && hi >= lo)) throw std::invalid_argument("scene: invalid blob radius range");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("scene: noise_sigma must be non-negative");
  if (max_placement_attempts == 0) throw std::invalid_argument("scene: max_placement_attempts must be positive");
}

std::vector<std::array<double, 3>> SceneSpec::class_colors() const {
  std::vector<std::array<double, 3>> colors{kBackground, kStructure};
  for (std::size_t c = 2; c < num_classes; ++c) {
    const auto& dir = kDefectDirections[(c - 2) % kDefectDirections.size()];
    const double sign = ((c - 2) / kDefectDirections.size()) % 2 == 0 ? 1.0 : -0.5;
    const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    std::array<double, 3> col{};
    for (int i = 0; i < 3; ++i) col[i] = clamp01(kStructure[i] + sign * defect_contrast * dir[i] / norm);
    colors.push_back(col);
  }
  return colors;
}

double SceneSpec::expected_blobs(std::size_t cls) const {
  if (cls < 2 || cls >= num_classes) return 0.0;
  double total = 0.0;
  for (double r : ratios) total += r;
  const double target_pixels = ratios[cls] / total * static_cast<double>(height * width);
  const auto [lo, hi] = blob_radius[cls - 2];
  // Mean of pi*a*b with a, b independent uniform on [lo, hi].
  const double mean_axis = 0.5 * (lo + hi);
  return target_pixels / (std::numbers::pi * mean_axis * mean_axis);
}

Scene generate(const SceneSpec& spec, std::size_t scene_index) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, k = spec.num_classes;
  auto rng = scene_rng(spec.seed, scene_index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  double total_ratio = 0.0;
  for (double r : spec.ratios) total_ratio += r;

  // Structure band: pixels closest to a gently curved line through the middle.
  LabelMap labels(h, w, 0);
  {
    const double cy = 0.5 * h * (0.8 + 0.4 * unit(rng));
    const double cx = 0.5 * w * (0.8 + 0.4 * unit(rng));
    const double theta = std::numbers::pi * unit(rng);
    const double amp = 0.04 * static_cast<double>(std::min(h, w)) * unit(rng);
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double wavelength = 0.75 * static_cast<double>(std::max(h, w));
    const double ny = -std::sin(theta), nx = std::cos(theta);
    std::vector<std::pair<double, std::size_t>> dist(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double along = dy * nx - dx * ny;
        const double across = dy * ny + dx * nx - amp * std::sin(2.0 * std::numbers::pi * along / wavelength + phase);
        dist[y * w + x] = {std::abs(across), y * w + x};
      }
    double band_ratio = 0.0;
    for (std::size_t c = 1; c < k; ++c) band_ratio += spec.ratios[c];
    const auto band_pixels = static_cast<std::size_t>(std::lround(band_ratio / total_ratio * static_cast<double>(h * w)));
    std::sort(dist.begin(), dist.end());
    for (std::size_t i = 0; i < std::min(band_pixels, dist.size()); ++i) labels.values[dist[i].second] = 1;
  }

  // Minority blobs on the structure, never touching each other.
  const auto phases = blob_phases(spec);
  for (std::size_t cls = 2; cls < k; ++cls) {
    const double e = spec.expected_blobs(cls);
    const double i = static_cast<double>(scene_index);
    const auto count = static_cast<std::size_t>(std::floor((i + 1.0) * e + phases[cls]) - std::floor(i * e + phases[cls]));
    const auto [lo, hi] = spec.blob_radius[cls - 2];
    for (std::size_t b = 0; b < count; ++b) {
      bool placed = false;
      for (std::size_t attempt = 0; attempt < spec.max_placement_attempts && !placed; ++attempt) {
        const double a = lo + (hi - lo) * unit(rng);
        const double bb = lo + (hi - lo) * unit(rng);
        const double phi = std::numbers::pi * unit(rng);
        const double cy = unit(rng) * static_cast<double>(h - 1);
        const double cx = unit(rng) * static_cast<double>(w - 1);
        if (labels.at(static_cast<std::size_t>(std::lround(cy)), static_cast<std::size_t>(std::lround(cx))) != 1) continue;
        const double reach = std::max(a, bb) + 1.0;
        const long y0 = static_cast<long>(std::floor(cy - reach)), y1 = static_cast<long>(std::ceil(cy + reach));
        const long x0 = static_cast<long>(std::floor(cx - reach)), x1 = static_cast<long>(std::ceil(cx + reach));
        std::vector<std::size_t> pixels;
        bool ok = true;
        for (long y = y0; y <= y1 && ok; ++y)
          for (long x = x0; x <= x1 && ok; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double u = (dx * std::cos(phi) + dy * std::sin(phi)) / a;
            const double v = (-dx * std::sin(phi) + dy * std::cos(phi)) / bb;
            if (u * u + v * v > 1.0) continue;
            if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w) ||
                labels.values[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] != 1)
              ok = false;
            else
              pixels.push_back(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x));
          }
        if (!ok || pixels.empty()) continue;
        for (auto p : pixels) labels.values[p] = static_cast<std::uint8_t>(cls);
        placed = true;
      }
      if (!placed)
        throw PlacementError("could not place a class-" + std::to_string(cls) + " blob in scene " +
                             std::to_string(scene_index) + " after " + std::to_string(spec.max_placement_attempts) +
                             " attempts");
    }
  }

  // Render: class color, a soft vertical shading on the background, noise.
  const auto colors = spec.class_colors();
  std::vector<double> img(3 * h * w);
  const double shade = 0.08 * (unit(rng) - 0.5);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const auto cls = labels.values[p];
      const double grad = cls == 0 ? shade + 0.1 * (static_cast<double>(y) / static_cast<double>(h) - 0.5) : 0.0;
      for (std::size_t c = 0; c < 3; ++c)
        img[c * h * w + p] = clamp01(colors[cls][c] + grad + spec.noise_sigma * noise(rng));
    }
  return {Tensor::from({3, h, w}, std::move(img)), std::move(labels)};
}

std::vector<Scene> generate_corpus(const SceneSpec& spec, std::size_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(spec, i));
  return out;
}

ClassStats dataset_stats(std::span<const LabelMap> corpus, std::size_t num_classes, WeightBasis basis) {
  if (corpus.empty()) throw std::invalid_argument("dataset_stats: empty corpus");
  std::vector<std::uint64_t> counts(num_classes, 0);
  for (const auto& m : corpus)
    for (auto v : m.values) {
      if (v >= num_classes) throw std::invalid_argument("dataset_stats: label outside [0,K)");
      ++counts[v];
    }
  return class_weights(counts, basis);
}

}  // namespace dnet
