#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "dnet/nn_ops.hpp"
#include "dnet/patches.hpp"
#include "oracles.hpp"

using namespace dnet;

namespace {

Tensor random_probs(std::mt19937_64& rng, std::size_t k, std::size_t p) {
  return softmax_channels(Tensor::from({k, p, p}, oracle::uniform(rng, k * p * p, -3, 3)));
}

}  // namespace

TEST(PatchStarts, GridWithSnappedEnd) {
  EXPECT_EQ(patch_starts(400, 400, 20), (std::vector<std::size_t>{0}));
  EXPECT_EQ(patch_starts(440, 400, 20), (std::vector<std::size_t>{0, 20, 40}));
  EXPECT_EQ(patch_starts(450, 400, 20), (std::vector<std::size_t>{0, 20, 40, 50}));
  EXPECT_THROW(patch_starts(399, 400, 20), std::invalid_argument);
  EXPECT_THROW(patch_starts(10, 4, 0), std::invalid_argument);
}

TEST(TrainingPatches, ClassFilter) {
  LabelMap two(8, 8, 0);
  for (std::size_t x = 0; x < 8; ++x) two.at(4, x) = 1;
  TrainingPatchOptions opt{8, 4, 3};
  EXPECT_TRUE(training_patch_origins(two, opt).empty());
  LabelMap three = two;
  three.at(5, 5) = 2;
  EXPECT_EQ(training_patch_origins(three, opt).size(), 1u);
}

TEST(TrainingPatches, EveryPatchHasEnoughClassesAndMatchesCrop) {
  std::mt19937_64 rng(1);
  LabelMap labels(40, 56, 0);
  std::uniform_int_distribution<std::size_t> ry(0, 39), rx(0, 55);
  std::uniform_int_distribution<int> cls(1, 3);
  for (int i = 0; i < 30; ++i) labels.at(ry(rng), rx(rng)) = static_cast<std::uint8_t>(cls(rng));
  auto image = Tensor::from({3, 40, 56}, oracle::uniform(rng, 3 * 40 * 56));
  auto patches = extract_training_patches(image, labels, {16, 4, 3}, "scene");
  ASSERT_FALSE(patches.empty());
  for (const auto& p : patches) {
    EXPECT_GE(p.labels.distinct_classes(), 3u);
    EXPECT_EQ(p.labels, crop_labels(labels, p.origin, 16));
    EXPECT_EQ(p.image.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(p.image[0], image[p.origin.row * 56 + p.origin.col]);
    EXPECT_LE(p.origin.row + 16, 40u);
    EXPECT_LE(p.origin.col + 16, 56u);
    EXPECT_EQ(p.source, "scene");
  }
}

TEST(Tiles, Examples) {
  EXPECT_EQ(tile_origins(400, 400, 400, 200).size(), 1u);
  auto t = tile_origins(600, 400, 400, 200);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].row, 0u);
  EXPECT_EQ(t[1].row, 200u);
  EXPECT_THROW(tile_origins(64, 64, 32, 32), std::invalid_argument);
  EXPECT_THROW(tile_origins(20, 64, 32, 8), std::invalid_argument);
}

TEST(Tiles, CoverEveryPixel) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> size(400, 1200);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = size(rng), w = size(rng);
    std::vector<std::uint8_t> covered(h * w, 0);
    for (auto o : tile_origins(h, w, 400, 200)) {
      ASSERT_LE(o.row + 400, h);
      ASSERT_LE(o.col + 400, w);
      for (std::size_t y = o.row; y < o.row + 400; ++y) std::fill_n(covered.begin() + y * w + o.col, 400, 1);
    }
    EXPECT_EQ(std::count(covered.begin(), covered.end(), 0), 0) << h << "x" << w;
  }
}

TEST(Merge, SingleTileIsIdentity) {
  std::mt19937_64 rng(3);
  auto p = random_probs(rng, 3, 8);
  ProbAccumulator acc(3, 8, 8);
  acc.add(p, {0, 0});
  auto [probs, labels] = acc.finalize();
  EXPECT_TRUE(std::equal(probs.data().begin(), probs.data().end(), p.data().begin()));
  EXPECT_EQ(labels, argmax_labels(p));
}

TEST(Merge, EqualOverlapUnchangedAndTieGoesLow) {
  ProbAccumulator acc(2, 1, 3);
  acc.add(Tensor::from({2, 1, 2}, {1, 0.3, 0, 0.7}), {0, 0});
  acc.add(Tensor::from({2, 1, 2}, {0.3, 0, 0.7, 1}), {0, 1});
  auto [probs, labels] = acc.finalize();
  EXPECT_EQ(probs[1], 0.3);  // identical overlap values
  EXPECT_EQ(probs[4], 0.7);
  ProbAccumulator tie(2, 1, 1);
  tie.add(Tensor::from({2, 1, 1}, {1, 0}), {0, 0});
  tie.add(Tensor::from({2, 1, 1}, {0, 1}), {0, 0});
  auto [tp, tl] = tie.finalize();
  EXPECT_EQ(tp[0], 0.5);
  EXPECT_EQ(tp[1], 0.5);
  EXPECT_EQ(tl.at(0, 0), 0);
}

TEST(Merge, FinalizeRequiresCoverage) {
  ProbAccumulator acc(2, 4, 4);
  acc.add(Tensor::full({2, 2, 2}, 0.5), {0, 0});
  EXPECT_FALSE(acc.fully_covered());
  EXPECT_THROW(acc.finalize(), std::runtime_error);
  EXPECT_THROW(acc.add(Tensor::full({2, 2, 2}, 0.5), {3, 0}), std::out_of_range);
}

TEST(Merge, SimplexAndOrderInvariance) {
  std::mt19937_64 rng(4);
  const std::size_t h = 70, w = 53, p = 32, k = 4;
  std::vector<TileProbs> tiles;
  for (auto o : tile_origins(h, w, p, 12)) tiles.push_back({o, random_probs(rng, k, p)});
  auto [probs, labels] = merge_tiles(k, h, w, tiles);
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += probs[c * h * w + i];
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
  for (int rep = 0; rep < 5; ++rep) {
    auto shuffled = tiles;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto [p2, l2] = merge_tiles(k, h, w, shuffled);
    EXPECT_TRUE(std::equal(probs.data().begin(), probs.data().end(), p2.data().begin()));
    EXPECT_EQ(labels, l2);
  }
}

TEST(Merge, ConstantModelReproducesConstant) {
  const std::size_t h = 90, w = 77, p = 32;
  auto tiles_in = tile_for_inference(Tensor::zeros({3, h, w}), p, 8);
  std::vector<TileProbs> tiles;
  for (const auto& t : tiles_in) {
    std::vector<double> v(3 * p * p);
    for (std::size_t i = 0; i < p * p; ++i) {
      v[i] = 0.2;
      v[p * p + i] = 0.5;
      v[2 * p * p + i] = 0.3;
    }
    tiles.push_back({t.origin, Tensor::from({3, p, p}, v)});
  }
  auto [probs, labels] = merge_tiles(3, h, w, tiles);
  for (std::size_t i = 0; i < h * w; ++i) {
    ASSERT_NEAR(probs[i], 0.2, 1e-15);
    ASSERT_NEAR(probs[h * w + i], 0.5, 1e-15);
    ASSERT_EQ(labels.values[i], 1);
  }
}

TEST(Crop, BoundsChecked) {
  auto img = Tensor::zeros({3, 10, 10});
  EXPECT_THROW(crop_image(img, {5, 0}, 6), std::out_of_range);
  EXPECT_THROW(crop_labels(LabelMap(10, 10), {0, 5}, 6), std::out_of_range);
}

TEST(Argmax, LowestIndexOnTies) {
  auto l = argmax_labels(Tensor::from({3, 1, 3}, {0.2, 0.5, 0.1, 0.4, 0.5, 0.45, 0.4, 0.0, 0.45}));
  EXPECT_EQ(l.values, (std::vector<std::uint8_t>{1, 0, 1}));
}
