#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "tunescope/data.hpp"
#include "tunescope/rng.hpp"
#include "tunescope/segmentation.hpp"

using namespace tunescope;

namespace {

void expect_valid(const SegmentMap& map, const GrayImage& image) {
  ASSERT_EQ(map.width, image.width);
  ASSERT_EQ(map.height, image.height);
  ASSERT_EQ(map.labels.size(), image.size());
  ASSERT_GT(map.segment_count, 0u);
  std::vector<bool> seen(map.segment_count, false);
  for (auto l : map.labels) {
    ASSERT_GE(l, 0);
    ASSERT_LT(static_cast<std::size_t>(l), map.segment_count);
    seen[static_cast<std::size_t>(l)] = true;
  }
  for (bool s : seen) EXPECT_TRUE(s);
  // Independent flood fill: each label must form a single 4-connected piece.
  std::vector<bool> visited(map.labels.size(), false);
  std::set<std::int32_t> started;
  for (std::size_t start = 0; start < map.labels.size(); ++start) {
    if (visited[start]) continue;
    const auto label = map.labels[start];
    EXPECT_TRUE(started.insert(label).second) << "label " << label << " is split";
    std::vector<std::size_t> stack{start};
    visited[start] = true;
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      const auto x = p % map.width, y = p / map.width;
      const std::size_t nbrs[4] = {x > 0 ? p - 1 : p, x + 1 < map.width ? p + 1 : p, y > 0 ? p - map.width : p,
                                   y + 1 < map.height ? p + map.width : p};
      for (auto q : nbrs)
        if (!visited[q] && map.labels[q] == label) {
          visited[q] = true;
          stack.push_back(q);
        }
    }
  }
}

GrayImage random_image(Rng& rng, std::size_t w, std::size_t h) {
  GrayImage im(w, h);
  for (auto& p : im.pixels) p = static_cast<std::uint8_t>(rng.index(256));
  return im;
}

}  // namespace

TEST(Grid, FourByFourCellTwo) {
  const auto map = segment_grid(GrayImage(4, 4), 2);
  EXPECT_EQ(map.segment_count, 4u);
  EXPECT_EQ(map.labels, (std::vector<std::int32_t>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3}));
}

TEST(Grid, CeilingRuleLeavesNarrowEdgeCells) {
  const auto map = segment_grid(GrayImage(5, 4), 2);
  EXPECT_EQ(map.segment_count, 6u);
  const auto sizes = map.segment_sizes();
  EXPECT_EQ(sizes[2], 2u);  // rightmost cell is one pixel wide
  EXPECT_EQ(sizes[5], 2u);
  EXPECT_EQ(sizes[0], 4u);
  EXPECT_EQ(map.at(4, 0), 2);
  EXPECT_EQ(map.at(4, 3), 5);
}

TEST(Grid, WholeImageCell) {
  const auto map = segment_grid(GrayImage(6, 6), 6);
  EXPECT_EQ(map.segment_count, 1u);
  for (auto l : map.labels) EXPECT_EQ(l, 0);
}

TEST(Grid, Errors) {
  EXPECT_THROW(segment_grid(GrayImage(4, 4), 0), Error);
  EXPECT_THROW(segment_grid(GrayImage(8, 4), 5), Error);
}

TEST(Slic, Errors) {
  const GrayImage im(8, 8);
  SlicParams p;
  p.target_segments = 0;
  EXPECT_THROW(segment_slic(im, p), Error);
  p.target_segments = 65;
  EXPECT_THROW(segment_slic(im, p), Error);
  p.target_segments = 4;
  p.compactness = 0.0;
  EXPECT_THROW(segment_slic(im, p), Error);
  p.compactness = 10.0;
  p.iterations = 0;
  EXPECT_THROW(segment_slic(im, p), Error);
}

TEST(Slic, ConstantImageFollowsInitialGrid) {
  const GrayImage im(40, 40, 100);
  SlicParams p;
  p.target_segments = 16;
  const auto slic = segment_slic(im, p);
  const auto grid = segment_grid(im, 10);
  EXPECT_EQ(slic.segment_count, 16u);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < im.size(); ++i) agree += slic.labels[i] == grid.labels[i];
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(im.size()), 0.9);
}

// Oracle: exhaustive search over every vertical split column for the
// partition minimizing the k-means objective in the same feature space.
TEST(Slic, TwoHalvesMatchBruteForceTwoMeans) {
  for (std::size_t edge : {10u, 16u, 21u}) {
    const std::size_t w = 32, h = 16;
    GrayImage im(w, h);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) im.pixels[y * w + x] = x < edge ? 40 : 210;

    SlicParams p;
    p.target_segments = 2;
    const auto map = segment_slic(im, p);
    expect_valid(map, im);
    ASSERT_EQ(map.segment_count, 2u);

    const double step = std::sqrt(static_cast<double>(w * h) / 2.0);
    const double spatial = (p.compactness / step) * (p.compactness / step);
    auto cost_of_split = [&](std::size_t split) {
      double total = 0.0;
      for (int side = 0; side < 2; ++side) {
        double si = 0, sx = 0, sy = 0, n = 0;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            if ((x < split) == (side == 0)) {
              si += im.at(x, y), sx += static_cast<double>(x), sy += static_cast<double>(y), n += 1;
            }
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            if ((x < split) == (side == 0)) {
              const double di = im.at(x, y) - si / n, dx = static_cast<double>(x) - sx / n,
                           dy = static_cast<double>(y) - sy / n;
              total += di * di + spatial * (dx * dx + dy * dy);
            }
      }
      return total;
    };
    std::size_t best_split = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t s = 1; s < w; ++s)
      if (const double c = cost_of_split(s); c < best) best = c, best_split = s;
    EXPECT_LE(std::abs(static_cast<double>(best_split) - static_cast<double>(edge)), 1.0);

    // Observed boundary per row, and mean intensities per segment.
    std::vector<double> sum(2, 0.0), cnt(2, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
      std::size_t boundary = w;
      for (std::size_t x = 1; x < w; ++x)
        if (map.at(x, y) != map.at(x - 1, y)) boundary = x;
      EXPECT_LE(std::abs(static_cast<double>(boundary) - static_cast<double>(best_split)), 1.0) << "row " << y;
      EXPECT_LE(std::abs(static_cast<double>(boundary) - static_cast<double>(edge)), 1.0) << "row " << y;
      for (std::size_t x = 0; x < w; ++x) {
        sum[static_cast<std::size_t>(map.at(x, y))] += im.at(x, y);
        cnt[static_cast<std::size_t>(map.at(x, y))] += 1;
      }
    }
    EXPECT_NEAR(std::abs(sum[0] / cnt[0] - sum[1] / cnt[1]), 170.0, 1e-9);
  }
}

TEST(Slic, DeterministicPerSeed) {
  const auto im = synthesize_texture(TextureClass::rocky, 48, 5).image;
  SlicParams p;
  p.seed = 9;
  EXPECT_EQ(segment_slic(im, p), segment_slic(im, p));
}

TEST(Property, CoverageAndConnectivityOnRandomImages) {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t w = 4 + rng.index(40), h = 4 + rng.index(40);
    const auto im = random_image(rng, w, h);
    SlicParams p;
    p.target_segments = 1 + rng.index(std::min<std::size_t>(60, w * h));
    p.compactness = 0.5 + rng.uniform() * 30.0;
    p.iterations = 1 + rng.index(10);
    p.seed = rng.next_u64();
    const auto slic = segment_slic(im, p);
    expect_valid(slic, im);
    EXPECT_TRUE(segments_connected(slic));
    const auto grid = segment_grid(im, 1 + rng.index(std::min(w, h)));
    expect_valid(grid, im);
    EXPECT_TRUE(segments_connected(grid));
  }
}

TEST(Property, TexturedImagesStayValid) {
  for (auto cls : {TextureClass::flat, TextureClass::ripple, TextureClass::rocky, TextureClass::crater}) {
    const auto im = synthesize_texture(cls, 64, 11).image;
    const auto map = segment_slic(im);
    expect_valid(map, im);
  }
}

TEST(Export, LabelImageSpreadsGrayLevels) {
  const auto map = segment_grid(GrayImage(4, 4), 2);
  const auto img = segment_map_image(map);
  EXPECT_EQ(img.at(0, 0), 0);
  EXPECT_EQ(img.at(3, 3), 255);
  EXPECT_EQ(img.at(2, 0), 85);
}
