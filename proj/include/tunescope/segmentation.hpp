#pragma once

// Superpixel segmentation: a fixed grid tiler and a SLIC-style k-means in
// (intensity, x, y) with a connectivity repair pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <vector>

#include "tunescope/error.hpp"
#include "tunescope/image.hpp"
#include "tunescope/rng.hpp"

namespace tunescope {

struct SegmentMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::int32_t> labels;  // row-major, 0..segment_count-1
  std::size_t segment_count = 0;

  std::int32_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }

  std::vector<std::size_t> segment_sizes() const {
    std::vector<std::size_t> sizes(segment_count, 0);
    for (auto l : labels) ++sizes[static_cast<std::size_t>(l)];
    return sizes;
  }

  bool operator==(const SegmentMap&) const = default;
};

namespace detail {

// Labels 4-connected regions of equal `labels` value; returns component id per pixel.
inline std::vector<std::int32_t> connected_components(const std::vector<std::int32_t>& labels, std::size_t w,
                                                      std::size_t h, std::size_t* count) {
  std::vector<std::int32_t> comp(labels.size(), -1);
  std::int32_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (comp[start] >= 0) continue;
    comp[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t x = p % w;
      const std::size_t y = p / w;
      auto visit = [&](std::size_t q) {
        if (comp[q] < 0 && labels[q] == labels[p]) {
          comp[q] = next;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
    }
    ++next;
  }
  *count = static_cast<std::size_t>(next);
  return comp;
}

// Renumbers labels to 0..S-1 in order of first appearance (row-major).
inline std::size_t compact_labels(std::vector<std::int32_t>& labels) {
  std::vector<std::int32_t> remap;
  std::int32_t next = 0;
  for (auto& l : labels) {
    const auto u = static_cast<std::size_t>(l);
    if (u >= remap.size()) remap.resize(u + 1, -1);
    if (remap[u] < 0) remap[u] = next++;
    l = remap[u];
  }
  return static_cast<std::size_t>(next);
}

}  // namespace detail

// Tiles the image into ceil(w/cell) x ceil(h/cell) rectangles, numbered
// row-major; cells on the right and bottom edges may be smaller.
inline SegmentMap segment_grid(const GrayImage& image, std::size_t cell) {
  if (cell == 0) throw Error("grid cell size must be positive");
  if (cell > std::min(image.width, image.height))
    throw Error("grid cell size " + std::to_string(cell) + " exceeds the image's smaller side");
  const std::size_t cols = (image.width + cell - 1) / cell;
  const std::size_t rows = (image.height + cell - 1) / cell;
  SegmentMap map{image.width, image.height, std::vector<std::int32_t>(image.size()), cols * rows};
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      map.labels[y * image.width + x] = static_cast<std::int32_t>((y / cell) * cols + x / cell);
  return map;
}

struct SlicParams {
  std::size_t target_segments = 50;
  double compactness = 10.0;
  std::size_t iterations = 10;
  std::uint64_t seed = 0;
};

// Center layout used to seed SLIC: nx columns by ny rows of cell centers.
struct SlicGrid {
  std::size_t nx = 1;
  std::size_t ny = 1;
};

inline SlicGrid slic_grid(std::size_t width, std::size_t height, std::size_t target) {
  SlicGrid g;
  const double ideal = std::sqrt(static_cast<double>(target) * static_cast<double>(width) / static_cast<double>(height));
  g.nx = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(ideal - 1e-9)), 1, width);
  g.ny = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(static_cast<double>(target) / static_cast<double>(g.nx))), 1, height);
  return g;
}

// k-means over (intensity, x, y) with squared distance
//   dI^2 + (compactness / S)^2 * (dx^2 + dy^2),  S = sqrt(pixels / target),
// initialized at the centers of a uniform grid of cells. Afterwards every
// cluster keeps its largest 4-connected piece; the other fragments are merged
// into the largest adjacent region. The seed breaks ties among equally-sized
// neighbours during the merge, otherwise the result is fully determined by
// the image.
inline SegmentMap segment_slic(const GrayImage& image, const SlicParams& params = {}) {
  if (params.target_segments == 0) throw Error("SLIC target_segments must be positive");
  if (params.target_segments > image.size())
    throw Error("SLIC target_segments " + std::to_string(params.target_segments) + " exceeds the pixel count");
  if (!(params.compactness > 0.0)) throw Error("SLIC compactness must be positive");
  if (params.iterations == 0) throw Error("SLIC iterations must be positive");

  const std::size_t w = image.width;
  const std::size_t h = image.height;
  const auto grid = slic_grid(w, h, params.target_segments);
  const double step = std::sqrt(static_cast<double>(image.size()) / static_cast<double>(params.target_segments));
  const double spatial = (params.compactness / step) * (params.compactness / step);

  struct Center {
    double intensity, x, y;
  };
  std::vector<Center> centers;
  for (std::size_t j = 0; j < grid.ny; ++j) {
    for (std::size_t i = 0; i < grid.nx; ++i) {
      // Pixel coordinates are integers, so a cell [x0, x1) is centered at (x0 + x1 - 1) / 2.
      const double cx = (static_cast<double>(i) + 0.5) * static_cast<double>(w) / static_cast<double>(grid.nx) - 0.5;
      const double cy = (static_cast<double>(j) + 0.5) * static_cast<double>(h) / static_cast<double>(grid.ny) - 0.5;
      // Seed intensity from the mean of the center's cell.
      const auto x0 = i * w / grid.nx, x1 = (i + 1) * w / grid.nx;
      const auto y0 = j * h / grid.ny, y1 = (j + 1) * h / grid.ny;
      double sum = 0.0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) sum += image.at(x, y);
      const auto n = static_cast<double>((x1 - x0) * (y1 - y0));
      centers.push_back({n > 0 ? sum / n : 0.0, cx, cy});
    }
  }

  // Centers influence pixels within 2 cell-widths, as in SLIC; with few
  // centers that window simply covers the whole image.
  const double cell_w = static_cast<double>(w) / static_cast<double>(grid.nx);
  const double cell_h = static_cast<double>(h) / static_cast<double>(grid.ny);
  const double reach_x = 2.0 * cell_w;
  const double reach_y = 2.0 * cell_h;

  std::vector<std::int32_t> assign(image.size(), 0);
  for (std::size_t iter = 0; iter < params.iterations; ++iter) {
    std::vector<double> best(image.size(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& c = centers[k];
      const auto xa = static_cast<std::size_t>(std::max(0.0, std::floor(c.x - reach_x)));
      const auto xb = static_cast<std::size_t>(std::min(static_cast<double>(w), std::ceil(c.x + reach_x)));
      const auto ya = static_cast<std::size_t>(std::max(0.0, std::floor(c.y - reach_y)));
      const auto yb = static_cast<std::size_t>(std::min(static_cast<double>(h), std::ceil(c.y + reach_y)));
      for (std::size_t y = ya; y < yb; ++y) {
        for (std::size_t x = xa; x < xb; ++x) {
          const double di = image.at(x, y) - c.intensity;
          const double dx = static_cast<double>(x) - c.x;
          const double dy = static_cast<double>(y) - c.y;
          const double d = di * di + spatial * (dx * dx + dy * dy);
          const std::size_t p = y * w + x;
          if (d < best[p]) {
            best[p] = d;
            assign[p] = static_cast<std::int32_t>(k);
          }
        }
      }
    }
    // Pixels outside every window (possible only with degenerate layouts) keep their previous center.
    std::vector<double> si(centers.size(), 0.0), sx(centers.size(), 0.0), sy(centers.size(), 0.0), cnt(centers.size(), 0.0);
    for (std::size_t p = 0; p < image.size(); ++p) {
      const auto k = static_cast<std::size_t>(assign[p]);
      si[k] += image.pixels[p];
      sx[k] += static_cast<double>(p % w);
      sy[k] += static_cast<double>(p / w);
      cnt[k] += 1.0;
    }
    bool moved = false;
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (cnt[k] == 0.0) continue;
      const Center next{si[k] / cnt[k], sx[k] / cnt[k], sy[k] / cnt[k]};
      moved = moved || next.intensity != centers[k].intensity || next.x != centers[k].x || next.y != centers[k].y;
      centers[k] = next;
    }
    if (!moved) break;
  }

  // Connectivity repair.
  std::size_t comp_count = 0;
  const auto comp = detail::connected_components(assign, w, h, &comp_count);
  std::vector<std::size_t> comp_size(comp_count, 0);
  std::vector<std::int32_t> comp_cluster(comp_count, 0);
  std::vector<std::size_t> comp_first(comp_count, 0);
  for (std::size_t p = image.size(); p-- > 0;) {
    const auto c = static_cast<std::size_t>(comp[p]);
    ++comp_size[c];
    comp_cluster[c] = assign[p];
    comp_first[c] = p;
  }
  std::vector<std::size_t> primary(centers.size(), comp_count);
  for (std::size_t c = 0; c < comp_count; ++c) {
    auto& best = primary[static_cast<std::size_t>(comp_cluster[c])];
    if (best == comp_count || comp_size[c] > comp_size[best]) best = c;
  }

  // Union-find over components; orphans merge, smallest first.
  std::vector<std::size_t> parent(comp_count);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t c) {
    while (parent[c] != c) c = parent[c] = parent[parent[c]];
    return c;
  };
  std::vector<std::size_t> region_size = comp_size;

  std::vector<std::size_t> orphans;
  for (std::size_t c = 0; c < comp_count; ++c)
    if (primary[static_cast<std::size_t>(comp_cluster[c])] != c) orphans.push_back(c);
  std::stable_sort(orphans.begin(), orphans.end(), [&](auto a, auto b) { return comp_size[a] < comp_size[b]; });

  std::vector<std::vector<std::size_t>> neighbours(comp_count);
  for (std::size_t p = 0; p < image.size(); ++p) {
    const std::size_t x = p % w;
    const std::size_t y = p / w;
    const auto a = static_cast<std::size_t>(comp[p]);
    auto link = [&](std::size_t q) {
      const auto b = static_cast<std::size_t>(comp[q]);
      if (a != b) {
        neighbours[a].push_back(b);
        neighbours[b].push_back(a);
      }
    };
    if (x + 1 < w) link(p + 1);
    if (y + 1 < h) link(p + w);
  }
  for (auto& n : neighbours) {
    std::sort(n.begin(), n.end());
    n.erase(std::unique(n.begin(), n.end()), n.end());
  }

  Rng tie_break(params.seed);
  for (const std::size_t orphan : orphans) {
    const std::size_t self = find(orphan);
    std::vector<std::size_t> candidates;
    std::size_t best_size = 0;
    for (const std::size_t nb : neighbours[orphan]) {
      const std::size_t r = find(nb);
      if (r == self) continue;
      if (region_size[r] > best_size) {
        best_size = region_size[r];
        candidates.assign(1, r);
      } else if (region_size[r] == best_size && std::find(candidates.begin(), candidates.end(), r) == candidates.end()) {
        candidates.push_back(r);
      }
    }
    if (candidates.empty()) continue;  // sole region in the image
    std::sort(candidates.begin(), candidates.end());
    const std::size_t target = candidates.size() == 1 ? candidates[0] : candidates[tie_break.index(candidates.size())];
    parent[self] = target;
    region_size[target] += region_size[self];
  }

  SegmentMap map{w, h, std::vector<std::int32_t>(image.size()), 0};
  for (std::size_t p = 0; p < image.size(); ++p)
    map.labels[p] = static_cast<std::int32_t>(find(static_cast<std::size_t>(comp[p])));
  map.segment_count = detail::compact_labels(map.labels);
  return map;
}

// Spreads labels over 0..255 for visual inspection.
inline GrayImage segment_map_image(const SegmentMap& map) {
  GrayImage img(map.width, map.height);
  const double scale = map.segment_count > 1 ? 255.0 / static_cast<double>(map.segment_count - 1) : 0.0;
  for (std::size_t p = 0; p < map.labels.size(); ++p) img.pixels[p] = clamp_u8(map.labels[p] * scale);
  return img;
}

inline bool segments_connected(const SegmentMap& map) {
  std::size_t count = 0;
  detail::connected_components(map.labels, map.width, map.height, &count);
  return count == map.segment_count;
}

}  // namespace tunescope
