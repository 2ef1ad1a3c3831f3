#pragma once

// Index streams over a labeled collection: inverse-class-frequency
// resampling with replacement, and its unbalanced counterpart.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "tunescope/error.hpp"
#include "tunescope/rng.hpp"

namespace tunescope {

// weight_i = 1 / count(label_i); every present class then carries the same
// total weight (1), so each draw picks a class uniformly at random.
inline std::vector<double> balanced_weights(std::span<const std::size_t> labels) {
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[labels[i]]);
  return w;
}

// Draws `count` indices into `weights` with replacement, P(i) proportional to weights[i].
inline std::vector<std::size_t> weighted_draws(std::span<const double> weights, std::size_t count, std::uint64_t seed) {
  if (weights.empty()) throw Error("cannot sample from an empty dataset");
  std::vector<double> cumulative(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw Error("sampling weights must be non-negative");
    total += weights[i];
    cumulative[i] = total;
  }
  if (!(total > 0.0)) throw Error("sampling weights sum to zero");
  Rng rng(seed);
  std::vector<std::size_t> out(count);
  for (auto& idx : out) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    idx = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                            static_cast<std::ptrdiff_t>(weights.size()) - 1));
  }
  return out;
}

// Indices into `labels`, drawn so that each present class is equally likely.
inline std::vector<std::size_t> balanced_sampler(std::span<const std::size_t> labels, std::size_t draw_count,
                                                 std::uint64_t seed) {
  if (labels.empty()) throw Error("cannot sample from an empty dataset");
  const auto w = balanced_weights(labels);
  return weighted_draws(w, draw_count, seed);
}

// Uniform draws with replacement; class frequencies follow the census.
inline std::vector<std::size_t> uniform_sampler(std::size_t population, std::size_t draw_count, std::uint64_t seed) {
  if (population == 0) throw Error("cannot sample from an empty dataset");
  Rng rng(seed);
  std::vector<std::size_t> out(draw_count);
  for (auto& idx : out) idx = rng.index(population);
  return out;
}

}  // namespace tunescope
