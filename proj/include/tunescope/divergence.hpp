#pragma once

// Histogram density estimates of weight populations, KL divergence between
// them, and per-layer drift reports comparing two checkpoints.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tunescope/error.hpp"
#include "tunescope/tensors.hpp"

namespace tunescope {

struct ProbabilityHistogram {
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<double> mass;   // bins, sums to 1

  std::size_t bins() const { return mass.size(); }
};

struct HistogramOptions {
  std::size_t bins = 100;
  double epsilon = 1e-10;
};

// Both histograms share uniform edges spanning the union range of the two
// populations. Bins are [lo, hi) except the last, which is closed. Each
// bin's relative frequency gets +epsilon, then the row is renormalized, so
// the smallest possible mass is epsilon / (1 + bins * epsilon).
// If every value in both populations is identical, both collapse to one
// bin of mass 1.
template <typename T>
std::pair<ProbabilityHistogram, ProbabilityHistogram> estimate_histogram_pair(
    std::span<const T> values_a, std::span<const T> values_b, HistogramOptions opts = {}) {
  if (values_a.empty() || values_b.empty()) throw Error("histogram population is empty");
  if (opts.bins == 0) throw Error("histogram needs at least one bin");
  if (!(opts.epsilon > 0.0)) throw Error("histogram smoothing epsilon must be positive");

  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (auto population : {values_a, values_b}) {
    for (T v : population) {
      const double x = static_cast<double>(v);
      if (!std::isfinite(x)) throw Error("histogram population contains a non-finite value");
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }

  if (lo == hi) {
    ProbabilityHistogram h{{lo - 0.5, lo + 0.5}, {1.0}};
    return {h, h};
  }

  const std::size_t bins = opts.bins;
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i < bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  edges[bins] = hi;

  auto build = [&](std::span<const T> population) {
    std::vector<double> counts(bins, 0.0);
    for (T v : population) {
      const double x = static_cast<double>(v);
      auto idx = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
      counts[std::min(idx, bins - 1)] += 1.0;
    }
    const double n = static_cast<double>(population.size());
    const double norm = 1.0 + static_cast<double>(bins) * opts.epsilon;
    for (auto& c : counts) c = (c / n + opts.epsilon) / norm;
    return ProbabilityHistogram{edges, std::move(counts)};
  };
  return {build(values_a), build(values_b)};
}

template <typename T>
std::pair<ProbabilityHistogram, ProbabilityHistogram> estimate_histogram_pair(
    const std::vector<T>& values_a, const std::vector<T>& values_b, HistogramOptions opts = {}) {
  return estimate_histogram_pair(std::span<const T>(values_a), std::span<const T>(values_b), opts);
}

// D_KL(p || q) = sum_i p_i ln(p_i / q_i), in nats.
inline double kl_divergence(const ProbabilityHistogram& p, const ProbabilityHistogram& q) {
  if (p.edges != q.edges || p.mass.size() != q.mass.size()) throw Error("incomparable histograms");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.mass.size(); ++i) {
    if (!(p.mass[i] > 0.0) || !(q.mass[i] > 0.0)) throw Error("histogram has a zero-mass bin; smooth it first");
    sum += p.mass[i] * std::log(p.mass[i] / q.mass[i]);
  }
  // Rounding in the sum may leave a tiny negative residue for near-equal rows.
  return std::max(sum, 0.0);
}

template <typename T>
double euclidean_distance(std::span<const T> a, std::span<const T> b, const std::string& layer = {}) {
  if (a.size() != b.size())
    throw Error("euclidean distance length mismatch" + (layer.empty() ? std::string() : " in layer \"" + layer + "\"") +
                ": " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

template <typename T>
double euclidean_distance(const std::vector<T>& a, const std::vector<T>& b, const std::string& layer = {}) {
  return euclidean_distance(std::span<const T>(a), std::span<const T>(b), layer);
}

struct LayerDivergence {
  std::string layer;
  double kl = 0.0;  // D_KL(A || B), nats
  double ed = 0.0;
  std::size_t count_a = 0;
  std::size_t count_b = 0;
  std::vector<std::string> kinds;  // tensor kinds in the histogram population
};

struct DivergenceOptions {
  std::set<std::string> exclude;
  HistogramOptions histogram;
};

struct DivergenceReport {
  std::vector<LayerDivergence> layers;  // checkpoint layer order
  std::size_t argmax_kl = 0;
  std::size_t argmax_ed = 0;
  std::vector<UnmatchedLayer> unmatched_a;
  std::vector<UnmatchedLayer> unmatched_b;
  DivergenceOptions options;
};

// Compares each paired layer of `a` (fine-tuned) against `b` (baseline):
// kl = D_KL(a || b) over histograms of all of the layer's tensors
// concatenated, ed = L2 distance between the flattened layers.
inline DivergenceReport diverge_checkpoints(const Checkpoint& a, const Checkpoint& b,
                                            const DivergenceOptions& opts = {}) {
  const LayerPairing pairing = pair_layers(a, b, opts.exclude);
  if (pairing.pairs.empty()) throw Error("no paired layers");

  DivergenceReport report;
  report.options = opts;
  report.unmatched_a = pairing.unmatched_a;
  report.unmatched_b = pairing.unmatched_b;

  for (const auto& pair : pairing.pairs) {
    std::vector<float> pop_a;
    std::vector<float> pop_b;
    std::vector<std::string> kinds;
    for (std::size_t i = 0; i < pair.from_a.size(); ++i) {
      const auto& ta = *pair.from_a[i];
      const auto& tb = *pair.from_b[i];
      pop_a.insert(pop_a.end(), ta.values.begin(), ta.values.end());
      pop_b.insert(pop_b.end(), tb.values.begin(), tb.values.end());
      const std::string kind(to_string(ta.kind));
      if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) kinds.push_back(kind);
    }
    const auto [p, q] = estimate_histogram_pair(pop_a, pop_b, opts.histogram);
    LayerDivergence d;
    d.layer = pair.layer;
    d.kl = kl_divergence(p, q);
    d.ed = euclidean_distance(pop_a, pop_b, pair.layer);
    d.count_a = pop_a.size();
    d.count_b = pop_b.size();
    d.kinds = std::move(kinds);
    report.layers.push_back(std::move(d));
  }

  for (std::size_t i = 1; i < report.layers.size(); ++i) {
    if (report.layers[i].kl > report.layers[report.argmax_kl].kl) report.argmax_kl = i;
    if (report.layers[i].ed > report.layers[report.argmax_ed].ed) report.argmax_ed = i;
  }
  return report;
}

inline nlohmann::json to_json(const DivergenceReport& r) {
  nlohmann::json j;
  j["direction"] = "D_KL(A||B): A = first checkpoint (fine-tuned), B = second (baseline)";
  j["log_base"] = "e";
  j["bins"] = r.options.histogram.bins;
  j["epsilon"] = r.options.histogram.epsilon;
  j["exclude"] = r.options.exclude;
  j["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    const auto& l = r.layers[i];
    j["layers"].push_back({{"layer", l.layer},
                           {"kl", l.kl},
                           {"ed", l.ed},
                           {"count_a", l.count_a},
                           {"count_b", l.count_b},
                           {"kinds", l.kinds},
                           {"max_kl", i == r.argmax_kl},
                           {"max_ed", i == r.argmax_ed}});
  }
  auto unmatched = [](const std::vector<UnmatchedLayer>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& u : v) arr.push_back({{"layer", u.layer}, {"reason", u.reason}});
    return arr;
  };
  j["unmatched_a"] = unmatched(r.unmatched_a);
  j["unmatched_b"] = unmatched(r.unmatched_b);
  return j;
}

namespace detail {
// Shortest round-trip decimal form; matches what the JSON writer emits.
inline std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
}  // namespace detail

// Rows are layers, columns D_KL and D_ED; '*' marks the per-column maximum.
inline std::string to_text_table(const DivergenceReport& r) {
  std::size_t name_w = 5;
  std::size_t kl_w = 16;
  std::size_t ed_w = 8;
  for (const auto& l : r.layers) {
    name_w = std::max(name_w, l.layer.size());
    kl_w = std::max(kl_w, detail::shortest(l.kl).size() + 1);
    ed_w = std::max(ed_w, detail::shortest(l.ed).size() + 1);
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(name_w)) << "layer" << "  " << std::setw(static_cast<int>(kl_w))
      << "D_KL(A||B)" << "  " << std::setw(static_cast<int>(ed_w)) << "D_ED" << "  kinds\n";
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    const auto& l = r.layers[i];
    std::string kinds;
    for (const auto& k : l.kinds) kinds += (kinds.empty() ? "" : "+") + k;
    out << std::setw(static_cast<int>(name_w)) << l.layer << "  " << std::setw(static_cast<int>(kl_w))
        << (detail::shortest(l.kl) + (i == r.argmax_kl ? "*" : "")) << "  " << std::setw(static_cast<int>(ed_w))
        << (detail::shortest(l.ed) + (i == r.argmax_ed ? "*" : "")) << "  " << kinds << "\n";
  }
  return out.str();
}

}  // namespace tunescope
