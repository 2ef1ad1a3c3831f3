#pragma once

// LIME for grayscale images. An instance is explained over its superpixels:
// random on/off masks z' switch segments between their original pixels and
// a replacement value, the black-box predictor scores each masked image,
// samples are weighted by pi(z) = exp(-D(1, z')^2 / sigma^2), and a sparse
// affine model g(z') = w . z' + b is fitted by weighted ridge regression.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tunescope/error.hpp"
#include "tunescope/image.hpp"
#include "tunescope/predictor.hpp"
#include "tunescope/rng.hpp"
#include "tunescope/segmentation.hpp"

namespace tunescope {

enum class MaskDistance { cosine, euclidean };

inline std::string to_string(MaskDistance d) { return d == MaskDistance::cosine ? "cosine" : "euclidean"; }

struct SegmentMeanReplacement {};
struct ConstantReplacement {
  std::uint8_t gray = 0;
};
using Replacement = std::variant<SegmentMeanReplacement, ConstantReplacement>;

struct LimeConfig {
  std::size_t num_samples = 1000;
  double sigma = 0.25;
  MaskDistance distance = MaskDistance::cosine;
  std::size_t max_features = 5;
  double ridge_lambda = 1.0;
  Replacement replacement = SegmentMeanReplacement{};
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;

  void validate() const {
    if (num_samples == 0) throw Error("LIME num_samples must be positive");
    if (max_features == 0) throw Error("LIME max_features must be positive");
    if (num_samples < max_features + 1)
      throw Error("LIME num_samples must exceed max_features (" + std::to_string(num_samples) + " <= " +
                  std::to_string(max_features) + ")");
    if (!(sigma > 0.0)) throw Error("LIME kernel width sigma must be positive");
    if (!(ridge_lambda >= 0.0)) throw Error("LIME ridge_lambda must be non-negative");
    if (batch_size == 0) throw Error("LIME batch_size must be positive");
  }
};

inline nlohmann::json to_json(const LimeConfig& cfg) {
  nlohmann::json j{{"num_samples", cfg.num_samples},   {"sigma", cfg.sigma},
                   {"distance", to_string(cfg.distance)}, {"max_features", cfg.max_features},
                   {"ridge_lambda", cfg.ridge_lambda}, {"seed", cfg.seed},
                   {"batch_size", cfg.batch_size}};
  if (const auto* c = std::get_if<ConstantReplacement>(&cfg.replacement))
    j["replacement"] = {{"kind", "constant"}, {"gray", c->gray}};
  else
    j["replacement"] = {{"kind", "segment_mean"}};
  return j;
}

struct PerturbationSet {
  Eigen::MatrixXd masks;           // N x S, 0/1; row 0 all ones
  Eigen::MatrixXd responses;       // N x C
  Eigen::VectorXd kernel_weights;  // N, in (0, 1]
};

// pi = exp(-D(1, mask)^2 / sigma^2). Cosine distance against the all-ones
// vector is 1 - sqrt(k / S) for k ones; an all-zero mask is at distance 1.
// Euclidean distance is sqrt(S - k).
inline double mask_distance(const Eigen::Ref<const Eigen::VectorXd>& mask, MaskDistance kind) {
  const auto s = static_cast<double>(mask.size());
  const double ones = mask.sum();
  if (kind == MaskDistance::euclidean) return std::sqrt(std::max(0.0, s - ones));
  if (ones <= 0.0) return 1.0;
  return 1.0 - ones / (std::sqrt(s) * std::sqrt(ones));
}

inline double locality_kernel(const Eigen::Ref<const Eigen::VectorXd>& mask, const LimeConfig& cfg) {
  const double d = mask_distance(mask, cfg.distance);
  // Stays in (0, 1] even when exp underflows for far-away masks.
  return std::max(std::exp(-(d * d) / (cfg.sigma * cfg.sigma)), std::numeric_limits<double>::min());
}

// Replacement gray level per segment.
inline std::vector<std::uint8_t> replacement_values(const GrayImage& image, const SegmentMap& segmap,
                                                    const Replacement& replacement) {
  std::vector<std::uint8_t> values(segmap.segment_count, 0);
  if (const auto* c = std::get_if<ConstantReplacement>(&replacement)) {
    std::fill(values.begin(), values.end(), c->gray);
    return values;
  }
  std::vector<double> sum(segmap.segment_count, 0.0);
  std::vector<double> count(segmap.segment_count, 0.0);
  for (std::size_t p = 0; p < image.size(); ++p) {
    const auto s = static_cast<std::size_t>(segmap.labels[p]);
    sum[s] += image.pixels[p];
    count[s] += 1.0;
  }
  for (std::size_t s = 0; s < values.size(); ++s) values[s] = clamp_u8(count[s] > 0 ? sum[s] / count[s] : 0.0);
  return values;
}

inline GrayImage apply_mask(const GrayImage& image, const SegmentMap& segmap,
                            const Eigen::Ref<const Eigen::VectorXd>& mask, const std::vector<std::uint8_t>& fill) {
  GrayImage out = image;
  for (std::size_t p = 0; p < image.size(); ++p) {
    const auto s = static_cast<Eigen::Index>(segmap.labels[p]);
    if (mask[s] == 0.0) out.pixels[p] = fill[static_cast<std::size_t>(s)];
  }
  return out;
}

inline PerturbationSet sample_perturbations(const GrayImage& image, const SegmentMap& segmap,
                                            const Predictor& predictor, const LimeConfig& cfg) {
  cfg.validate();
  if (segmap.width != image.width || segmap.height != image.height)
    throw Error("segment map does not match the image dimensions");
  const auto n = static_cast<Eigen::Index>(cfg.num_samples);
  const auto s = static_cast<Eigen::Index>(segmap.segment_count);
  const auto classes = predictor.class_count();

  PerturbationSet set;
  set.masks.setOnes(n, s);
  Rng rng(cfg.seed);
  for (Eigen::Index i = 1; i < n; ++i)
    for (Eigen::Index j = 0; j < s; ++j) set.masks(i, j) = rng.coin() ? 1.0 : 0.0;

  set.kernel_weights.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) set.kernel_weights[i] = locality_kernel(set.masks.row(i).transpose(), cfg);

  const auto fill = replacement_values(image, segmap, cfg.replacement);
  set.responses.resize(n, static_cast<Eigen::Index>(classes));

  const std::size_t batches = (cfg.num_samples + cfg.batch_size - 1) / cfg.batch_size;
  auto run_batch = [&](std::size_t b) {
    const std::size_t begin = b * cfg.batch_size;
    const std::size_t end = std::min(cfg.num_samples, begin + cfg.batch_size);
    std::vector<GrayImage> masked;
    masked.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i)
      masked.push_back(apply_mask(image, segmap, set.masks.row(static_cast<Eigen::Index>(i)).transpose(), fill));
    try {
      const Eigen::MatrixXd probs = predictor.predict(masked);
      check_probability_rows(probs, masked.size(), classes);
      set.responses.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = probs;
    } catch (const std::exception& e) {
      throw Error("predictor failed on batch " + std::to_string(b) + ": " + e.what());
    }
  };

  if (predictor.concurrency() == Concurrency::concurrent_ok && batches > 1) {
    std::vector<std::future<void>> jobs;
    jobs.reserve(batches);
    for (std::size_t b = 0; b < batches; ++b) jobs.push_back(std::async(std::launch::async, run_batch, b));
    for (auto& job : jobs) job.get();
  } else {
    for (std::size_t b = 0; b < batches; ++b) run_batch(b);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Weighted ridge fit
// ---------------------------------------------------------------------------

struct WeightedRidgeFit {
  Eigen::VectorXd coefficients;  // per column of the design
  double intercept = 0.0;
  double r2 = 1.0;
  bool rank_deficient = false;
};

// Minimizes sum_i w_i (y_i - b - x_i . c)^2 + lambda |c|^2 (b unpenalized)
// as a stacked least-squares problem solved by complete orthogonal
// decomposition, which yields the minimum-norm solution when singular.
inline WeightedRidgeFit weighted_ridge(const Eigen::Ref<const Eigen::MatrixXd>& design,
                                       const Eigen::Ref<const Eigen::VectorXd>& target,
                                       const Eigen::Ref<const Eigen::VectorXd>& weights, double lambda) {
  const Eigen::Index n = design.rows();
  const Eigen::Index k = design.cols();
  WeightedRidgeFit fit;

  const double wsum = weights.sum();
  if (!(wsum > 0.0)) throw Error("weighted ridge: all sample weights are zero");
  const double ymean = weights.dot(target) / wsum;
  const double ss_tot = (weights.array() * (target.array() - ymean).square()).sum();

  if (target.size() == 0 || (target.array() == target[0]).all() || ss_tot == 0.0) {
    // Constant target: the fit is exact with zero slopes.
    fit.coefficients = Eigen::VectorXd::Zero(k);
    fit.intercept = target.size() > 0 ? target[0] : 0.0;
    fit.r2 = 1.0;
    return fit;
  }

  const Eigen::Index extra = lambda > 0.0 ? k : 0;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + extra, k + 1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + extra);
  const Eigen::VectorXd sw = weights.array().sqrt();
  a.topLeftCorner(n, 1) = sw;
  a.topRightCorner(n, k) = sw.asDiagonal() * design;
  rhs.head(n) = sw.cwiseProduct(target);
  if (extra > 0) a.bottomRightCorner(k, k).diagonal().setConstant(std::sqrt(lambda));

  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  const Eigen::VectorXd beta = cod.solve(rhs);
  fit.rank_deficient = cod.rank() < k + 1;
  fit.intercept = beta[0];
  fit.coefficients = beta.tail(k);

  const Eigen::VectorXd fitted = (design * fit.coefficients).array() + fit.intercept;
  const double ss_res = (weights.array() * (target - fitted).array().square()).sum();
  fit.r2 = std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
  return fit;
}

struct FeatureWeight {
  std::size_t segment = 0;
  double weight = 0.0;

  bool operator==(const FeatureWeight&) const = default;
};

struct Explanation {
  std::size_t target_class = 0;
  std::vector<FeatureWeight> features;  // sorted by |weight| descending
  double intercept = 0.0;
  double local_fit_r2 = 1.0;
  bool rank_deficient = false;
  LimeConfig config;
};

namespace detail {
inline bool by_magnitude(const FeatureWeight& a, const FeatureWeight& b) {
  const double ma = std::abs(a.weight), mb = std::abs(b.weight);
  if (ma != mb) return ma > mb;
  return a.segment < b.segment;
}
}  // namespace detail

// Two stages: a ridge fit over every segment picks the max_features largest
// |w|; the kept segments are refitted with an unpenalized intercept.
inline Explanation fit_local_model(const PerturbationSet& set, std::size_t target_class, const LimeConfig& cfg) {
  cfg.validate();
  if (target_class >= static_cast<std::size_t>(set.responses.cols()))
    throw Error("target class " + std::to_string(target_class) + " out of range for " +
                std::to_string(set.responses.cols()) + " classes");
  if (set.masks.rows() != set.responses.rows() || set.masks.rows() != set.kernel_weights.size())
    throw Error("perturbation set has inconsistent row counts");

  const Eigen::VectorXd y = set.responses.col(static_cast<Eigen::Index>(target_class));
  const auto s = static_cast<std::size_t>(set.masks.cols());

  std::vector<std::size_t> kept(s);
  std::iota(kept.begin(), kept.end(), 0);
  if (s > cfg.max_features) {
    const auto full = weighted_ridge(set.masks, y, set.kernel_weights, cfg.ridge_lambda);
    std::vector<FeatureWeight> ranked;
    for (std::size_t j = 0; j < s; ++j) ranked.push_back({j, full.coefficients[static_cast<Eigen::Index>(j)]});
    std::sort(ranked.begin(), ranked.end(), detail::by_magnitude);
    kept.clear();
    for (std::size_t j = 0; j < cfg.max_features; ++j) kept.push_back(ranked[j].segment);
    std::sort(kept.begin(), kept.end());
  }

  Eigen::MatrixXd design(set.masks.rows(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t j = 0; j < kept.size(); ++j)
    design.col(static_cast<Eigen::Index>(j)) = set.masks.col(static_cast<Eigen::Index>(kept[j]));
  const auto fit = weighted_ridge(design, y, set.kernel_weights, cfg.ridge_lambda);

  Explanation ex;
  ex.target_class = target_class;
  ex.intercept = fit.intercept;
  ex.local_fit_r2 = fit.r2;
  ex.rank_deficient = fit.rank_deficient;
  ex.config = cfg;
  for (std::size_t j = 0; j < kept.size(); ++j)
    ex.features.push_back({kept[j], fit.coefficients[static_cast<Eigen::Index>(j)]});
  std::sort(ex.features.begin(), ex.features.end(), detail::by_magnitude);
  return ex;
}

// ---------------------------------------------------------------------------
// End-to-end
// ---------------------------------------------------------------------------

struct GridSegmenter {
  std::size_t cell = 8;
};
using Segmenter = std::variant<SlicParams, GridSegmenter>;

inline SegmentMap segment(const GrayImage& image, const Segmenter& segmenter) {
  if (const auto* g = std::get_if<GridSegmenter>(&segmenter)) return segment_grid(image, g->cell);
  return segment_slic(image, std::get<SlicParams>(segmenter));
}

struct ExplainResult {
  SegmentMap segments;
  Eigen::RowVectorXd original_probs;
  std::vector<Explanation> explanations;  // one per requested class
};

// Explains the requested classes, or the argmax class of f(image) when none
// are requested.
inline ExplainResult explain_instance(const GrayImage& image, const Predictor& predictor, const Segmenter& segmenter,
                                      const LimeConfig& cfg, std::vector<std::size_t> classes = {}) {
  ExplainResult result;
  result.segments = segment(image, segmenter);
  const auto set = sample_perturbations(image, result.segments, predictor, cfg);
  result.original_probs = set.responses.row(0);
  if (classes.empty()) {
    Eigen::Index best = 0;
    result.original_probs.maxCoeff(&best);
    classes.push_back(static_cast<std::size_t>(best));
  }
  for (auto c : classes) result.explanations.push_back(fit_local_model(set, c, cfg));
  return result;
}

inline nlohmann::json to_json(const Explanation& ex) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& f : ex.features) features.push_back({{"segment", f.segment}, {"weight", f.weight}});
  return {{"class", ex.target_class},
          {"intercept", ex.intercept},
          {"r2", ex.local_fit_r2},
          {"rank_deficient", ex.rank_deficient},
          {"features", features},
          {"config", to_json(ex.config)}};
}

// ---------------------------------------------------------------------------
// Overlays
// ---------------------------------------------------------------------------

enum class OverlayMode { keep_positive, heat };

inline std::string to_string(OverlayMode m) { return m == OverlayMode::keep_positive ? "keep_positive" : "heat"; }

inline OverlayMode parse_overlay_mode(const std::string& s) {
  if (s == "keep_positive") return OverlayMode::keep_positive;
  if (s == "heat") return OverlayMode::heat;
  throw Error("unknown overlay mode \"" + s + "\"");
}

inline constexpr std::uint8_t kMidGray = 128;

// Per-pixel signed brightness offset for heat overlays, before clipping:
// the largest |weight| maps to +/-127.
inline std::vector<double> heat_offsets(const SegmentMap& segmap, const Explanation& ex) {
  std::vector<double> per_segment(segmap.segment_count, 0.0);
  double peak = 0.0;
  for (const auto& f : ex.features) peak = std::max(peak, std::abs(f.weight));
  if (peak > 0.0)
    for (const auto& f : ex.features) per_segment.at(f.segment) = 127.0 * f.weight / peak;
  std::vector<double> out(segmap.labels.size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = per_segment[static_cast<std::size_t>(segmap.labels[p])];
  return out;
}

inline GrayImage render_overlay(const GrayImage& image, const SegmentMap& segmap, const Explanation& ex,
                                OverlayMode mode) {
  for (const auto& f : ex.features)
    if (f.segment >= segmap.segment_count)
      throw Error("explanation refers to segment " + std::to_string(f.segment) + " but the map has " +
                  std::to_string(segmap.segment_count));
  GrayImage out(image.width, image.height, kMidGray);
  if (mode == OverlayMode::keep_positive) {
    std::vector<bool> keep(segmap.segment_count, false);
    for (const auto& f : ex.features)
      if (f.weight > 0.0) keep[f.segment] = true;
    for (std::size_t p = 0; p < image.size(); ++p)
      if (keep[static_cast<std::size_t>(segmap.labels[p])]) out.pixels[p] = image.pixels[p];
    return out;
  }
  const auto offsets = heat_offsets(segmap, ex);
  for (std::size_t p = 0; p < image.size(); ++p) out.pixels[p] = clamp_u8(image.pixels[p] + offsets[p]);
  return out;
}

}  // namespace tunescope
