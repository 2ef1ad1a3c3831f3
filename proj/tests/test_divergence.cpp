#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "tunescope/divergence.hpp"
#include "tunescope/rng.hpp"

using namespace tunescope;

namespace {

// Independent histogram: explicit edge comparisons, then smoothing.
std::vector<double> oracle_mass(const std::vector<double>& values, double lo, double hi, std::size_t bins, double eps) {
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  edges[bins] = hi;  // the range is [min, max] exactly
  std::vector<double> counts(bins, 0.0);
  for (double v : values) {
    for (std::size_t b = 0; b < bins; ++b) {
      const bool last = b + 1 == bins;
      if (v >= edges[b] && (v < edges[b + 1] || (last && v <= edges[b + 1]))) {
        counts[b] += 1;
        break;
      }
    }
  }
  double total = 0.0;
  for (auto& c : counts) {
    c = c / static_cast<double>(values.size()) + eps;
    total += c;
  }
  for (auto& c : counts) c /= total;
  return counts;
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

ProbabilityHistogram two_bin(double a, double b) { return {{0.0, 0.5, 1.0}, {a, b}}; }

Checkpoint two_layer(float shift_fc1) {
  Checkpoint c;
  std::vector<float> w1, w2;
  for (int i = 0; i < 12; ++i) w1.push_back(0.1f * static_cast<float>(i) - 0.4f + shift_fc1);
  for (int i = 0; i < 6; ++i) w2.push_back(0.05f * static_cast<float>(i * i) - 0.3f);
  c.tensors.push_back(make_tensor("fc1.weight", {3, 4}, w1));
  c.tensors.push_back(make_tensor("fc1.bias", {3}, {shift_fc1, 0.2f + shift_fc1, -0.1f + shift_fc1}));
  c.tensors.push_back(make_tensor("fc2.weight", {2, 3}, w2));
  c.tensors.push_back(make_tensor("fc2.bias", {2}, {0.0f, 0.1f}));
  return c;
}

}  // namespace

TEST(Histogram, FourValuesTwoBins) {
  const std::vector<double> a{0, 1, 2, 3};
  const auto [p, q] = estimate_histogram_pair(a, a, {2, 1e-10});
  EXPECT_EQ(p.edges, (std::vector<double>{0.0, 1.5, 3.0}));
  EXPECT_NEAR(p.mass[0], 0.5, 1e-9);
  EXPECT_NEAR(p.mass[1], 0.5, 1e-9);
  EXPECT_EQ(p.mass, q.mass);
}

TEST(Histogram, ConstantPopulationCollapsesToOneBin) {
  const std::vector<double> a{5, 5, 5};
  const auto [p, q] = estimate_histogram_pair(a, a);
  ASSERT_EQ(p.mass.size(), 1u);
  EXPECT_EQ(p.mass[0], 1.0);
  EXPECT_EQ(q.mass[0], 1.0);
  EXPECT_EQ(kl_divergence(p, q), 0.0);
}

TEST(Histogram, DisjointPopulationsShareEdges) {
  const std::vector<double> a{0, 1}, b{10, 11};
  const auto [p, q] = estimate_histogram_pair(a, b, {2, 1e-10});
  EXPECT_EQ(p.edges, (std::vector<double>{0.0, 5.5, 11.0}));
  EXPECT_EQ(p.edges, q.edges);
  EXPECT_NEAR(p.mass[0], 1.0, 1e-9);
  EXPECT_NEAR(p.mass[1], 0.0, 1e-9);
  EXPECT_NEAR(q.mass[0], 0.0, 1e-9);
  EXPECT_NEAR(q.mass[1], 1.0, 1e-9);
  EXPECT_GT(p.mass[1], 0.0);
}

TEST(Histogram, MatchesIndependentBinningOnRandomPopulations) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t bins = 1 + rng.index(40);
    std::vector<double> a(1 + rng.index(300)), b(1 + rng.index(300));
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.uniform(-2, 3);
    const auto [p, q] = estimate_histogram_pair(a, b, {bins, 1e-6});
    double lo = a[0], hi = a[0];
    for (const auto* pop : {&a, &b})
      for (double v : *pop) lo = std::min(lo, v), hi = std::max(hi, v);
    const auto pa = oracle_mass(a, lo, hi, bins, 1e-6);
    const auto pb = oracle_mass(b, lo, hi, bins, 1e-6);
    for (std::size_t i = 0; i < bins; ++i) {
      EXPECT_NEAR(p.mass[i], pa[i], 1e-12);
      EXPECT_NEAR(q.mass[i], pb[i], 1e-12);
    }
    EXPECT_NEAR(sum(p.mass), 1.0, 1e-9);
    EXPECT_NEAR(sum(q.mass), 1.0, 1e-9);
    for (std::size_t i = 0; i + 1 < p.edges.size(); ++i) EXPECT_LT(p.edges[i], p.edges[i + 1]);
  }
}

TEST(Histogram, MassNeverBelowSmoothingFloor) {
  const std::vector<double> a{0, 0, 0, 1}, b{0.5};
  const double eps = 1e-4;
  const auto [p, q] = estimate_histogram_pair(a, b, {10, eps});
  const double floor = eps / (1.0 + 10 * eps);
  for (double m : p.mass) EXPECT_GE(m, floor * (1 - 1e-12));
  for (double m : q.mass) EXPECT_GE(m, floor * (1 - 1e-12));
}

TEST(Histogram, RejectsBadInput) {
  const std::vector<double> empty, one{1.0};
  EXPECT_THROW(estimate_histogram_pair(empty, one), Error);
  EXPECT_THROW(estimate_histogram_pair(one, one, {0, 1e-10}), Error);
  const std::vector<double> nan{std::nan("")};
  EXPECT_THROW(estimate_histogram_pair(nan, one), Error);
}

TEST(Kl, IdenticalIsExactlyZero) {
  const auto p = two_bin(0.3, 0.7);
  EXPECT_EQ(kl_divergence(p, p), 0.0);
}

TEST(Kl, TwoBinExampleAndAsymmetry) {
  const double forward = kl_divergence(two_bin(0.5, 0.5), two_bin(0.25, 0.75));
  const double reverse = kl_divergence(two_bin(0.25, 0.75), two_bin(0.5, 0.5));
  EXPECT_NEAR(forward, 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(forward, 0.14384, 1e-5);
  EXPECT_NEAR(reverse, 0.13081, 1e-5);
  EXPECT_NE(forward, reverse);
}

TEST(Kl, EdgeMismatchIsIncomparable) {
  ProbabilityHistogram p{{0, 1, 2}, {0.5, 0.5}};
  ProbabilityHistogram q{{0, 1, 3}, {0.5, 0.5}};
  try {
    kl_divergence(p, q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("incomparable histograms"), std::string::npos);
  }
}

TEST(Kl, NonNegativeOnRandomPairs) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(50), b(50);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal() * rng.uniform(0.5, 2.0) + rng.uniform(-1, 1);
    const auto [p, q] = estimate_histogram_pair(a, b, {20, 1e-10});
    EXPECT_GE(kl_divergence(p, q), 0.0);
  }
}

TEST(Kl, ScaleCovariance) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(200), b(200);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal() + 0.5;
    // Power-of-two factors rescale exactly, so binning is unchanged bit for bit.
    for (double k : {0.25, 2.0, 8.0}) {
      std::vector<double> ka(a), kb(b);
      for (auto& v : ka) v *= k;
      for (auto& v : kb) v *= k;
      const auto [p, q] = estimate_histogram_pair(a, b);
      const auto [kp, kq] = estimate_histogram_pair(ka, kb);
      EXPECT_EQ(kl_divergence(p, q), kl_divergence(kp, kq));
    }
  }
}

TEST(Euclidean, Examples) {
  const std::vector<double> z{0, 0}, t{3, 4}, three{1, 2, 3};
  EXPECT_EQ(euclidean_distance(z, t), 5.0);
  EXPECT_EQ(euclidean_distance(t, t), 0.0);
  try {
    euclidean_distance(z, three, "fc7");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("fc7"), std::string::npos);
  }
}

TEST(Euclidean, IsAMetric) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(10), b(10), c(10);
    for (auto* v : {&a, &b, &c})
      for (auto& x : *v) x = rng.normal();
    const double ab = euclidean_distance(a, b), ba = euclidean_distance(b, a);
    EXPECT_EQ(ab, ba);
    EXPECT_LE(ab, euclidean_distance(a, c) + euclidean_distance(c, b) + 1e-12);
  }
}

TEST(Diverge, IdenticalCheckpointsGiveZeros) {
  const auto c = two_layer(0.0f);
  const auto r = diverge_checkpoints(c, c);
  ASSERT_EQ(r.layers.size(), 2u);
  for (const auto& l : r.layers) {
    EXPECT_EQ(l.kl, 0.0);
    EXPECT_EQ(l.ed, 0.0);
    EXPECT_EQ(l.kinds, (std::vector<std::string>{"weight", "bias"}));
  }
  EXPECT_EQ(r.layers[0].count_a, 15u);
}

TEST(Diverge, ShiftedLayerIsFlagged) {
  const auto a = two_layer(10.0f);
  const auto b = two_layer(0.0f);
  const auto r = diverge_checkpoints(a, b);
  ASSERT_EQ(r.layers.size(), 2u);
  EXPECT_EQ(r.layers[0].layer, "fc1");
  EXPECT_GT(r.layers[0].kl, 0.0);
  EXPECT_GT(r.layers[0].ed, 0.0);
  EXPECT_EQ(r.layers[1].kl, 0.0);
  EXPECT_EQ(r.layers[1].ed, 0.0);
  EXPECT_EQ(r.argmax_kl, 0u);
  EXPECT_EQ(r.argmax_ed, 0u);
  // ED oracle: every one of the 15 values moved by exactly 10.
  EXPECT_NEAR(r.layers[0].ed, std::sqrt(15.0) * 10.0, 1e-4);
}

TEST(Diverge, KlMatchesIndependentComputation) {
  const auto a = two_layer(0.3f);
  const auto b = two_layer(0.0f);
  const auto r = diverge_checkpoints(a, b);
  std::vector<double> pa, pb;
  for (const char* n : {"fc1.weight", "fc1.bias"}) {
    for (float v : a.find(n)->values) pa.push_back(v);
    for (float v : b.find(n)->values) pb.push_back(v);
  }
  double lo = pa[0], hi = pa[0];
  for (const auto* pop : {&pa, &pb})
    for (double v : *pop) lo = std::min(lo, v), hi = std::max(hi, v);
  const auto p = oracle_mass(pa, lo, hi, 100, 1e-10);
  const auto q = oracle_mass(pb, lo, hi, 100, 1e-10);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  EXPECT_NEAR(r.layers[0].kl, kl, 1e-9);
}

TEST(Diverge, ExcludingEverythingIsAnError) {
  const auto c = two_layer(0.0f);
  DivergenceOptions opts;
  opts.exclude = {"fc1", "fc2"};
  try {
    diverge_checkpoints(c, c, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no paired layers"), std::string::npos);
  }
}

TEST(Diverge, JsonAndTextAgree) {
  const auto r = diverge_checkpoints(two_layer(1.0f), two_layer(0.0f));
  const auto j = to_json(r);
  std::istringstream text(to_text_table(r));
  std::string line;
  std::getline(text, line);
  EXPECT_NE(line.find("D_KL(A||B)"), std::string::npos);
  for (const auto& l : j["layers"]) {
    ASSERT_TRUE(std::getline(text, line));
    std::istringstream row(line);
    std::string name, kl, ed;
    row >> name >> kl >> ed;
    EXPECT_EQ(name, l["layer"].get<std::string>());
    // Values print in shortest round-trip form, so parsing recovers them exactly.
    EXPECT_EQ(std::stod(kl), l["kl"].get<double>());
    EXPECT_EQ(std::stod(ed), l["ed"].get<double>());
  }
  EXPECT_TRUE(j["layers"][0]["max_kl"].get<bool>());
}
