#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "tunescope/data.hpp"
#include "tunescope/evaluation.hpp"
#include "tunescope/predictors.hpp"
#include "tunescope/sampling.hpp"

using namespace tunescope;

namespace {

std::vector<std::size_t> labels_from_counts(const std::vector<std::size_t>& counts) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < counts.size(); ++c) out.insert(out.end(), counts[c], c);
  return out;
}

HeadSpec head_of(HeadKind kind) {
  HeadSpec h;
  h.kind = kind;
  h.fc.epochs = 3;
  h.svm.epochs = 3;
  return h;
}

}  // namespace

TEST(Folds, NineSamplesSixAThreeB) {
  const auto labels = labels_from_counts({6, 3});
  const auto plan = stratified_folds(labels, 3, 1);
  for (std::size_t f = 0; f < 3; ++f) {
    EXPECT_EQ(plan.census[f][0], 2u);
    EXPECT_EQ(plan.census[f][1], 1u);
    EXPECT_EQ(plan.test_indices(f).size(), 3u);
  }
}

TEST(Folds, SingleClassSplitsEvenly) {
  const std::vector<std::size_t> labels(6, 0);
  const auto plan = stratified_folds(labels, 3, 2);
  for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(plan.test_indices(f).size(), 2u);
}

TEST(Folds, TooFewSamplesNamesTheClass) {
  const auto labels = labels_from_counts({5, 5, 2});
  try {
    stratified_folds(labels, 3, 0);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(stratified_folds(std::vector<std::size_t>{}, 3, 0), Error);
  EXPECT_THROW(stratified_folds(labels, 1, 0), Error);
}

TEST(Folds, PartitionAndProportionalityProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.index(4);
    const std::size_t classes = 1 + rng.index(5);
    std::vector<std::size_t> counts;
    for (std::size_t c = 0; c < classes; ++c) counts.push_back(k + rng.index(40));
    auto labels = labels_from_counts(counts);
    rng.shuffle(labels.begin(), labels.end());
    const auto plan = stratified_folds(labels, k, rng.next_u64());

    std::vector<std::size_t> seen(labels.size(), 0);
    std::size_t smallest = labels.size(), largest = 0;
    for (std::size_t f = 0; f < k; ++f) {
      const auto test = plan.test_indices(f);
      for (auto i : test) ++seen[i];
      smallest = std::min(smallest, test.size());
      largest = std::max(largest, test.size());
      for (std::size_t c = 0; c < classes; ++c) {
        std::size_t in_fold = 0;
        for (auto i : test) in_fold += labels[i] == c;
        EXPECT_EQ(in_fold, plan.census[f][c]);
        const double exact = static_cast<double>(counts[c]) / static_cast<double>(k);
        EXPECT_LE(std::abs(static_cast<double>(in_fold) - exact), 1.0);
      }
    }
    for (auto s : seen) EXPECT_EQ(s, 1u);
    EXPECT_LE(largest - smallest, 1u);
  }
}

TEST(Folds, Deterministic) {
  const auto labels = labels_from_counts({20, 7, 9});
  EXPECT_EQ(stratified_folds(labels, 3, 5).assignments, stratified_folds(labels, 3, 5).assignments);
  EXPECT_NE(stratified_folds(labels, 3, 5).assignments, stratified_folds(labels, 3, 6).assignments);
}

TEST(Sampler, WeightsEqualiseClassMass) {
  const auto labels = labels_from_counts({8, 2});
  const auto w = balanced_weights(labels);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? b : a) += w[i];
  EXPECT_DOUBLE_EQ(a / (a + b), 0.5);
  EXPECT_DOUBLE_EQ(b / (a + b), 0.5);
  const auto even = balanced_weights(labels_from_counts({5, 5}));
  for (auto v : even) EXPECT_EQ(v, even[0]);
}

TEST(Sampler, EmpiricalFrequencyIsUniform) {
  const auto labels = labels_from_counts({8, 2});
  const auto draws = balanced_sampler(labels, 10000, 7);
  std::size_t b = 0;
  for (auto d : draws) b += labels[d];
  EXPECT_NEAR(static_cast<double>(b) / 10000.0, 0.5, 0.03);
  EXPECT_EQ(draws, balanced_sampler(labels, 10000, 7));
  EXPECT_THROW(balanced_sampler(std::vector<std::size_t>{}, 10, 0), Error);
}

TEST(Sampler, FourClassConvergence) {
  const auto labels = labels_from_counts({400, 50, 25, 25});
  const auto draws = balanced_sampler(labels, 10000, 8);
  std::vector<double> freq(4, 0.0);
  for (auto d : draws) freq[labels[d]] += 1.0 / 10000.0;
  for (auto f : freq) EXPECT_NEAR(f, 0.25, 0.03);
}

TEST(Metrics, PerfectPredictions) {
  const std::vector<std::size_t> y{0, 1, 2, 1, 0};
  const auto m = confusion_and_metrics(y, y, 3);
  EXPECT_EQ(m.accuracy, 1.0);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(m.precision[c], 1.0);
    EXPECT_EQ(m.recall[c], 1.0);
  }
}

TEST(Metrics, HandComputedPrecisionAndRecall) {
  // Class 1: TP=3, FP=1, FN=2.
  const std::vector<std::size_t> truth{1, 1, 1, 1, 1, 0, 0, 0};
  const std::vector<std::size_t> pred{1, 1, 1, 0, 0, 1, 0, 0};
  const auto m = confusion_and_metrics(pred, truth, 2);
  EXPECT_DOUBLE_EQ(m.precision[1], 0.75);
  EXPECT_DOUBLE_EQ(m.recall[1], 0.6);
  EXPECT_EQ(m.confusion[1][1], 3u);
  EXPECT_EQ(m.confusion[0][1], 1u);
  EXPECT_EQ(m.confusion[1][0], 2u);
  EXPECT_DOUBLE_EQ(m.accuracy, 5.0 / 8.0);
}

TEST(Metrics, NeverPredictedClassIsFlagged) {
  const std::vector<std::size_t> truth{0, 1, 2};
  const std::vector<std::size_t> pred{0, 0, 0};
  const auto m = confusion_and_metrics(pred, truth, 4);
  EXPECT_EQ(m.precision[1], 0.0);
  EXPECT_TRUE(m.precision_undefined[1]);
  EXPECT_FALSE(m.precision_undefined[0]);
  EXPECT_TRUE(m.recall_undefined[3]);
  EXPECT_FALSE(m.recall_undefined[2]);
  EXPECT_THROW(confusion_and_metrics(std::vector<std::size_t>{4}, std::vector<std::size_t>{0}, 4), Error);
  EXPECT_THROW(confusion_and_metrics(pred, std::vector<std::size_t>{0}, 4), Error);
}

TEST(Metrics, IntegerIdentitiesProperty) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + rng.index(5), n = 1 + rng.index(80);
    std::vector<std::size_t> truth(n), pred(n);
    for (auto& v : truth) v = rng.index(c);
    for (auto& v : pred) v = rng.index(c);
    const auto m = confusion_and_metrics(pred, truth, c);
    std::size_t trace = 0;
    for (std::size_t a = 0; a < c; ++a) {
      std::size_t row = 0;
      for (std::size_t p = 0; p < c; ++p) row += m.confusion[a][p];
      EXPECT_EQ(row, static_cast<std::size_t>(std::count(truth.begin(), truth.end(), a)));
      trace += m.confusion[a][a];
      EXPECT_GE(m.precision[a], 0.0);
      EXPECT_LE(m.precision[a], 1.0);
      EXPECT_GE(m.recall[a], 0.0);
      EXPECT_LE(m.recall[a], 1.0);
    }
    EXPECT_EQ(m.accuracy, static_cast<double>(trace) / static_cast<double>(n));
  }
}

TEST(Aggregate, PopulationStd) {
  const std::vector<double> constant{0.4, 0.4, 0.4};
  EXPECT_EQ(mean_std(constant).std, 0.0);
  const std::vector<double> v{1.0, 2.0, 3.0};
  EXPECT_DOUBLE_EQ(mean_std(v).mean, 2.0);
  EXPECT_DOUBLE_EQ(mean_std(v).std, std::sqrt(2.0 / 3.0));
  EXPECT_EQ(percent({0.87654, 0.01234}), "87.65±1.23%");
}

TEST(Standardizer, UsesPopulationStatsAndKeepsConstantColumns) {
  Eigen::MatrixXd x(4, 2);
  x << 1, 5, 3, 5, 5, 5, 7, 5;
  const auto s = fit_standardizer(x);
  EXPECT_DOUBLE_EQ(s.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.scale[0], 1.0 / std::sqrt(5.0));
  EXPECT_EQ(s.scale[1], 1.0);
  const auto z = s.apply(x);
  EXPECT_NEAR(z.col(0).mean(), 0.0, 1e-15);
  EXPECT_NEAR(z.col(0).squaredNorm() / 4.0, 1.0, 1e-12);
  EXPECT_TRUE((z.col(1).array() == 0.0).all());
}

TEST(Experiment, KnnMemorizesDuplicatedTestFold) {
  const auto ds = synthesize_dataset({6, 6, 6, 6}, 32, 10);
  const auto pixels = images_to_matrix(ds);
  const auto labels = ds.labels();
  const auto n = pixels.rows();
  // Every sample appears twice, once in each fold.
  Eigen::MatrixXd x(2 * n, pixels.cols());
  x << pixels, pixels;
  std::vector<std::size_t> y = labels;
  y.insert(y.end(), labels.begin(), labels.end());
  FoldPlan plan;
  plan.k = 2;
  plan.assignments.assign(static_cast<std::size_t>(2 * n), 0);
  std::fill(plan.assignments.begin() + n, plan.assignments.end(), 1);
  HeadSpec head = head_of(HeadKind::knn);
  head.knn_k = 1;
  for (bool standardize : {false, true}) {
    head.standardize = standardize;
    const auto r = run_experiment(x, y, ds.class_names, head, plan, false, 0);
    EXPECT_EQ(r.accuracy.mean, 1.0);
    EXPECT_EQ(r.accuracy.std, 0.0);
    EXPECT_EQ(r.standardized, standardize);
  }
}

TEST(Experiment, NoLeakageAndBalancingTouchesOnlyTraining) {
  const auto ds = synthesize_dataset({30, 6, 4, 4}, 32, 11);
  const auto x = images_to_matrix(ds);
  const auto labels = ds.labels();
  const auto plan = stratified_folds(labels, 3, 11);
  for (auto kind : {HeadKind::knn, HeadKind::svm, HeadKind::fc}) {
    const auto head = head_of(kind);
    const auto off = run_experiment(x, labels, ds.class_names, head, plan, false, 4);
    const auto on = run_experiment(x, labels, ds.class_names, head, plan, true, 4);
    ASSERT_EQ(off.folds.size(), 3u);
    for (std::size_t f = 0; f < 3; ++f) {
      EXPECT_EQ(off.folds[f].test_indices, on.folds[f].test_indices) << to_string(kind);
      EXPECT_EQ(off.folds[f].test_indices, plan.test_indices(f));
      for (const auto* r : {&off, &on}) {
        const std::set<std::size_t> test(r->folds[f].test_indices.begin(), r->folds[f].test_indices.end());
        for (auto i : r->folds[f].training_stream) ASSERT_EQ(test.count(i), 0u) << to_string(kind) << " fold " << f;
        // Confusion rows sum to the per-class test counts.
        for (std::size_t c = 0; c < 4; ++c) {
          std::size_t row = 0;
          for (auto v : r->folds[f].metrics.confusion[c]) row += v;
          EXPECT_EQ(row, plan.census[f][c]);
        }
      }
      // Balancing shifts the minority share of the training stream towards a quarter.
      auto minority_share = [&](const std::vector<std::size_t>& s) {
        double m = 0;
        for (auto i : s) m += labels[i] != 0;
        return m / static_cast<double>(s.size());
      };
      EXPECT_GT(minority_share(on.folds[f].training_stream), minority_share(off.folds[f].training_stream));
    }
    EXPECT_TRUE(on.balanced);
    EXPECT_FALSE(off.balanced);
  }
}

TEST(Experiment, SeededRepeatIsIdentical) {
  const auto ds = synthesize_dataset({9, 9, 9, 9}, 32, 12);
  const auto x = images_to_matrix(ds);
  const auto labels = ds.labels();
  const auto plan = stratified_folds(labels, 3, 1);
  for (auto kind : {HeadKind::knn, HeadKind::svm, HeadKind::fc}) {
    const auto a = run_experiment(x, labels, ds.class_names, head_of(kind), plan, true, 3);
    const auto b = run_experiment(x, labels, ds.class_names, head_of(kind), plan, true, 3);
    EXPECT_EQ(to_json(a), to_json(b));
  }
}

TEST(Experiment, ReportFormats) {
  const auto ds = synthesize_dataset({6, 6, 6, 6}, 32, 13);
  const auto x = images_to_matrix(ds);
  const auto labels = ds.labels();
  const auto r = run_experiment(x, labels, ds.class_names, head_of(HeadKind::knn), stratified_folds(labels, 3, 0),
                                false, 0);
  const auto j = to_json(r);
  EXPECT_EQ(j["head"], "knn");
  EXPECT_EQ(j["k"], 3);
  EXPECT_EQ(j["folds"].size(), 3u);
  EXPECT_EQ(j["precision"].size(), 4u);
  EXPECT_TRUE(j.contains("standardized"));
  const auto text = to_text(r);
  EXPECT_NE(text.find("accuracy  " + percent(r.accuracy)), std::string::npos);
  EXPECT_NE(text.find("crater"), std::string::npos);
  EXPECT_THROW(run_experiment(x.topRows(5), labels, ds.class_names, head_of(HeadKind::knn),
                              stratified_folds(labels, 3, 0), false, 0),
               Error);
  EXPECT_EQ(parse_head_kind("svm"), HeadKind::svm);
  EXPECT_THROW(parse_head_kind("tree"), Error);
}
