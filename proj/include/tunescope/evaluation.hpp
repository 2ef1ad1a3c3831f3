#pragma once

// Stratified k-fold cross-validation of classifier heads on feature rows,
// with optional class-balanced resampling of the training portion and
// per-class precision/recall aggregated as mean +/- std over folds.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tunescope/error.hpp"
#include "tunescope/predictors.hpp"
#include "tunescope/rng.hpp"
#include "tunescope/sampling.hpp"

namespace tunescope {

struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::size_t> assignments;           // fold of each sample
  std::vector<std::vector<std::size_t>> census;   // census[fold][class]

  std::vector<std::size_t> test_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i)
      if (assignments[i] == fold) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i)
      if (assignments[i] != fold) out.push_back(i);
    return out;
  }
};

// Within each class the samples are shuffled (seeded) and dealt round-robin.
// Each class starts dealing where the previous one stopped, which keeps the
// fold sizes within one of each other as well.
inline FoldPlan stratified_folds(std::span<const std::size_t> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error("stratified folds need k >= 2");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.empty()) throw Error("cannot fold an empty dataset");
  const std::size_t classes = by_class.rbegin()->first + 1;

  FoldPlan plan;
  plan.k = k;
  plan.assignments.assign(labels.size(), 0);
  plan.census.assign(k, std::vector<std::size_t>(classes, 0));
  std::size_t cursor = 0;
  for (auto& [cls, members] : by_class) {
    if (members.size() < k)
      throw Error("class " + std::to_string(cls) + " has " + std::to_string(members.size()) + " samples, fewer than k=" +
                  std::to_string(k));
    Rng rng(mix_seed(seed, cls));
    rng.shuffle(members.begin(), members.end());
    for (const auto idx : members) {
      plan.assignments[idx] = cursor;
      ++plan.census[cursor][cls];
      cursor = (cursor + 1) % k;
    }
  }
  return plan;
}

struct ClassificationMetrics {
  std::vector<std::vector<std::size_t>> confusion;  // [actual][predicted]
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<bool> precision_undefined;  // class never predicted
  std::vector<bool> recall_undefined;     // class absent from truth
};

inline ClassificationMetrics confusion_and_metrics(std::span<const std::size_t> predicted,
                                                   std::span<const std::size_t> truth, std::size_t class_count) {
  if (predicted.size() != truth.size()) throw Error("predicted and true label arrays differ in length");
  ClassificationMetrics m;
  m.confusion.assign(class_count, std::vector<std::size_t>(class_count, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= class_count || predicted[i] >= class_count)
      throw Error("label out of range at position " + std::to_string(i));
    ++m.confusion[truth[i]][predicted[i]];
  }
  std::size_t trace = 0;
  for (std::size_t c = 0; c < class_count; ++c) trace += m.confusion[c][c];
  m.accuracy = truth.empty() ? 0.0 : static_cast<double>(trace) / static_cast<double>(truth.size());

  for (std::size_t c = 0; c < class_count; ++c) {
    std::size_t predicted_c = 0, actual_c = 0;
    for (std::size_t o = 0; o < class_count; ++o) {
      predicted_c += m.confusion[o][c];
      actual_c += m.confusion[c][o];
    }
    const auto tp = static_cast<double>(m.confusion[c][c]);
    m.precision_undefined.push_back(predicted_c == 0);
    m.recall_undefined.push_back(actual_c == 0);
    m.precision.push_back(predicted_c == 0 ? 0.0 : tp / static_cast<double>(predicted_c));
    m.recall.push_back(actual_c == 0 ? 0.0 : tp / static_cast<double>(actual_c));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

enum class HeadKind { knn, svm, fc };

inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::knn: return "knn";
    case HeadKind::svm: return "svm";
    case HeadKind::fc: return "fc";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "knn") return HeadKind::knn;
  if (s == "svm") return HeadKind::svm;
  if (s == "fc") return HeadKind::fc;
  throw Error("unknown head \"" + s + "\"");
}

struct HeadSpec {
  HeadKind kind = HeadKind::fc;
  std::size_t knn_k = 3;
  SvmOptions svm;
  TrainConfig fc = SoftmaxHead::default_config();
  // Z-score every feature column with the training portion's mean and
  // population std before fitting; the test fold reuses those statistics.
  bool standardize = true;
};

// Column-wise affine rescaling learned from training rows only.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;  // 1 / std; constant columns keep scale 1

  static Standardizer identity(Eigen::Index dim) {
    return {Eigen::RowVectorXd::Zero(dim), Eigen::RowVectorXd::Ones(dim)};
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return ((x.rowwise() - mean).array().rowwise() * scale.array()).matrix();
  }
};

inline Standardizer fit_standardizer(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) throw Error("cannot standardize an empty training set");
  Standardizer s;
  s.mean = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - s.mean).array().square().colwise().mean();
  s.scale.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) s.scale[j] = var[j] > 0.0 ? 1.0 / std::sqrt(var[j]) : 1.0;
  return s;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population (divide by k)
};

inline MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  // A constant metric is reported exactly, free of summation rounding.
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) {
    out.mean = values[0];
    return out;
  }
  const auto n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / n);
  return out;
}

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> test_indices;
  // Every index fed to the head during fitting, in order (concatenated
  // epoch streams for the softmax head). Always drawn from the training
  // portion.
  std::vector<std::size_t> training_stream;
  ClassificationMetrics metrics;
};

struct EvalReport {
  std::string head;
  bool balanced = false;
  bool standardized = false;
  std::size_t k = 0;
  std::vector<std::string> class_names;
  std::vector<FoldResult> folds;
  MeanStd accuracy;
  std::vector<MeanStd> precision;
  std::vector<MeanStd> recall;
};

inline void aggregate(EvalReport& report) {
  std::vector<double> acc;
  for (const auto& f : report.folds) acc.push_back(f.metrics.accuracy);
  report.accuracy = mean_std(acc);
  const std::size_t classes = report.class_names.size();
  report.precision.assign(classes, {});
  report.recall.assign(classes, {});
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> p, r;
    for (const auto& f : report.folds) {
      p.push_back(f.metrics.precision[c]);
      r.push_back(f.metrics.recall[c]);
    }
    report.precision[c] = mean_std(p);
    report.recall[c] = mean_std(r);
  }
}

// For every fold: fit the head on the training portion (optionally
// resampled with inverse-class-frequency weights) and score the untouched
// test fold. KNN and SVM are fitted on one resampled stream; the softmax
// head draws a fresh balanced stream each epoch.
inline EvalReport run_experiment(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                                 const std::vector<std::string>& class_names, const HeadSpec& head,
                                 const FoldPlan& plan, bool balanced, std::uint64_t seed) {
  if (static_cast<std::size_t>(features.rows()) != labels.size() || plan.assignments.size() != labels.size())
    throw Error("features, labels and fold plan disagree on the sample count");
  const std::size_t classes = class_names.size();

  EvalReport report;
  report.head = to_string(head.kind);
  report.balanced = balanced;
  report.standardized = head.standardize;
  report.k = plan.k;
  report.class_names = class_names;

  for (std::size_t fold = 0; fold < plan.k; ++fold) {
    FoldResult result;
    result.fold = fold;
    result.test_indices = plan.test_indices(fold);
    const auto train = plan.train_indices(fold);
    const std::uint64_t fold_seed = mix_seed(seed, fold);

    auto gather = [&](const std::vector<std::size_t>& idx, Eigen::MatrixXd& x, std::vector<std::size_t>& y) {
      x.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
      y.clear();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
        y.push_back(labels[idx[i]]);
      }
    };

    Eigen::MatrixXd x_test;
    std::vector<std::size_t> y_test;
    gather(result.test_indices, x_test, y_test);
    Eigen::MatrixXd x_train;
    std::vector<std::size_t> y_train;
    gather(train, x_train, y_train);
    const auto scaler = head.standardize ? fit_standardizer(x_train) : Standardizer::identity(features.cols());

    std::vector<std::size_t> fit_indices = train;
    if (balanced && head.kind != HeadKind::fc) {
      std::vector<std::size_t> train_labels;
      for (auto i : train) train_labels.push_back(labels[i]);
      const auto draws = balanced_sampler(train_labels, train.size(), mix_seed(fold_seed, 0xBA1));
      fit_indices.clear();
      for (auto d : draws) fit_indices.push_back(train[d]);
    }
    Eigen::MatrixXd x_fit;
    std::vector<std::size_t> y_fit;
    gather(fit_indices, x_fit, y_fit);
    x_fit = scaler.apply(x_fit);
    x_test = scaler.apply(x_test);

    std::vector<std::size_t> predicted;
    switch (head.kind) {
      case HeadKind::knn: {
        KnnHead knn(x_fit, y_fit, std::min(head.knn_k, y_fit.size()), classes);
        predicted = knn.predict(x_test);
        result.training_stream = fit_indices;
        break;
      }
      case HeadKind::svm: {
        SvmOptions opts = head.svm;
        opts.seed = mix_seed(fold_seed, opts.seed);
        LinearSvmHead svm(x_fit, y_fit, classes, opts);
        predicted = svm.predict(x_test);
        result.training_stream = fit_indices;
        break;
      }
      case HeadKind::fc: {
        TrainConfig cfg = head.fc;
        cfg.freeze.clear();
        cfg.balanced = balanced;
        cfg.seed = mix_seed(fold_seed, cfg.seed);
        SoftmaxHead fc(static_cast<std::size_t>(features.cols()), classes, mix_seed(cfg.seed, 0x1417));
        const auto log = fc.fit(x_fit, y_fit, cfg);
        predicted = fc.predict(x_test);
        for (const auto& stream : log.streams)
          for (auto s : stream) result.training_stream.push_back(fit_indices[s]);
        break;
      }
    }
    result.metrics = confusion_and_metrics(predicted, y_test, classes);
    report.folds.push_back(std::move(result));
  }
  aggregate(report);
  return report;
}

inline nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline nlohmann::json to_json(const ClassificationMetrics& m) {
  nlohmann::json j{{"accuracy", m.accuracy},
                   {"confusion", m.confusion},
                   {"precision", m.precision},
                   {"recall", m.recall}};
  j["precision_undefined"] = m.precision_undefined;
  j["recall_undefined"] = m.recall_undefined;
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["head"] = r.head;
  j["balanced"] = r.balanced;
  j["standardized"] = r.standardized;
  j["k"] = r.k;
  j["class_names"] = r.class_names;
  j["std_convention"] = "population (divide by k)";
  j["accuracy"] = to_json(r.accuracy);
  j["precision"] = nlohmann::json::array();
  j["recall"] = nlohmann::json::array();
  for (std::size_t c = 0; c < r.class_names.size(); ++c) {
    j["precision"].push_back(to_json(r.precision[c]));
    j["recall"].push_back(to_json(r.recall[c]));
  }
  j["folds"] = nlohmann::json::array();
  for (const auto& f : r.folds)
    j["folds"].push_back({{"fold", f.fold},
                          {"test_indices", f.test_indices},
                          {"training_stream", f.training_stream},
                          {"metrics", to_json(f.metrics)}});
  return j;
}

inline std::string percent(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f±%.2f%%", 100.0 * m.mean, 100.0 * m.std);
  return buf;
}

inline std::string to_text(const EvalReport& r) {
  std::ostringstream out;
  out << "head " << r.head << (r.balanced ? " (balanced)" : " (imbalanced)") << ", " << r.k << "-fold\n";
  out << "accuracy  " << percent(r.accuracy) << "\n";
  std::size_t w = 5;
  for (const auto& n : r.class_names) w = std::max(w, n.size());
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %-19s  %s\n", static_cast<int>(w), "class", "precision", "recall");
  out << line;
  for (std::size_t c = 0; c < r.class_names.size(); ++c) {
    std::snprintf(line, sizeof(line), "%-*s  %-19s  %s\n", static_cast<int>(w), r.class_names[c].c_str(),
                  percent(r.precision[c]).c_str(), percent(r.recall[c]).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace tunescope
