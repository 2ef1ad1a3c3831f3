#pragma once

// Trainable models: a one-hidden-layer rectifier network that stands in for
// the fine-tuned CNN (exports NTF checkpoints and penultimate features), and
// the three classifier heads fitted on those features: k-nearest neighbours,
// a one-vs-rest linear SVM, and a softmax (fully connected) layer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tunescope/data.hpp"
#include "tunescope/error.hpp"
#include "tunescope/image.hpp"
#include "tunescope/predictor.hpp"
#include "tunescope/rng.hpp"
#include "tunescope/sampling.hpp"
#include "tunescope/tensors.hpp"

namespace tunescope {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Pixels scaled to [0, 1], one image per row.
inline Eigen::MatrixXd images_to_matrix(std::span<const GrayImage> images) {
  if (images.empty()) return {};
  const auto dim = images.front().size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != dim)
      throw Error("image " + std::to_string(i) + " has " + std::to_string(images[i].size()) + " pixels, expected " +
                  std::to_string(dim));
    for (std::size_t p = 0; p < dim; ++p)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = images[i].pixels[p] / 255.0;
  }
  return x;
}

inline Eigen::MatrixXd images_to_matrix(const Dataset& ds) {
  std::vector<GrayImage> images;
  images.reserve(ds.images.size());
  for (const auto& im : ds.images) images.push_back(im.image);
  return images_to_matrix(images);
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& z) {
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    z.row(r).array() -= z.row(r).maxCoeff();
    z.row(r) = z.row(r).array().exp().matrix();
    z.row(r) /= z.row(r).sum();
  }
}

inline Eigen::RowVectorXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
  Eigen::RowVectorXd p = logits;
  softmax_rows_inplace(p);
  return p;
}

inline constexpr double kProbabilityFloor = 1e-12;

// -ln p[target], with p clamped at 1e-12.
inline double cross_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& probabilities, std::size_t target) {
  if (target >= static_cast<std::size_t>(probabilities.size()))
    throw Error("cross-entropy target " + std::to_string(target) + " out of range");
  return -std::log(std::max(probabilities[static_cast<Eigen::Index>(target)], kProbabilityFloor));
}

// d/dlogits of -ln softmax(logits)[target] = softmax(logits) - one_hot(target).
inline Eigen::RowVectorXd cross_entropy_logit_gradient(const Eigen::Ref<const Eigen::RowVectorXd>& logits,
                                                       std::size_t target) {
  Eigen::RowVectorXd g = softmax(logits);
  g[static_cast<Eigen::Index>(target)] -= 1.0;
  return g;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename S>
struct AdamState {
  std::vector<S> m;
  std::vector<S> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of `params` in place.
template <typename S>
void adam_step(std::span<S> params, std::span<const S> grads, AdamState<S>& state, const AdamOptions& opt) {
  if (params.size() != grads.size()) throw Error("adam_step: parameter and gradient sizes differ");
  if (state.m.empty()) {
    state.m.assign(params.size(), S(0));
    state.v.assign(params.size(), S(0));
  }
  if (state.m.size() != params.size()) throw Error("adam_step: optimizer state does not match parameters");
  ++state.step;
  const S b1 = static_cast<S>(opt.beta1);
  const S b2 = static_cast<S>(opt.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(opt.beta1, static_cast<double>(state.step)));
  const S c2 = static_cast<S>(1.0 - std::pow(opt.beta2, static_cast<double>(state.step)));
  const S lr = static_cast<S>(opt.learning_rate);
  const S eps = static_cast<S>(opt.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (S(1) - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (S(1) - b2) * grads[i] * grads[i];
    // Moments of parameters that stop receiving gradient decay geometrically;
    // letting them go subnormal slows every later step by orders of magnitude.
    if (std::abs(state.m[i]) < std::numeric_limits<S>::min()) state.m[i] = S(0);
    if (state.v[i] < std::numeric_limits<S>::min()) state.v[i] = S(0);
    const S m_hat = state.m[i] / c1;
    const S v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

// ---------------------------------------------------------------------------
// Mini-batch training loop shared by the reference net and the softmax head
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 6;
  std::size_t epochs = 100;
  std::set<std::string> freeze;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Draw each epoch's stream with inverse-class-frequency resampling
  // (fresh seeded stream per epoch) instead of a seeded shuffle.
  bool balanced = false;

  AdamOptions adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_eps}; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
          {"freeze", c.freeze},               {"seed", c.seed},             {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},       {"adam_eps", c.adam_eps},     {"balanced", c.balanced}};
}

struct TrainLog {
  std::vector<double> epoch_loss;                  // mean batch loss per epoch
  std::vector<std::vector<std::size_t>> streams;   // sample order of every epoch
};

template <typename S>
struct ParamBlock {
  std::string name;
  std::string layer;
  std::span<S> values;
};

// Model requirements: blocks() -> vector<ParamBlock<S>>, layer_ids(),
// batch_gradients(X rows, labels, grads) -> mean loss.
template <typename Model>
TrainLog fit_minibatch(Model& model, const Eigen::MatrixXd& inputs, std::span<const std::size_t> labels,
                       std::size_t class_count, const TrainConfig& cfg) {
  using S = typename Model::Scalar;
  if (inputs.rows() == 0) throw Error("training set is empty");
  if (static_cast<std::size_t>(inputs.rows()) != labels.size()) throw Error("inputs and labels differ in length");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= class_count)
      throw Error("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) + " out of range");
  if (cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0))
    throw Error("batch_size, epochs and learning_rate must be positive");
  const auto known = model.layer_ids();
  for (const auto& f : cfg.freeze)
    if (std::find(known.begin(), known.end(), f) == known.end()) throw Error("cannot freeze unknown layer \"" + f + "\"");

  auto blocks = model.blocks();
  std::vector<AdamState<S>> states(blocks.size());
  std::vector<std::vector<S>> grads(blocks.size());
  for (std::size_t b = 0; b < blocks.size(); ++b) grads[b].resize(blocks[b].values.size());

  const auto n = static_cast<std::size_t>(inputs.rows());
  Rng shuffle_rng(mix_seed(cfg.seed, 0x5EED));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainLog log;
  const AdamOptions adam = cfg.adam();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> stream;
    if (cfg.balanced) {
      stream = balanced_sampler(labels, n, mix_seed(cfg.seed, 1000 + epoch));
    } else {
      shuffle_rng.shuffle(order.begin(), order.end());
      stream = order;
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      Eigen::MatrixXd xb(static_cast<Eigen::Index>(end - start), inputs.cols());
      std::vector<std::size_t> yb;
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = inputs.row(static_cast<Eigen::Index>(stream[i]));
        yb.push_back(labels[stream[i]]);
      }
      loss_sum += static_cast<double>(model.batch_gradients(xb, yb, grads));
      ++batches;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (cfg.freeze.count(blocks[b].layer)) continue;
        adam_step<S>(blocks[b].values, grads[b], states[b], adam);
      }
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    log.streams.push_back(std::move(stream));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Reference network: input -> fc1 (rectifier) -> fc2 -> softmax
// ---------------------------------------------------------------------------

template <typename S>
class BasicReferenceNet {
 public:
  using Scalar = S;

  BasicReferenceNet() = default;

  // Weights and biases uniform in +/- 1/sqrt(fan_in).
  BasicReferenceNet(std::size_t input_dim, std::size_t hidden_dim, std::size_t class_count, std::uint64_t seed)
      : fc1_w_(static_cast<Eigen::Index>(hidden_dim), static_cast<Eigen::Index>(input_dim)),
        fc1_b_(static_cast<Eigen::Index>(hidden_dim)),
        fc2_w_(static_cast<Eigen::Index>(class_count), static_cast<Eigen::Index>(hidden_dim)),
        fc2_b_(static_cast<Eigen::Index>(class_count)) {
    if (input_dim == 0 || hidden_dim == 0 || class_count < 2)
      throw Error("reference net needs positive dimensions and at least two classes");
    Rng rng(seed);
    const double a1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (Eigen::Index i = 0; i < fc1_w_.size(); ++i) fc1_w_.data()[i] = static_cast<S>(rng.uniform(-a1, a1));
    for (Eigen::Index i = 0; i < fc1_b_.size(); ++i) fc1_b_[i] = static_cast<S>(rng.uniform(-a1, a1));
    for (Eigen::Index i = 0; i < fc2_w_.size(); ++i) fc2_w_.data()[i] = static_cast<S>(rng.uniform(-a2, a2));
    for (Eigen::Index i = 0; i < fc2_b_.size(); ++i) fc2_b_[i] = static_cast<S>(rng.uniform(-a2, a2));
  }

  std::size_t input_dim() const { return static_cast<std::size_t>(fc1_w_.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(fc1_w_.rows()); }
  std::size_t class_count() const { return static_cast<std::size_t>(fc2_w_.rows()); }

  RowMatrix<S>& fc1_weight() { return fc1_w_; }
  Vector<S>& fc1_bias() { return fc1_b_; }
  RowMatrix<S>& fc2_weight() { return fc2_w_; }
  Vector<S>& fc2_bias() { return fc2_b_; }
  const RowMatrix<S>& fc1_weight() const { return fc1_w_; }
  const Vector<S>& fc1_bias() const { return fc1_b_; }
  const RowMatrix<S>& fc2_weight() const { return fc2_w_; }
  const Vector<S>& fc2_bias() const { return fc2_b_; }

  std::vector<std::string> layer_ids() const { return {"fc1", "fc2"}; }

  std::vector<ParamBlock<S>> blocks() {
    return {{"fc1.weight", "fc1", {fc1_w_.data(), static_cast<std::size_t>(fc1_w_.size())}},
            {"fc1.bias", "fc1", {fc1_b_.data(), static_cast<std::size_t>(fc1_b_.size())}},
            {"fc2.weight", "fc2", {fc2_w_.data(), static_cast<std::size_t>(fc2_w_.size())}},
            {"fc2.bias", "fc2", {fc2_b_.data(), static_cast<std::size_t>(fc2_b_.size())}}};
  }

  // Rectified fc1 activations, one row per input row.
  RowMatrix<S> hidden(const Eigen::MatrixXd& inputs) const {
    check_inputs(inputs);
    RowMatrix<S> h = inputs.cast<S>() * fc1_w_.transpose();
    h.rowwise() += fc1_b_.transpose();
    return h.cwiseMax(S(0));
  }

  RowMatrix<S> logits(const Eigen::MatrixXd& inputs) const {
    RowMatrix<S> z = hidden(inputs) * fc2_w_.transpose();
    z.rowwise() += fc2_b_.transpose();
    return z;
  }

  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& inputs) const {
    RowMatrix<S> z = logits(inputs);
    softmax_rows_inplace(z);
    return z.template cast<double>();
  }

  // Mean cross-entropy over the batch.
  double loss(const Eigen::MatrixXd& inputs, std::span<const std::size_t> labels) const {
    const Eigen::MatrixXd p = probabilities(inputs);
    double sum = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r) sum += cross_entropy(p.row(r), labels[static_cast<std::size_t>(r)]);
    return sum / static_cast<double>(p.rows());
  }

  // Fills grads in blocks() order; returns the mean batch loss.
  S batch_gradients(const Eigen::MatrixXd& inputs, std::span<const std::size_t> labels,
                    std::vector<std::vector<S>>& grads) const {
    const RowMatrix<S> x = inputs.cast<S>();
    RowMatrix<S> h = x * fc1_w_.transpose();
    h.rowwise() += fc1_b_.transpose();
    h = h.cwiseMax(S(0));
    RowMatrix<S> dz = h * fc2_w_.transpose();
    dz.rowwise() += fc2_b_.transpose();
    softmax_rows_inplace(dz);

    const auto batch = static_cast<S>(x.rows());
    S loss = 0;
    for (Eigen::Index r = 0; r < dz.rows(); ++r) {
      const auto t = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
      loss -= std::log(std::max(dz(r, t), static_cast<S>(kProbabilityFloor)));
      dz(r, t) -= S(1);
    }
    dz /= batch;

    const RowMatrix<S> g2 = dz.transpose() * h;
    const Vector<S> gb2 = dz.colwise().sum().transpose();
    RowMatrix<S> dh = dz * fc2_w_;
    dh = dh.cwiseProduct((h.array() > S(0)).template cast<S>().matrix());
    const RowMatrix<S> g1 = dh.transpose() * x;
    const Vector<S> gb1 = dh.colwise().sum().transpose();

    grads.resize(4);
    grads[0].assign(g1.data(), g1.data() + g1.size());
    grads[1].assign(gb1.data(), gb1.data() + gb1.size());
    grads[2].assign(g2.data(), g2.data() + g2.size());
    grads[3].assign(gb2.data(), gb2.data() + gb2.size());
    return loss / batch;
  }

  template <typename T>
  BasicReferenceNet<T> cast() const {
    BasicReferenceNet<T> out;
    out.fc1_weight() = fc1_w_.template cast<T>();
    out.fc1_bias() = fc1_b_.template cast<T>();
    out.fc2_weight() = fc2_w_.template cast<T>();
    out.fc2_bias() = fc2_b_.template cast<T>();
    return out;
  }

 private:
  void check_inputs(const Eigen::MatrixXd& inputs) const {
    if (static_cast<std::size_t>(inputs.cols()) != input_dim())
      throw Error("input has " + std::to_string(inputs.cols()) + " features, network expects " +
                  std::to_string(input_dim()));
  }

  RowMatrix<S> fc1_w_;
  Vector<S> fc1_b_;
  RowMatrix<S> fc2_w_;
  Vector<S> fc2_b_;
};

using ReferenceNet = BasicReferenceNet<float>;

template <typename S>
TrainLog train_reference(BasicReferenceNet<S>& net, const Eigen::MatrixXd& inputs,
                         std::span<const std::size_t> labels, const TrainConfig& cfg) {
  return fit_minibatch(net, inputs, labels, net.class_count(), cfg);
}

template <typename S>
Eigen::MatrixXd penultimate_features(const BasicReferenceNet<S>& net, const Eigen::MatrixXd& inputs) {
  return net.hidden(inputs).template cast<double>();
}

// Wraps a trained network as a black-box image classifier.
class NetPredictor final : public Predictor {
 public:
  explicit NetPredictor(ReferenceNet net) : net_(std::move(net)) {}

  std::size_t class_count() const override { return net_.class_count(); }
  Concurrency concurrency() const override { return Concurrency::concurrent_ok; }
  Eigen::MatrixXd predict(std::span<const GrayImage> images) const override {
    if (images.empty()) return Eigen::MatrixXd(0, static_cast<Eigen::Index>(class_count()));
    return net_.probabilities(images_to_matrix(images));
  }
  const ReferenceNet& net() const { return net_; }

 private:
  ReferenceNet net_;
};

// ---------------------------------------------------------------------------
// Checkpoint exchange
// ---------------------------------------------------------------------------

inline Checkpoint export_checkpoint(const ReferenceNet& net, std::map<std::string, std::string> metadata = {}) {
  auto values = [](const auto& m) { return std::vector<float>(m.data(), m.data() + m.size()); };
  Checkpoint ckpt;
  ckpt.tensors.push_back(make_tensor("fc1.weight", {net.hidden_dim(), net.input_dim()}, values(net.fc1_weight())));
  ckpt.tensors.push_back(make_tensor("fc1.bias", {net.hidden_dim()}, values(net.fc1_bias())));
  ckpt.tensors.push_back(make_tensor("fc2.weight", {net.class_count(), net.hidden_dim()}, values(net.fc2_weight())));
  ckpt.tensors.push_back(make_tensor("fc2.bias", {net.class_count()}, values(net.fc2_bias())));
  metadata.try_emplace("model_id", "reference_mlp");
  metadata.try_emplace("created_by", "tunescope");
  metadata["input_dim"] = std::to_string(net.input_dim());
  metadata["hidden_dim"] = std::to_string(net.hidden_dim());
  metadata["class_count"] = std::to_string(net.class_count());
  ckpt.metadata = std::move(metadata);
  return ckpt;
}

inline ReferenceNet import_checkpoint(const Checkpoint& ckpt) {
  auto need = [&](const char* name, std::size_t rank) -> const NamedTensor& {
    const auto* t = ckpt.find(name);
    if (!t) throw Error(std::string("checkpoint is missing tensor \"") + name + "\"");
    if (t->shape.size() != rank) throw Error(std::string("tensor \"") + name + "\" has the wrong rank");
    return *t;
  };
  const auto& w1 = need("fc1.weight", 2);
  const auto& b1 = need("fc1.bias", 1);
  const auto& w2 = need("fc2.weight", 2);
  const auto& b2 = need("fc2.bias", 1);
  const std::size_t hidden = w1.shape[0], input = w1.shape[1], classes = w2.shape[0];
  auto declared = [&](const char* key, std::size_t actual) {
    const auto it = ckpt.metadata.find(key);
    if (it != ckpt.metadata.end() && it->second != std::to_string(actual))
      throw Error(std::string("checkpoint declares ") + key + "=" + it->second + " but tensors imply " +
                  std::to_string(actual));
  };
  declared("input_dim", input);
  declared("hidden_dim", hidden);
  declared("class_count", classes);
  if (b1.shape[0] != hidden) throw Error("tensor \"fc1.bias\" shape mismatch");
  if (w2.shape[1] != hidden) throw Error("tensor \"fc2.weight\" shape mismatch");
  if (b2.shape[0] != classes) throw Error("tensor \"fc2.bias\" shape mismatch");
  if (classes < 2) throw Error("checkpoint describes fewer than two classes");

  ReferenceNet net;
  net.fc1_weight() = Eigen::Map<const RowMatrix<float>>(w1.values.data(), static_cast<Eigen::Index>(hidden),
                                                        static_cast<Eigen::Index>(input));
  net.fc1_bias() = Eigen::Map<const Vector<float>>(b1.values.data(), static_cast<Eigen::Index>(hidden));
  net.fc2_weight() = Eigen::Map<const RowMatrix<float>>(w2.values.data(), static_cast<Eigen::Index>(classes),
                                                        static_cast<Eigen::Index>(hidden));
  net.fc2_bias() = Eigen::Map<const Vector<float>>(b2.values.data(), static_cast<Eigen::Index>(classes));
  return net;
}

// ---------------------------------------------------------------------------
// Classifier heads over feature rows
// ---------------------------------------------------------------------------

struct Classification {
  std::size_t label = 0;
  Eigen::RowVectorXd probabilities;
};

// Euclidean k-nearest neighbours with majority vote. Probabilities are vote
// fractions; ties go to the larger summed inverse distance, then the
// smaller class index.
class KnnHead {
 public:
  KnnHead(Eigen::MatrixXd features, std::vector<std::size_t> labels, std::size_t k, std::size_t class_count)
      : features_(std::move(features)), labels_(std::move(labels)), k_(k), classes_(class_count) {
    if (features_.rows() == 0) throw Error("KNN needs a non-empty training set");
    if (static_cast<std::size_t>(features_.rows()) != labels_.size()) throw Error("KNN features and labels differ in length");
    if (k_ == 0 || k_ > labels_.size())
      throw Error("KNN K=" + std::to_string(k_) + " must be in [1, " + std::to_string(labels_.size()) + "]");
    for (auto l : labels_)
      if (l >= classes_) throw Error("KNN label " + std::to_string(l) + " out of range");
  }

  Classification classify(const Eigen::Ref<const Eigen::RowVectorXd>& query) const {
    if (query.size() != features_.cols()) throw Error("KNN query dimension mismatch");
    std::vector<std::pair<double, std::size_t>> dist(labels_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i)
      dist[i] = {(features_.row(static_cast<Eigen::Index>(i)) - query).squaredNorm(), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_), dist.end());

    std::vector<std::size_t> votes(classes_, 0);
    std::vector<double> inverse(classes_, 0.0);
    for (std::size_t i = 0; i < k_; ++i) {
      const auto c = labels_[dist[i].second];
      ++votes[c];
      inverse[c] += 1.0 / std::max(std::sqrt(dist[i].first), 1e-300);
    }
    Classification out;
    out.probabilities = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(classes_));
    for (std::size_t c = 0; c < classes_; ++c) {
      out.probabilities[static_cast<Eigen::Index>(c)] = static_cast<double>(votes[c]) / static_cast<double>(k_);
      if (votes[c] > votes[out.label] || (votes[c] == votes[out.label] && inverse[c] > inverse[out.label]))
        out.label = c;
    }
    return out;
  }

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd p(x.rows(), static_cast<Eigen::Index>(classes_));
    for (Eigen::Index r = 0; r < x.rows(); ++r) p.row(r) = classify(x.row(r)).probabilities;
    return p;
  }

  std::vector<std::size_t> predict(const Eigen::MatrixXd& x) const {
    std::vector<std::size_t> out;
    for (Eigen::Index r = 0; r < x.rows(); ++r) out.push_back(classify(x.row(r)).label);
    return out;
  }

 private:
  Eigen::MatrixXd features_;
  std::vector<std::size_t> labels_;
  std::size_t k_;
  std::size_t classes_;
};

struct SvmOptions {
  double c_slack = 1.0;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
};

// One-vs-rest linear SVM. Each class minimizes
//   lambda/2 |w|^2 + 1/n sum_i max(0, 1 - y_i (w . [x_i, 1])),  lambda = 1/(n C),
// by Pegasos stochastic subgradient steps 1/(lambda t) with projection onto
// the ball of radius 1/sqrt(lambda). The bias is the last (regularized)
// weight. Probability rows are a softmax over margins: uncalibrated,
// reported only for symmetry with the other heads.
class LinearSvmHead {
 public:
  LinearSvmHead(const Eigen::MatrixXd& features, std::span<const std::size_t> labels, std::size_t class_count,
                const SvmOptions& opts = {})
      : classes_(class_count) {
    const auto n = static_cast<std::size_t>(features.rows());
    if (n == 0) throw Error("SVM needs a non-empty training set");
    if (labels.size() != n) throw Error("SVM features and labels differ in length");
    if (!(opts.c_slack > 0.0)) throw Error("SVM slack C must be positive");
    std::set<std::size_t> present;
    for (auto l : labels) {
      if (l >= classes_) throw Error("SVM label " + std::to_string(l) + " out of range");
      present.insert(l);
    }
    const auto d = static_cast<Eigen::Index>(features.cols()) + 1;
    weights_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes_), d);
    if (present.size() == 1) {
      degenerate_class_ = *present.begin();
      warnings_.push_back("SVM training data contains a single class (" + std::to_string(*degenerate_class_) +
                          "); predicting it for every input");
      return;
    }

    Eigen::MatrixXd x(features.rows(), d);
    x.leftCols(d - 1) = features;
    x.col(d - 1).setOnes();
    const double lambda = 1.0 / (static_cast<double>(n) * opts.c_slack);
    const double radius = 1.0 / std::sqrt(lambda);

    for (std::size_t c = 0; c < classes_; ++c) {
      Eigen::RowVectorXd w = Eigen::RowVectorXd::Zero(d);
      Rng rng(mix_seed(opts.seed, c));
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::uint64_t t = 0;
      for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (const auto i : order) {
          ++t;
          const double eta = 1.0 / (lambda * static_cast<double>(t));
          const double y = labels[i] == c ? 1.0 : -1.0;
          const double margin = y * w.dot(x.row(static_cast<Eigen::Index>(i)));
          w *= (1.0 - eta * lambda);
          if (margin < 1.0) w += eta * y * x.row(static_cast<Eigen::Index>(i));
          const double norm = w.norm();
          if (norm > radius) w *= radius / norm;
        }
        weights_.row(static_cast<Eigen::Index>(c)) = w;
        if (objective_history_.size() <= epoch) objective_history_.push_back(0.0);
        objective_history_[epoch] += objective_for(x, labels, c, w, lambda);
      }
    }
  }

  // Summed one-vs-rest regularized hinge objective after each epoch.
  const std::vector<double>& objective_history() const { return objective_history_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const Eigen::MatrixXd& weights() const { return weights_; }

  Eigen::MatrixXd margins(const Eigen::MatrixXd& features) const {
    if (features.cols() + 1 != weights_.cols()) throw Error("SVM feature dimension mismatch");
    Eigen::MatrixXd m = features * weights_.leftCols(weights_.cols() - 1).transpose();
    m.rowwise() += weights_.col(weights_.cols() - 1).transpose();
    return m;
  }

  std::vector<std::size_t> predict(const Eigen::MatrixXd& features) const {
    if (degenerate_class_) return std::vector<std::size_t>(static_cast<std::size_t>(features.rows()), *degenerate_class_);
    const Eigen::MatrixXd m = margins(features);
    std::vector<std::size_t> out;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      Eigen::Index best = 0;
      m.row(r).maxCoeff(&best);
      out.push_back(static_cast<std::size_t>(best));
    }
    return out;
  }

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& features) const {
    if (degenerate_class_) {
      Eigen::MatrixXd p = Eigen::MatrixXd::Zero(features.rows(), static_cast<Eigen::Index>(classes_));
      p.col(static_cast<Eigen::Index>(*degenerate_class_)).setOnes();
      return p;
    }
    Eigen::MatrixXd m = margins(features);
    softmax_rows_inplace(m);
    return m;
  }

 private:
  static double objective_for(const Eigen::MatrixXd& x, std::span<const std::size_t> labels, std::size_t c,
                              const Eigen::RowVectorXd& w, double lambda) {
    double hinge = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double y = labels[static_cast<std::size_t>(i)] == c ? 1.0 : -1.0;
      hinge += std::max(0.0, 1.0 - y * w.dot(x.row(i)));
    }
    return 0.5 * lambda * w.squaredNorm() + hinge / static_cast<double>(x.rows());
  }

  std::size_t classes_;
  Eigen::MatrixXd weights_;  // classes x (features + 1)
  std::optional<std::size_t> degenerate_class_;
  std::vector<double> objective_history_;
  std::vector<std::string> warnings_;
};

// Single linear layer with softmax output, trained with cross-entropy and
// Adam (defaults: lr 1e-4, batch 6, 30 epochs).
template <typename S>
class BasicSoftmaxHead {
 public:
  using Scalar = S;

  static TrainConfig default_config() {
    TrainConfig cfg;
    cfg.epochs = 30;
    return cfg;
  }

  BasicSoftmaxHead(std::size_t feature_dim, std::size_t class_count, std::uint64_t seed)
      : w_(static_cast<Eigen::Index>(class_count), static_cast<Eigen::Index>(feature_dim)),
        b_(static_cast<Eigen::Index>(class_count)) {
    if (feature_dim == 0 || class_count < 2) throw Error("softmax head needs features and at least two classes");
    Rng rng(seed);
    const double a = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    for (Eigen::Index i = 0; i < w_.size(); ++i) w_.data()[i] = static_cast<S>(rng.uniform(-a, a));
    for (Eigen::Index i = 0; i < b_.size(); ++i) b_[i] = static_cast<S>(rng.uniform(-a, a));
  }

  std::size_t class_count() const { return static_cast<std::size_t>(w_.rows()); }
  std::vector<std::string> layer_ids() const { return {"fc"}; }
  RowMatrix<S>& weight() { return w_; }
  Vector<S>& bias() { return b_; }

  std::vector<ParamBlock<S>> blocks() {
    return {{"fc.weight", "fc", {w_.data(), static_cast<std::size_t>(w_.size())}},
            {"fc.bias", "fc", {b_.data(), static_cast<std::size_t>(b_.size())}}};
  }

  TrainLog fit(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
               const TrainConfig& cfg = default_config()) {
    return fit_minibatch(*this, features, labels, class_count(), cfg);
  }

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& features) const {
    if (static_cast<std::size_t>(features.cols()) != static_cast<std::size_t>(w_.cols()))
      throw Error("softmax head feature dimension mismatch");
    RowMatrix<S> z = features.cast<S>() * w_.transpose();
    z.rowwise() += b_.transpose();
    softmax_rows_inplace(z);
    return z.template cast<double>();
  }

  std::vector<std::size_t> predict(const Eigen::MatrixXd& features) const {
    const Eigen::MatrixXd p = predict_proba(features);
    std::vector<std::size_t> out;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      Eigen::Index best = 0;
      p.row(r).maxCoeff(&best);
      out.push_back(static_cast<std::size_t>(best));
    }
    return out;
  }

  double loss(const Eigen::MatrixXd& features, std::span<const std::size_t> labels) const {
    const Eigen::MatrixXd p = predict_proba(features);
    double sum = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r) sum += cross_entropy(p.row(r), labels[static_cast<std::size_t>(r)]);
    return sum / static_cast<double>(p.rows());
  }

  S batch_gradients(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                    std::vector<std::vector<S>>& grads) const {
    const RowMatrix<S> x = features.cast<S>();
    RowMatrix<S> dz = x * w_.transpose();
    dz.rowwise() += b_.transpose();
    softmax_rows_inplace(dz);
    const auto batch = static_cast<S>(x.rows());
    S loss = 0;
    for (Eigen::Index r = 0; r < dz.rows(); ++r) {
      const auto t = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
      loss -= std::log(std::max(dz(r, t), static_cast<S>(kProbabilityFloor)));
      dz(r, t) -= S(1);
    }
    dz /= batch;
    const RowMatrix<S> gw = dz.transpose() * x;
    const Vector<S> gb = dz.colwise().sum().transpose();
    grads.resize(2);
    grads[0].assign(gw.data(), gw.data() + gw.size());
    grads[1].assign(gb.data(), gb.data() + gb.size());
    return loss / batch;
  }

 private:
  RowMatrix<S> w_;
  Vector<S> b_;
};

using SoftmaxHead = BasicSoftmaxHead<double>;

}  // namespace tunescope
