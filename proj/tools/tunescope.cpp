// tunescope: command-line front end.
//
//   tunescope gen       synthetic texture dataset tree + manifest
//   tunescope train     reference network, initial/final NTF checkpoints
//   tunescope diverge   per-layer KL / Euclidean drift between checkpoints
//   tunescope evaluate  stratified k-fold evaluation of classifier heads
//   tunescope explain   LIME explanation + overlays for one image
//
// Exit codes: 0 success, 1 runtime error, 2 argument error.

#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tunescope/tunescope.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDefaultSeed = 0;

void write_json(const fs::path& path, const json& j) { tunescope::write_file_bytes(path.string(), j.dump(2) + "\n"); }

void write_config_echo(const fs::path& out, const std::string& command, const json& params) {
  fs::create_directories(out);
  write_json(out / "config.json", json{{"command", command}, {"parameters", params}});
}

std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t seed) {
  if (opt->count() == 0) std::cerr << "note: --seed not given, using default seed " << seed << "\n";
  return seed;
}

tunescope::Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw tunescope::Error("cannot open \"" + path + "\"");
  try {
    return tunescope::read_checkpoint(in);
  } catch (const tunescope::Error& e) {
    throw tunescope::Error(path + ": " + e.what());
  }
}

void save_checkpoint(const fs::path& path, const tunescope::Checkpoint& ckpt) {
  tunescope::write_file_bytes(path.string(), tunescope::checkpoint_bytes(ckpt));
}

tunescope::Dataset load_dataset(const std::string& root) {
  auto result = tunescope::ingest_directory(root);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  if (result.dataset.images.empty()) throw tunescope::Error("dataset \"" + root + "\" contains no readable images");
  const auto& first = result.dataset.images.front().image;
  for (const auto& im : result.dataset.images)
    if (im.image.width != first.width || im.image.height != first.height)
      throw tunescope::Error("dataset images differ in size (" + im.source + ")");
  return std::move(result.dataset);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::vector<std::size_t> counts{80, 10, 5, 5};
  std::size_t size = 64;
  std::uint64_t seed = kDefaultSeed;
  std::string out;
  CLI::Option* seed_opt = nullptr;
};

void run_gen(const GenArgs& a) {
  if (a.counts.size() != 4) throw CLI::ValidationError("--counts", "expects four counts: flat,ripple,rocky,crater");
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  const std::array<std::size_t, 4> counts{a.counts[0], a.counts[1], a.counts[2], a.counts[3]};
  const auto ds = tunescope::synthesize_dataset(counts, a.size, seed);
  tunescope::write_dataset_tree(ds, a.out);
  write_config_echo(a.out, "gen", {{"counts", a.counts}, {"size", a.size}, {"seed", seed}, {"out", a.out}});
  std::cout << "wrote " << ds.images.size() << " images to " << a.out << "\n";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::vector<std::string> freeze;
  std::size_t hidden = 64;
  tunescope::TrainConfig cfg;
  std::uint64_t seed = kDefaultSeed;
  CLI::Option* seed_opt = nullptr;
};

void run_train(TrainArgs a) {
  a.cfg.seed = resolve_seed(a.seed_opt, a.seed);
  a.cfg.freeze = {a.freeze.begin(), a.freeze.end()};
  const auto ds = load_dataset(a.data);
  const auto x = tunescope::images_to_matrix(ds);
  const auto labels = ds.labels();
  const auto& first = ds.images.front().image;

  tunescope::ReferenceNet net(static_cast<std::size_t>(x.cols()), a.hidden, ds.class_count(),
                              tunescope::mix_seed(a.cfg.seed, 0x1417));
  std::map<std::string, std::string> meta{{"input_width", std::to_string(first.width)},
                                          {"input_height", std::to_string(first.height)}};
  fs::create_directories(a.out);
  auto initial_meta = meta;
  initial_meta["stage"] = "initial";
  save_checkpoint(fs::path(a.out) / "initial.ntf", tunescope::export_checkpoint(net, initial_meta));

  const auto log = tunescope::train_reference(net, x, labels, a.cfg);

  auto final_meta = meta;
  final_meta["stage"] = "final";
  save_checkpoint(fs::path(a.out) / "final.ntf", tunescope::export_checkpoint(net, final_meta));

  const auto probs = net.probabilities(x);
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index best = 0;
    probs.row(r).maxCoeff(&best);
    correct += static_cast<std::size_t>(best) == labels[static_cast<std::size_t>(r)];
  }
  const double accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  write_json(fs::path(a.out) / "loss_log.json",
             json{{"epoch_loss", log.epoch_loss}, {"final_training_accuracy", accuracy}});
  write_config_echo(a.out, "train",
                    {{"data", a.data}, {"hidden", a.hidden}, {"train", tunescope::to_json(a.cfg)},
                     {"class_names", ds.class_names}});
  std::cout << "trained " << a.cfg.epochs << " epochs; final loss " << log.epoch_loss.back()
            << ", training accuracy " << accuracy << "\n";
}

// ---------------------------------------------------------------------------

struct DivergeArgs {
  std::string a;
  std::string b;
  std::vector<std::string> exclude;
  std::size_t bins = 100;
  double epsilon = 1e-10;
  std::string out;
};

void run_diverge(const DivergeArgs& args) {
  tunescope::DivergenceOptions opts;
  opts.exclude = {args.exclude.begin(), args.exclude.end()};
  opts.histogram.bins = args.bins;
  opts.histogram.epsilon = args.epsilon;
  const auto a = load_checkpoint(args.a);
  const auto b = load_checkpoint(args.b);
  const auto report = tunescope::diverge_checkpoints(a, b, opts);
  const std::string table = tunescope::to_text_table(report);
  std::cout << table;
  for (const auto& u : report.unmatched_a) std::cerr << "unmatched in A: " << u.layer << " (" << u.reason << ")\n";
  for (const auto& u : report.unmatched_b) std::cerr << "unmatched in B: " << u.layer << " (" << u.reason << ")\n";
  if (!args.out.empty()) {
    fs::create_directories(args.out);
    auto j = tunescope::to_json(report);
    j["checkpoint_a"] = args.a;
    j["checkpoint_b"] = args.b;
    write_json(fs::path(args.out) / "report.json", j);
    tunescope::write_file_bytes((fs::path(args.out) / "report.txt").string(), table);
    write_config_echo(args.out, "diverge",
                      {{"a", args.a}, {"b", args.b}, {"exclude", args.exclude}, {"bins", args.bins},
                       {"epsilon", args.epsilon}});
  }
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string data;
  std::string checkpoint;
  std::string features = "penultimate";
  std::string head = "all";
  bool balanced = false;
  bool no_standardize = false;
  std::size_t folds = 3;
  std::size_t knn_k = 3;
  double svm_c = 1.0;
  std::size_t svm_epochs = 20;
  tunescope::TrainConfig fc = tunescope::SoftmaxHead::default_config();
  std::uint64_t seed = kDefaultSeed;
  std::string out;
  CLI::Option* seed_opt = nullptr;
};

void run_evaluate(const EvaluateArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  const auto ds = load_dataset(a.data);
  const auto pixels = tunescope::images_to_matrix(ds);
  Eigen::MatrixXd features;
  if (a.features == "penultimate") {
    if (a.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "required for penultimate features");
    const auto net = tunescope::import_checkpoint(load_checkpoint(a.checkpoint));
    features = tunescope::penultimate_features(net, pixels);
  } else {
    features = pixels;
  }
  const auto labels = ds.labels();
  const auto plan = tunescope::stratified_folds(labels, a.folds, seed);

  std::vector<tunescope::HeadKind> heads;
  if (a.head == "all")
    heads = {tunescope::HeadKind::knn, tunescope::HeadKind::svm, tunescope::HeadKind::fc};
  else
    heads = {tunescope::parse_head_kind(a.head)};

  fs::create_directories(a.out);
  for (const auto kind : heads) {
    tunescope::HeadSpec spec;
    spec.kind = kind;
    spec.knn_k = a.knn_k;
    spec.svm.c_slack = a.svm_c;
    spec.svm.epochs = a.svm_epochs;
    spec.fc = a.fc;
    spec.standardize = !a.no_standardize;
    const auto report = tunescope::run_experiment(features, labels, ds.class_names, spec, plan, a.balanced, seed);
    const std::string name = "eval_" + tunescope::to_string(kind);
    write_json(fs::path(a.out) / (name + ".json"), tunescope::to_json(report));
    const std::string text = tunescope::to_text(report);
    tunescope::write_file_bytes((fs::path(a.out) / (name + ".txt")).string(), text);
    std::cout << text << "\n";
  }
  write_config_echo(a.out, "evaluate",
                    {{"data", a.data},
                     {"checkpoint", a.checkpoint},
                     {"features", a.features},
                     {"head", a.head},
                     {"balanced", a.balanced},
                     {"standardize", !a.no_standardize},
                     {"folds", a.folds},
                     {"knn_k", a.knn_k},
                     {"svm_c", a.svm_c},
                     {"svm_epochs", a.svm_epochs},
                     {"fc", tunescope::to_json(a.fc)},
                     {"seed", seed},
                     {"class_names", ds.class_names},
                     {"census", ds.census()}});
}

// ---------------------------------------------------------------------------

struct ExplainArgs {
  std::string image;
  std::string checkpoint;
  std::string predictor_cmd;
  std::string segmenter = "slic";
  tunescope::SlicParams slic;
  std::size_t cell = 8;
  tunescope::LimeConfig lime;
  std::string distance = "cosine";
  std::string replacement = "mean";
  int fill = 0;
  std::vector<std::size_t> classes;
  std::vector<std::string> modes{"keep_positive", "heat"};
  std::uint64_t seed = kDefaultSeed;
  std::string out;
  CLI::Option* seed_opt = nullptr;
};

void run_explain(ExplainArgs a) {
  if (a.checkpoint.empty() == a.predictor_cmd.empty())
    throw CLI::ValidationError("predictor", "give exactly one of --checkpoint or --predictor-cmd");
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  a.lime.seed = seed;
  a.slic.seed = seed;
  a.lime.distance = a.distance == "euclidean" ? tunescope::MaskDistance::euclidean : tunescope::MaskDistance::cosine;
  if (a.replacement == "constant")
    a.lime.replacement = tunescope::ConstantReplacement{static_cast<std::uint8_t>(a.fill)};
  else
    a.lime.replacement = tunescope::SegmentMeanReplacement{};

  const auto image = tunescope::read_pgm(a.image);
  std::unique_ptr<tunescope::Predictor> predictor;
  if (!a.checkpoint.empty())
    predictor = std::make_unique<tunescope::NetPredictor>(tunescope::import_checkpoint(load_checkpoint(a.checkpoint)));
  else
    predictor = std::make_unique<tunescope::SubprocessPredictor>(a.predictor_cmd);

  tunescope::Segmenter segmenter = a.slic;
  if (a.segmenter == "grid") segmenter = tunescope::GridSegmenter{a.cell};

  const auto result = tunescope::explain_instance(image, *predictor, segmenter, a.lime, a.classes);

  fs::create_directories(a.out);
  json explanations = json::array();
  for (const auto& ex : result.explanations) {
    explanations.push_back(tunescope::to_json(ex));
    for (const auto& m : a.modes) {
      const auto mode = tunescope::parse_overlay_mode(m);
      tunescope::write_pgm((fs::path(a.out) / ("overlay_" + m + "_class" + std::to_string(ex.target_class) + ".pgm")).string(),
                           tunescope::render_overlay(image, result.segments, ex, mode));
    }
  }
  std::vector<double> original(static_cast<std::size_t>(result.original_probs.size()));
  for (std::size_t i = 0; i < original.size(); ++i) original[i] = result.original_probs[static_cast<Eigen::Index>(i)];
  write_json(fs::path(a.out) / "explanation.json",
             json{{"image", a.image},
                  {"segment_count", result.segments.segment_count},
                  {"original_probs", original},
                  {"explanations", explanations}});
  tunescope::write_pgm((fs::path(a.out) / "segments.pgm").string(), tunescope::segment_map_image(result.segments));

  json seg{{"kind", a.segmenter}};
  if (a.segmenter == "grid")
    seg["cell"] = a.cell;
  else
    seg.update({{"target_segments", a.slic.target_segments},
                {"compactness", a.slic.compactness},
                {"iterations", a.slic.iterations}});
  write_config_echo(a.out, "explain",
                    {{"image", a.image},
                     {"checkpoint", a.checkpoint},
                     {"predictor_cmd", a.predictor_cmd},
                     {"segmenter", seg},
                     {"lime", tunescope::to_json(a.lime)},
                     {"classes", a.classes},
                     {"modes", a.modes},
                     {"seed", seed}});
  for (const auto& ex : result.explanations) {
    std::cout << "class " << ex.target_class << ": r2 " << ex.local_fit_r2 << ", top segments";
    for (const auto& f : ex.features) std::cout << " " << f.segment << "(" << f.weight << ")";
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tunescope: fine-tuning diagnostics for image classifiers"};
  app.require_subcommand(1);

  // gen
  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic flat/ripple/rocky/crater dataset tree");
  gen_cmd->add_option("--counts", gen.counts, "Images per class: flat,ripple,rocky,crater")
      ->delimiter(',')
      ->expected(4)
      ->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image side length in pixels (>= 32)")->capture_default_str();
  gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  // train
  TrainArgs train;
  auto* train_cmd = app.add_subcommand(
      "train", "Train the reference network; writes initial.ntf, final.ntf and loss_log.json.\n"
               "Baseline mode (only the output layer learns) is --freeze fc1.");
  train_cmd->add_option("--data", train.data, "Dataset root (one directory of PGMs per class)")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--freeze", train.freeze, "Layer to keep fixed (fc1, fc2); repeatable");
  train_cmd->add_option("--hidden", train.hidden, "Hidden (penultimate) width")->capture_default_str();
  train_cmd->add_option("--lr", train.cfg.learning_rate, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--batch", train.cfg.batch_size, "Mini-batch size")->capture_default_str();
  train_cmd->add_option("--epochs", train.cfg.epochs, "Epochs")->capture_default_str();
  train_cmd->add_option("--beta1", train.cfg.adam_beta1, "Adam beta1")->capture_default_str();
  train_cmd->add_option("--beta2", train.cfg.adam_beta2, "Adam beta2")->capture_default_str();
  train_cmd->add_option("--adam-eps", train.cfg.adam_eps, "Adam epsilon")->capture_default_str();
  train_cmd->add_flag("--balanced", train.cfg.balanced, "Resample each epoch with inverse class frequency");
  train.seed_opt = train_cmd->add_option("--seed", train.seed, "Seed for init and batching")->capture_default_str();

  // diverge
  DivergeArgs div;
  auto* div_cmd = app.add_subcommand(
      "diverge",
      "Per-layer weight drift between two checkpoints.\n"
      "KL direction is D_KL(A || B) in nats with A = first argument (fine-tuned) and\n"
      "B = second argument (baseline). Each layer's histogram pools its weights and\n"
      "biases over shared uniform bins spanning both populations.");
  div_cmd->add_option("a", div.a, "Checkpoint A (fine-tuned)")->required();
  div_cmd->add_option("b", div.b, "Checkpoint B (baseline)")->required();
  div_cmd->add_option("--exclude", div.exclude, "Layer id to skip, e.g. the output layer; repeatable");
  div_cmd->add_option("--bins", div.bins, "Histogram bins")->capture_default_str()->check(CLI::PositiveNumber);
  div_cmd->add_option("--epsilon", div.epsilon, "Additive smoothing per bin")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  div_cmd->add_option("--out", div.out, "Directory for report.json / report.txt");

  // evaluate
  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Stratified k-fold evaluation of KNN / linear SVM / softmax heads");
  ev_cmd->add_option("--data", ev.data, "Dataset root")->required();
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "Reference-network checkpoint providing penultimate features");
  ev_cmd->add_option("--features", ev.features, "Feature source")
      ->check(CLI::IsMember({"penultimate", "pixels"}))
      ->capture_default_str();
  ev_cmd->add_option("--head", ev.head, "Classifier head")
      ->check(CLI::IsMember({"knn", "svm", "fc", "all"}))
      ->capture_default_str();
  ev_cmd->add_flag("--balanced", ev.balanced, "Resample training folds with inverse class frequency");
  ev_cmd->add_flag("--no-standardize", ev.no_standardize,
                   "Feed raw features to the heads (default: z-score with training-fold statistics)");
  ev_cmd->add_option("--folds", ev.folds, "Number of stratified folds")->capture_default_str();
  ev_cmd->add_option("--knn-k", ev.knn_k, "Neighbours for KNN")->capture_default_str();
  ev_cmd->add_option("--svm-c", ev.svm_c, "SVM slack C")->capture_default_str();
  ev_cmd->add_option("--svm-epochs", ev.svm_epochs, "SVM passes over the data")->capture_default_str();
  ev_cmd->add_option("--fc-epochs", ev.fc.epochs, "Softmax head epochs")->capture_default_str();
  ev_cmd->add_option("--fc-lr", ev.fc.learning_rate, "Softmax head learning rate")->capture_default_str();
  ev_cmd->add_option("--fc-batch", ev.fc.batch_size, "Softmax head batch size")->capture_default_str();
  ev.seed_opt = ev_cmd->add_option("--seed", ev.seed, "Seed for folds, resampling and heads")->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Output directory")->required();

  // explain
  ExplainArgs ex;
  auto* ex_cmd = app.add_subcommand("explain", "LIME explanation of one image");
  ex_cmd->add_option("--image", ex.image, "Binary PGM image")->required();
  ex_cmd->add_option("--checkpoint", ex.checkpoint, "Reference-network checkpoint to explain");
  ex_cmd->add_option("--predictor-cmd", ex.predictor_cmd, "Shell command speaking the predictor protocol");
  ex_cmd->add_option("--segmenter", ex.segmenter, "Superpixel method")
      ->check(CLI::IsMember({"slic", "grid"}))
      ->capture_default_str();
  ex_cmd->add_option("--segments", ex.slic.target_segments, "SLIC target segment count")->capture_default_str();
  ex_cmd->add_option("--compactness", ex.slic.compactness, "SLIC compactness")->capture_default_str();
  ex_cmd->add_option("--slic-iterations", ex.slic.iterations, "SLIC iterations")->capture_default_str();
  ex_cmd->add_option("--cell", ex.cell, "Grid cell size")->capture_default_str();
  ex_cmd->add_option("--samples", ex.lime.num_samples, "Perturbed samples")->capture_default_str();
  ex_cmd->add_option("--sigma", ex.lime.sigma, "Kernel width")->capture_default_str();
  ex_cmd->add_option("--distance", ex.distance, "Mask distance")
      ->check(CLI::IsMember({"cosine", "euclidean"}))
      ->capture_default_str();
  ex_cmd->add_option("--max-features", ex.lime.max_features, "Superpixels kept in the explanation")
      ->capture_default_str();
  ex_cmd->add_option("--lambda", ex.lime.ridge_lambda, "Ridge penalty")->capture_default_str();
  ex_cmd->add_option("--replacement", ex.replacement, "Fill for switched-off superpixels")
      ->check(CLI::IsMember({"mean", "constant"}))
      ->capture_default_str();
  ex_cmd->add_option("--fill", ex.fill, "Gray value for --replacement constant")
      ->check(CLI::Range(0, 255))
      ->capture_default_str();
  ex_cmd->add_option("--class", ex.classes, "Class to explain; repeatable (default: predicted class)");
  ex_cmd->add_option("--modes", ex.modes, "Overlay modes")
      ->delimiter(',')
      ->check(CLI::IsMember({"keep_positive", "heat"}))
      ->capture_default_str();
  ex.seed_opt = ex_cmd->add_option("--seed", ex.seed, "Seed for sampling and segmentation")->capture_default_str();
  ex_cmd->add_option("--out", ex.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen_cmd) run_gen(gen);
    if (*train_cmd) run_train(train);
    if (*div_cmd) run_diverge(div);
    if (*ev_cmd) run_evaluate(ev);
    if (*ex_cmd) run_explain(ex);
  } catch (const CLI::ParseError& e) {
    std::cerr << "tunescope: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "tunescope: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
