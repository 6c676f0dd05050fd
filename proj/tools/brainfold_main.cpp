// brainfold: single entry point for every pipeline stage.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "CLI11.hpp"

#include "brainfold/io.hpp"
#include "brainfold/pipeline.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace brainfold;

namespace {

std::string sci(double v) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << std::scientific << std::setprecision(3) << v;
  return out.str();
}

std::string full(double v) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << std::setprecision(17) << v;
  return out.str();
}

void write_text_file(const fs::path& path, const std::string& text, const std::string& stage) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), stage, "cannot open for writing: " + path.string());
  out << text;
  require(out.good(), stage, "write failed: " + path.string());
}

// Synthetic image labels in the table format `evaluate --labels` reads.
std::string synth_labels_csv(const SynthSpec& spec) {
  std::string out = "image_id, class_id\n";
  for (std::uint32_t img = 0; img < spec.image_count(); ++img)
    out += std::to_string(img) + ", " +
           std::to_string(img / static_cast<std::uint32_t>(spec.images_per_class)) + "\n";
  return out;
}

// --------------------------------------------------------------------------
// Shared flag bundles
// --------------------------------------------------------------------------

struct DataFlags {
  std::string eeg_path;
  std::uint32_t classes = 40;
  std::uint32_t subjects = 7;
  std::uint32_t channels = 29;
  double amplitude_limit = 100.0;
  std::uint32_t min_samples = 120;

  void attach(CLI::App* cmd) {
    cmd->add_option("--eeg", eeg_path, "input recordings (.bfeeg binary or .csv)")
        ->required();
    cmd->add_option("--classes", classes, "number of stimulus classes in the file")
        ->capture_default_str();
    cmd->add_option("--subjects", subjects, "number of subjects in the file")
        ->capture_default_str();
    cmd->add_option("--channels", channels, "required channel count per sequence")
        ->capture_default_str();
    cmd->add_option("--amplitude-limit", amplitude_limit,
                    "reject sequences whose absolute amplitude exceeds this")
        ->capture_default_str();
    cmd->add_option("--min-samples", min_samples, "reject sequences shorter than this")
        ->capture_default_str();
  }

  DatasetLoadResult load() const {
    ValidationLimits limits;
    limits.amplitude_threshold = amplitude_limit;
    limits.channel_count = channels;
    limits.min_samples = min_samples;
    return load_dataset(eeg_path, {}, limits, classes, subjects);
  }
};

struct WindowFlag {
  std::string window_text;

  void attach(CLI::App* cmd) {
    cmd->add_option("--window", window_text,
                    "crop each sequence to 'start-end' milliseconds (empty = keep all)")
        ->capture_default_str();
  }

  Dataset apply(Dataset ds) const {
    if (window_text.empty()) return ds;
    return window_dataset(ds, parse_window(window_text));
  }
};

// --------------------------------------------------------------------------
// Prediction / label CSV parsing for `classify` and `evaluate`
// --------------------------------------------------------------------------

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path,
                                                    const std::string& stage) {
  std::ifstream in(path);
  require(in.good(), stage, "cannot open: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream split(line);
    while (std::getline(split, field, ',')) fields.push_back(detail::trim(field));
    rows.push_back(std::move(fields));
  }
  return rows;
}

bool numeric_field(const std::string& text) {
  if (text.empty()) return false;
  return text.find_first_not_of("0123456789") == std::string::npos;
}

std::uint32_t parse_id(const std::string& text, const fs::path& path,
                       const std::string& stage) {
  require(numeric_field(text), stage,
          "expected an unsigned integer, got '" + text + "' in " + path.string());
  return static_cast<std::uint32_t>(std::stoul(text));
}

// Accepts 2-column (image_id, class), 3-column classify output
// (image_id, predicted_class, max_prob), or the 4-column experiment dump
// (image_id, true_class, predicted_class, max_prob). A non-numeric first
// row is treated as a header.
std::vector<std::pair<std::uint32_t, std::uint32_t>> read_class_file(
    const fs::path& path, bool prediction_file, const std::string& stage) {
  auto rows = read_csv_rows(path, stage);
  if (!rows.empty() && !numeric_field(rows.front().front())) rows.erase(rows.begin());
  require(!rows.empty(), stage, "no rows in " + path.string());
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (const auto& fields : rows) {
    require(fields.size() >= 2, stage, "rows need at least image_id and class columns in " +
                                           path.string());
    const std::size_t class_col = (prediction_file && fields.size() == 4) ? 2 : 1;
    out.emplace_back(parse_id(fields[0], path, stage),
                     parse_id(fields[class_col], path, stage));
  }
  return out;
}

// --------------------------------------------------------------------------
// Feature-table pairing for `fit-regressor`
// --------------------------------------------------------------------------

struct JoinedPairs {
  Mat x, y;
  std::vector<std::uint32_t> ids;
};

JoinedPairs join_tables(const ImageFeatureTable& inputs, const ImageFeatureTable& targets,
                        const std::string& stage) {
  require(!targets.features.empty(), stage, "target table is empty");
  JoinedPairs out;
  out.x.resize(static_cast<Eigen::Index>(targets.features.size()), inputs.dimension());
  out.y.resize(static_cast<Eigen::Index>(targets.features.size()), targets.dimension());
  Eigen::Index row = 0;
  for (const auto& [image_id, target] : targets.features) {
    auto it = inputs.features.find(image_id);
    require(it != inputs.features.end(), stage,
            "image " + std::to_string(image_id) + " has no input feature");
    out.x.row(row) = it->second.transpose();
    out.y.row(row) = target.transpose();
    out.ids.push_back(image_id);
    ++row;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "brainfold: EEG manifold learning and image-feature regression pipeline"};
  app.require_subcommand(1);

  // ----- synth -------------------------------------------------------------
  auto* synth_cmd = app.add_subcommand(
      "synth", "generate a synthetic evoked-EEG dataset with image features");
  std::string synth_out;
  SynthSpec synth_spec;
  std::string synth_mode = "oscillatory";
  Eigen::Index synth_feature_dim = 16;
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--classes", synth_spec.class_count, "stimulus classes")
      ->capture_default_str();
  synth_cmd
      ->add_option("--images-per-class", synth_spec.images_per_class, "images per class")
      ->capture_default_str();
  synth_cmd->add_option("--subjects", synth_spec.subject_count, "subjects")
      ->capture_default_str();
  synth_cmd->add_option("--channels", synth_spec.channel_count, "EEG channels")
      ->capture_default_str();
  synth_cmd->add_option("--rate", synth_spec.sample_rate_hz, "sampling rate in Hz")
      ->capture_default_str();
  synth_cmd
      ->add_option("--duration-ms", synth_spec.per_image_duration_ms,
                   "per-image recording length in ms")
      ->capture_default_str();
  synth_cmd->add_option("--noise", synth_spec.noise_sigma, "white-noise sigma")
      ->capture_default_str();
  synth_cmd
      ->add_option("--jitter", synth_spec.subject_jitter,
                   "per-subject amplitude/phase jitter scale")
      ->capture_default_str();
  synth_cmd
      ->add_option("--mode", synth_mode, "signal mode: oscillatory or late_transient")
      ->capture_default_str();
  synth_cmd
      ->add_option("--onset-ms", synth_spec.onset_ms,
                   "class-signature onset for late_transient mode")
      ->capture_default_str();
  synth_cmd
      ->add_option("--decay-ms", synth_spec.decay_ms,
                   "transient decay constant for late_transient mode")
      ->capture_default_str();
  synth_cmd
      ->add_option("--feature-sigma", synth_spec.feature_sigma,
                   "per-image image-feature perturbation sigma")
      ->capture_default_str();
  synth_cmd->add_option("--feature-dim", synth_feature_dim, "image-feature dimension")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth_spec.seed, "random seed")->capture_default_str();
  synth_cmd->callback([&]() {
    synth_spec.mode = signal_mode_from_name(synth_mode);
    const SynthResult result = generate_dataset(synth_spec);
    const ImageFeatureTable features =
        generate_image_features(synth_spec, synth_feature_dim);
    const fs::path dir(synth_out);
    fs::create_directories(dir);
    io::write_eeg_file(dir / "recordings.bfeeg", result.dataset.sequences, "synth");
    io::write_feature_table(dir / "image_features.bfimf", features, false, "synth");
    write_text_file(dir / "ground_truth.txt", result.truth.to_text(), "synth");
    write_text_file(dir / "labels.csv", synth_labels_csv(result.truth.spec), "synth");
    std::cout << "wrote " << result.dataset.sequences.size() << " sequences, "
              << features.features.size() << " image features to " << dir.string() << "\n";
  });

  // ----- preprocess ----------------------------------------------------------
  auto* pre_cmd = app.add_subcommand(
      "preprocess", "notch + band-pass filter recordings, optionally crop a window");
  DataFlags pre_data;
  WindowFlag pre_window;
  std::string pre_out;
  double pre_low = 14.0, pre_high = 71.0, pre_notch_low = 49.0, pre_notch_high = 51.0;
  int pre_order = 2;
  pre_data.attach(pre_cmd);
  pre_window.attach(pre_cmd);
  pre_cmd->add_option("--out", pre_out, "output recordings file")->required();
  pre_cmd->add_option("--low", pre_low, "band-pass low cut-off in Hz")
      ->capture_default_str();
  pre_cmd->add_option("--high", pre_high, "band-pass high cut-off in Hz")
      ->capture_default_str();
  pre_cmd->add_option("--order", pre_order, "Butterworth order")->capture_default_str();
  pre_cmd->add_option("--notch-low", pre_notch_low, "notch low edge in Hz")
      ->capture_default_str();
  pre_cmd->add_option("--notch-high", pre_notch_high, "notch high edge in Hz")
      ->capture_default_str();
  pre_cmd->callback([&]() {
    const DatasetLoadResult loaded = pre_data.load();
    Dataset filtered = filter_dataset(loaded.dataset, pre_low, pre_high, pre_order,
                                      pre_notch_low, pre_notch_high);
    filtered = pre_window.apply(std::move(filtered));
    io::write_eeg_file(pre_out, filtered.sequences, "preprocess");
    std::cout << loaded.report.to_text() << "\n";
    std::cout << "wrote " << filtered.sequences.size() << " filtered sequences to "
              << pre_out << "\n";
  });

  // ----- train-encoder -------------------------------------------------------
  auto* train_cmd = app.add_subcommand(
      "train-encoder", "train a recurrent encoder and save the best-epoch model");
  DataFlags train_data;
  WindowFlag train_window;
  std::string train_out, train_history, train_layout = "32 common, 32 output";
  bool train_standardize = true;
  TrainHyper train_hyper;
  double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;
  std::uint64_t train_seed = 0;
  int train_threads = 1;
  train_data.attach(train_cmd);
  train_window.attach(train_cmd);
  train_cmd->add_option("--out", train_out, "output encoder model file")->required();
  train_cmd->add_option("--history", train_history, "optional per-epoch history CSV");
  train_cmd
      ->add_option("--layout", train_layout,
                   "architecture, e.g. '64 common', '5 channel, 32 common', "
                   "'32 common, 32 output'")
      ->capture_default_str();
  train_cmd
      ->add_flag("--standardize,!--no-standardize", train_standardize,
                 "per-channel standardization before encoding")
      ->capture_default_str();
  train_cmd->add_option("--lr", train_hyper.learning_rate, "SGD learning rate")
      ->capture_default_str();
  train_cmd->add_option("--momentum", train_hyper.momentum, "SGD momentum")
      ->capture_default_str();
  train_cmd->add_option("--batch", train_hyper.batch_size, "minibatch size")
      ->capture_default_str();
  train_cmd->add_option("--epochs", train_hyper.epochs, "training epochs")
      ->capture_default_str();
  train_cmd
      ->add_option("--clip", train_hyper.clip_norm, "gradient clip norm (0 disables)")
      ->capture_default_str();
  train_cmd->add_option("--forget-bias", train_hyper.forget_bias, "LSTM forget-gate bias")
      ->capture_default_str();
  train_cmd->add_option("--train", train_frac, "training split fraction")
      ->capture_default_str();
  train_cmd->add_option("--val", val_frac, "validation split fraction")
      ->capture_default_str();
  train_cmd->add_option("--test", test_frac, "test split fraction")->capture_default_str();
  train_cmd->add_option("--seed", train_seed, "random seed")->capture_default_str();
  train_cmd->add_option("--threads", train_threads, "worker threads")
      ->envname("BRAINFOLD_THREADS")
      ->capture_default_str();
  train_cmd->callback([&]() {
    const DatasetLoadResult loaded = train_data.load();
    const Dataset ds = train_window.apply(loaded.dataset);
    const SplitAssignment split =
        split_dataset(ds, {train_frac, val_frac, test_frac}, train_seed);
    EncoderConfig cfg;
    parse_encoder_layout(train_layout, cfg);
    cfg.channel_count = static_cast<int>(ds.channel_count);
    cfg.class_count = static_cast<int>(ds.class_count);
    cfg.standardize = train_standardize;
    train_hyper.threads = train_threads;
    const TrainResult result = train_encoder(ds, split, cfg, train_hyper, train_seed);
    save_encoder(train_out, result.model);
    if (!train_history.empty())
      write_text_file(train_history, result.history.to_text(), "train-encoder");
    const EpochRecord& best = result.history.best();
    std::cout << loaded.report.to_text() << "\n";
    std::cout << "best epoch " << best.epoch << ": val_acc "
              << format_fixed(best.val_acc, 6) << ", test_acc "
              << format_fixed(best.test_acc, 6) << "\n";
    std::cout << "wrote encoder to " << train_out << "\n";
  });

  // ----- extract-features ------------------------------------------------------
  auto* extract_cmd = app.add_subcommand(
      "extract-features", "run an encoder over recordings and archive per-sequence features");
  DataFlags extract_data;
  WindowFlag extract_window;
  std::string extract_encoder, extract_out;
  int extract_threads = 1;
  extract_data.attach(extract_cmd);
  extract_window.attach(extract_cmd);
  extract_cmd->add_option("--encoder", extract_encoder, "trained encoder model file")
      ->required();
  extract_cmd->add_option("--out", extract_out, "output feature archive")->required();
  extract_cmd->add_option("--threads", extract_threads, "worker threads")
      ->envname("BRAINFOLD_THREADS")
      ->capture_default_str();
  extract_cmd->callback([&]() {
    const DatasetLoadResult loaded = extract_data.load();
    const Dataset ds = extract_window.apply(loaded.dataset);
    const EncoderModel model = load_encoder(extract_encoder);
    const FeatureTable table = extract_features(model, ds, extract_threads);
    save_feature_table(extract_out, table);
    std::cout << "wrote " << table.vector_count() << " feature vectors for "
              << table.by_image.size() << " images to " << extract_out << "\n";
  });

  // ----- aggregate -------------------------------------------------------------
  auto* agg_cmd = app.add_subcommand(
      "aggregate", "collapse per-sequence features to one vector per image");
  std::string agg_in, agg_out, agg_strategy = "average";
  agg_cmd->add_option("--features", agg_in, "input per-sequence feature archive")
      ->required();
  agg_cmd->add_option("--out", agg_out, "output aggregated feature table")->required();
  agg_cmd->add_option("--strategy", agg_strategy, "average or best")
      ->capture_default_str();
  agg_cmd->callback([&]() {
    const FeatureTable table =
        table_from_archive(io::read_feature_archive(agg_in, "aggregate"));
    const FeatureTable result = aggregate(table, aggregation_from_name(agg_strategy));
    save_feature_table(agg_out, result);
    std::cout << "aggregated " << table.vector_count() << " vectors into "
              << result.by_image.size() << " (" << agg_strategy << ") -> " << agg_out
              << "\n";
  });

  // ----- fit-regressor -----------------------------------------------------------
  auto* fit_cmd = app.add_subcommand(
      "fit-regressor", "fit image features onto aggregated EEG features");
  std::string fit_x, fit_y, fit_out, fit_kind = "knn";
  RegressorSpec fit_spec;
  std::uint64_t fit_seed = 0;
  fit_cmd->add_option("--x", fit_x, "input image-feature table")->required();
  fit_cmd->add_option("--y", fit_y, "target aggregated EEG-feature table")->required();
  fit_cmd->add_option("--out", fit_out, "output regressor model file")->required();
  fit_cmd->add_option("--kind", fit_kind, "knn, ridge, or random_forest")
      ->capture_default_str();
  fit_cmd->add_option("--k", fit_spec.k, "k-NN neighbour count")->capture_default_str();
  fit_cmd->add_option("--lambda", fit_spec.lambda, "ridge penalty")->capture_default_str();
  fit_cmd->add_option("--trees", fit_spec.forest.tree_count, "forest size")
      ->capture_default_str();
  fit_cmd->add_option("--depth", fit_spec.forest.max_depth, "maximum tree depth")
      ->capture_default_str();
  fit_cmd->add_option("--min-leaf", fit_spec.forest.min_leaf, "minimum samples per leaf")
      ->capture_default_str();
  fit_cmd
      ->add_option("--mtry", fit_spec.forest.features_per_split,
                   "features tried per split (0 = sqrt of dimension)")
      ->capture_default_str();
  fit_cmd
      ->add_flag("--bootstrap,!--no-bootstrap", fit_spec.forest.bootstrap,
                 "bootstrap-sample each tree")
      ->capture_default_str();
  fit_cmd->add_option("--seed", fit_seed, "random seed (forest only)")
      ->capture_default_str();
  fit_cmd->callback([&]() {
    const std::string stage = "fit-regressor";
    const ImageFeatureTable inputs = io::read_feature_table(fit_x, stage);
    const ImageFeatureTable targets = io::read_feature_table(fit_y, stage);
    const JoinedPairs pairs = join_tables(inputs, targets, stage);
    fit_spec.kind = regressor_kind_from_name(fit_kind);
    fit_spec.forest.seed = fit_seed;
    const RegressorModel model = fit_regressor(fit_spec, pairs.x, pairs.y);
    save_regressor(fit_out, model);
    std::cout << "fitted " << regressor_kind_name(model.kind) << " ("
              << model.params_summary() << ") on " << pairs.ids.size() << " pairs -> "
              << fit_out << "\n";
  });

  // ----- classify ------------------------------------------------------------------
  auto* classify_cmd = app.add_subcommand(
      "classify", "predict classes for image features via the regressor + encoder head");
  std::string cls_regressor, cls_encoder, cls_features, cls_out;
  classify_cmd->add_option("--regressor", cls_regressor, "regressor model file")
      ->required();
  classify_cmd->add_option("--encoder", cls_encoder, "encoder model file")->required();
  classify_cmd->add_option("--features", cls_features, "image-feature table to classify")
      ->required();
  classify_cmd->add_option("--out", cls_out, "output CSV (stdout when omitted)");
  classify_cmd->callback([&]() {
    const RegressorModel reg = load_regressor(cls_regressor);
    const EncoderModel enc = load_encoder(cls_encoder);
    const ImageFeatureTable features = io::read_feature_table(cls_features, "classify");
    std::string csv = "image_id, predicted_class, max_prob\n";
    for (const auto& [image_id, x] : features.features) {
      const Classification c = classify_image_features(reg, enc, x);
      csv += std::to_string(image_id) + ", " + std::to_string(c.class_id) + ", " +
             format_fixed(c.probabilities.maxCoeff(), 6) + "\n";
    }
    if (cls_out.empty())
      std::cout << csv;
    else {
      write_text_file(cls_out, csv, "classify");
      std::cout << "wrote " << features.features.size() << " predictions to " << cls_out
                << "\n";
    }
  });

  // ----- evaluate --------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand(
      "evaluate", "score a prediction file against a label file (exact match)");
  std::string eval_predictions, eval_labels;
  eval_cmd->add_option("--predictions", eval_predictions, "prediction CSV")->required();
  eval_cmd->add_option("--labels", eval_labels, "label CSV (image_id, class)")->required();
  eval_cmd->callback([&]() {
    const std::string stage = "evaluate";
    const auto predicted = read_class_file(eval_predictions, true, stage);
    const auto labelled = read_class_file(eval_labels, false, stage);
    require(predicted.size() == labelled.size(), stage,
            "prediction/label counts differ (" + std::to_string(predicted.size()) +
                " vs " + std::to_string(labelled.size()) + ")");
    std::map<std::uint32_t, std::uint32_t> label_of;
    for (const auto& [image_id, cls] : labelled) label_of[image_id] = cls;
    std::vector<std::uint32_t> p, t;
    for (const auto& [image_id, cls] : predicted) {
      auto it = label_of.find(image_id);
      require(it != label_of.end(), stage,
              "image " + std::to_string(image_id) + " has no label");
      p.push_back(cls);
      t.push_back(it->second);
    }
    const double acc = evaluate_accuracy(p, t);
    std::cout << "images: " << p.size() << "\n";
    std::cout << "accuracy: " << format_fixed(acc, 6) << "\n";
  });

  // ----- experiment -----------------------------------------------------------------
  auto* exp_cmd = app.add_subcommand(
      "experiment", "run the full grid (encoders x windows x regressors) and write reports");
  std::string exp_config, exp_out_root = ".";
  std::vector<std::string> exp_sets;
  std::uint64_t exp_seed = 0;
  int exp_threads = 1;
  exp_cmd->add_option("--config", exp_config, "config file (defaults used when omitted)");
  exp_cmd->add_option("--out", exp_out_root, "directory that receives the run directory")
      ->capture_default_str();
  exp_cmd->add_option("--set", exp_sets,
                      "override a config key, e.g. --set train.epochs=20 (flags win)");
  exp_cmd->add_option("--seed", exp_seed, "random seed")->capture_default_str();
  exp_cmd->add_option("--threads", exp_threads, "worker threads")
      ->envname("BRAINFOLD_THREADS")
      ->capture_default_str();
  exp_cmd->callback([&]() {
    const std::string stage = "experiment";
    PipelineConfig config =
        exp_config.empty() ? PipelineConfig() : PipelineConfig::from_file(exp_config);
    for (const std::string& pair : exp_sets) {
      const auto eq = pair.find('=');
      require(eq != std::string::npos, "config",
              "--set expects key=value, got '" + pair + "'");
      config.set(detail::trim(pair.substr(0, eq)), detail::trim(pair.substr(eq + 1)),
                 "--set");
    }
    const fs::path run_dir = fs::path(exp_out_root) / config.run_directory_name(exp_seed);
    fs::create_directories(run_dir);
    write_text_file(run_dir / "config.txt", config.canonical_text(), stage);

    ExperimentConfig exp = experiment_from_config(config, exp_seed, exp_threads);
    const auto flush = [&](const ExperimentReport& report) {
      ExperimentReport stamped = report;
      stamped.config_hash = config.hash_hex();
      write_text_file(run_dir / "report.json", stamped.to_json().dump(2) + "\n", stage);
      write_text_file(run_dir / "encoder_grid.csv", stamped.encoder_grid_csv(), stage);
      write_text_file(run_dir / "regressor_grid.csv", stamped.regressor_grid_csv(), stage);
      write_text_file(run_dir / "end_to_end.csv", stamped.end_to_end_csv(), stage);
      for (const EndToEndCell& cell : stamped.end_to_end_cells) {
        const std::string name =
            "predictions-" +
            sanitize_label(cell.layout + " " + cell.window + " " + cell.kind) + ".csv";
        write_text_file(run_dir / name, ExperimentReport::predictions_csv(cell), stage);
      }
    };
    if (exp.eeg_path.empty()) {
      const ResolvedSynth resolved = resolve_synth(exp.synth);
      const SynthGroundTruth truth{resolved.spec, resolved.background};
      write_text_file(run_dir / "ground_truth.txt", truth.to_text(), stage);
      write_text_file(run_dir / "labels.csv", synth_labels_csv(resolved.spec), stage);
    }
    const ExperimentReport report = run_experiment(exp, flush);
    flush(report);
    std::cout << "run directory: " << run_dir.string() << "\n";
    for (const EncoderCell& c : report.encoder_cells)
      std::cout << "encoder [" << c.layout << " | " << c.window << " ms]: max_va "
                << format_fixed(c.max_va, 6) << ", ta " << format_fixed(c.ta_at_max_va, 6)
                << " (epoch " << c.best_epoch << ")\n";
    for (std::size_t i = 0; i < report.end_to_end_cells.size(); ++i) {
      const EndToEndCell& c = report.end_to_end_cells[i];
      std::cout << "end-to-end [" << c.layout << " | " << c.window << " ms | " << c.kind
                << "]: accuracy " << format_fixed(c.accuracy_overall, 6)
                << " (per-class mean " << format_fixed(c.accuracy_per_class_mean, 6)
                << "), regression mse "
                << format_fixed(report.regressor_cells[i].mse, 6) << "\n";
    }
    std::cout << "report: " << (run_dir / "report.json").string() << "\n";
  });

  // ----- dsp probe --------------------------------------------------------------------
  auto* dsp_cmd = app.add_subcommand("dsp", "signal-processing utilities");
  dsp_cmd->require_subcommand(1);
  auto* probe_cmd = dsp_cmd->add_subcommand(
      "probe", "design a filter and print coefficients and frequency response");
  std::string probe_kind = "bandpass";
  double probe_low = 14.0, probe_high = 71.0, probe_rate = 250.0;
  int probe_order = 2;
  std::vector<double> probe_at;
  probe_cmd->add_option("--kind", probe_kind, "bandpass or notch")->capture_default_str();
  probe_cmd->add_option("--low", probe_low, "low cut-off / band edge in Hz")
      ->capture_default_str();
  probe_cmd->add_option("--high", probe_high, "high cut-off / band edge in Hz")
      ->capture_default_str();
  probe_cmd->add_option("--order", probe_order, "Butterworth order (bandpass)")
      ->capture_default_str();
  probe_cmd->add_option("--rate", probe_rate, "sampling rate in Hz")->capture_default_str();
  probe_cmd->add_option("--at", probe_at, "frequencies (Hz) to report gain at");
  probe_cmd->callback([&]() {
    dsp::IirFilterSpec spec;
    if (probe_kind == "bandpass")
      spec.kind = dsp::FilterKind::bandpass_butterworth;
    else if (probe_kind == "notch")
      spec.kind = dsp::FilterKind::notch;
    else
      fail("dsp-probe", "unknown filter kind '" + probe_kind + "'");
    spec.order = probe_order;
    spec.low_cut_hz = probe_low;
    spec.high_cut_hz = probe_high;
    spec.sample_rate_hz = probe_rate;
    const dsp::IirCoefficients coeffs = dsp::design_filter(spec);
    std::cout << "kind: " << probe_kind << ", order: " << probe_order << ", band: "
              << full(probe_low) << "-" << full(probe_high) << " Hz @ " << full(probe_rate)
              << " Hz\n";
    std::cout << "sections: " << coeffs.sections.size() << "\n";
    for (std::size_t i = 0; i < coeffs.sections.size(); ++i) {
      const dsp::Biquad& s = coeffs.sections[i];
      std::cout << "  section " << i << ": b = [" << full(s.b0) << ", " << full(s.b1)
                << ", " << full(s.b2) << "], a = [1, " << full(s.a1) << ", " << full(s.a2)
                << "]\n";
    }
    std::cout << "max pole magnitude: " << full(coeffs.max_pole_magnitude()) << "\n";
    std::cout << "stable: " << (coeffs.stable() ? "yes" : "no") << "\n";
    if (probe_at.empty())
      probe_at = {probe_low, std::sqrt(probe_low * probe_high), probe_high};
    for (double f : probe_at)
      std::cout << "gain @ " << full(f) << " Hz: "
                << format_fixed(dsp::gain_db(coeffs, f), 4) << " dB\n";
  });

  // ----- grad-check ---------------------------------------------------------------------
  auto* grad_cmd = app.add_subcommand(
      "grad-check", "compare analytic encoder gradients with finite differences");
  std::string grad_arch = "common_output";
  int grad_hidden = 8, grad_output = 0, grad_channels = 4, grad_classes = 3,
      grad_length = 12;
  double grad_epsilon = 1e-5;
  std::uint64_t grad_seed = 1;
  grad_cmd->add_option("--arch", grad_arch, "common, channel_common, or common_output")
      ->capture_default_str();
  grad_cmd->add_option("--hidden", grad_hidden, "hidden size")->capture_default_str();
  grad_cmd->add_option("--output", grad_output, "output width (0 = same as hidden)")
      ->capture_default_str();
  grad_cmd->add_option("--channels", grad_channels, "input channels")
      ->capture_default_str();
  grad_cmd->add_option("--classes", grad_classes, "class count")->capture_default_str();
  grad_cmd->add_option("--length", grad_length, "sequence length in samples")
      ->capture_default_str();
  grad_cmd->add_option("--epsilon", grad_epsilon, "finite-difference step")
      ->capture_default_str();
  grad_cmd->add_option("--seed", grad_seed, "random seed")->capture_default_str();
  grad_cmd->callback([&]() {
    EncoderConfig cfg;
    cfg.arch = arch_from_name(grad_arch);
    cfg.common_sizes = {grad_hidden};
    cfg.channel_hidden = grad_hidden;
    cfg.output_size = grad_output > 0 ? grad_output : grad_hidden;
    cfg.channel_count = grad_channels;
    cfg.class_count = grad_classes;
    cfg.standardize = false;
    const EncoderModel model = init_encoder(cfg, grad_seed);
    Rng rng = substream(grad_seed, {0x97ad});
    EegSequence seq;
    seq.samples.resize(grad_channels, grad_length);
    for (Eigen::Index c = 0; c < seq.samples.rows(); ++c)
      for (Eigen::Index t = 0; t < seq.samples.cols(); ++t)
        seq.samples(c, t) = rng.normal();
    const auto label = static_cast<std::uint32_t>(rng.below(grad_classes));
    const double err = grad_check(model, seq, label, grad_epsilon);
    std::cout << "arch: " << grad_arch << ", hidden: " << grad_hidden << ", channels: "
              << grad_channels << ", length: " << grad_length << ", classes: "
              << grad_classes << ", label: " << label << "\n";
    std::cout << "max relative error: " << sci(err) << "\n";
    require(err < 1e-4, "grad-check",
            "max relative error " + sci(err) + " is not below 1e-4");
    std::cout << "PASS (threshold 1e-4)\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const PipelineError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "[internal] " << e.what() << "\n";
    return 2;
  }
  return 0;
}
