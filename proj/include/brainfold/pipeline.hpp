#pragma once

#include "brainfold/common.hpp"
#include "brainfold/config.hpp"
#include "brainfold/dataset.hpp"
#include "brainfold/dsp.hpp"
#include "brainfold/encoder.hpp"
#include "brainfold/manifold.hpp"
#include "brainfold/regress.hpp"
#include "brainfold/synth.hpp"

#include "json.hpp"

#include <array>
#include <cctype>
#include <cstdint>
#include <functional>
#include <locale>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace brainfold {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Stage composition: regressor output into the frozen softmax head
// ---------------------------------------------------------------------------

struct Classification {
  std::uint32_t class_id = 0;
  Vec probabilities;
};

/// Chains regressor and encoder head: image feature -> predicted EEG feature
/// -> class probabilities -> argmax (ties to the lowest class id).
inline Classification classify_image_features(const RegressorModel& regressor,
                                              const EncoderModel& encoder, const Vec& x) {
  require(regressor.output_dim == encoder.config.feature_dimension(), "classify",
          "regressor output dimension " + std::to_string(regressor.output_dim) +
              " does not match the encoder feature dimension " +
              std::to_string(encoder.config.feature_dimension()));
  const Vec feature = predict(regressor, x);  // regressor-stage errors name it
  const Vec probs = classify_features(encoder, feature);
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[best]) best = k;
  return {static_cast<std::uint32_t>(best), probs};
}

/// Fraction of exact matches.
inline double evaluate_accuracy(const std::vector<std::uint32_t>& predictions,
                                const std::vector<std::uint32_t>& labels) {
  const std::string stage = "evaluate";
  require(!predictions.empty(), stage, "no predictions to score");
  require(predictions.size() == labels.size(), stage,
          "prediction/label counts differ (" + std::to_string(predictions.size()) + " vs " +
              std::to_string(labels.size()) + ")");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Test-split isolation audit
// ---------------------------------------------------------------------------

/// Counts test-split items appearing in the input collections of fitting
/// stages (encoder training, aggregation for fitting, regressor fitting).
/// The experiment runner records every item it hands to those stages; the
/// counter must stay zero. Evaluation-side reads (per-epoch test accuracy,
/// MSE targets, end-to-end scoring) are measurements and are not recorded.
struct StageAudit {
  std::uint64_t test_reads_during_fit = 0;

  void record_sequence(const EegSequence& seq, const SplitAssignment& split) {
    if (split.of(seq.image_id) == Split::test) ++test_reads_during_fit;
  }
  void record_image(std::uint32_t image_id, const SplitAssignment& split) {
    if (split.of(image_id) == Split::test) ++test_reads_during_fit;
  }
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct RegressorSpec {
  RegressorKind kind = RegressorKind::knn;
  int k = 5;
  double lambda = 1.0;
  ForestParams forest;
};

inline RegressorModel fit_regressor(const RegressorSpec& spec, const Mat& x, const Mat& y) {
  switch (spec.kind) {
    case RegressorKind::knn: return fit_knn(x, y, spec.k);
    case RegressorKind::ridge: return fit_ridge(x, y, spec.lambda);
    default: return fit_random_forest(x, y, spec.forest);
  }
}

struct ExperimentConfig {
  // Data sources; empty paths mean synthetic generation.
  std::string eeg_path;
  std::string image_features_path;
  SynthSpec synth;
  Eigen::Index feature_dim = 16;
  ValidationLimits limits;  // applies to recorded files
  std::uint32_t file_classes = 40;
  std::uint32_t file_subjects = 7;

  // Preprocessing.
  double filter_low_hz = 14.0;
  double filter_high_hz = 71.0;
  int filter_order = 2;
  double notch_low_hz = 49.0;
  double notch_high_hz = 51.0;

  // Grids.
  std::vector<std::string> layouts;
  std::vector<dsp::TimeWindow> windows;
  std::vector<RegressorSpec> regressors;
  FeatureAggregation aggregation = FeatureAggregation::average;
  bool standardize = true;

  // Training.
  TrainHyper hyper;
  std::array<double, 3> split_fractions{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    const std::string stage = "experiment";
    require(!layouts.empty(), stage, "layout grid is empty");
    require(!windows.empty(), stage, "window grid is empty");
    require(!regressors.empty(), stage, "regressor grid is empty");
    require(feature_dim >= 1, stage, "image-feature dimension must be >= 1");
    require(aggregation != FeatureAggregation::none, stage,
            "experiment aggregation must be average or best");
    if (!eeg_path.empty())
      require(!image_features_path.empty(), stage,
              "recorded datasets need an image-feature file (synthetic features track "
              "synthetic classes only)");
  }
};

inline FeatureAggregation aggregation_from_name(const std::string& name) {
  if (name == "average") return FeatureAggregation::average;
  if (name == "best") return FeatureAggregation::best;
  if (name == "none") return FeatureAggregation::none;
  fail("config", "unknown aggregation '" + name + "'");
}

inline SignalMode signal_mode_from_name(const std::string& name) {
  if (name == "oscillatory") return SignalMode::oscillatory;
  if (name == "late_transient") return SignalMode::late_transient;
  fail("config", "unknown signal mode '" + name + "'");
}

inline dsp::TimeWindow parse_window(const std::string& text) {
  const auto dash = text.find('-');
  require(dash != std::string::npos && dash > 0 && dash + 1 < text.size(), "config",
          "window '" + text + "' must look like 'start-end' in ms");
  try {
    std::size_t used_a = 0, used_b = 0;
    const std::string a = detail::trim(text.substr(0, dash));
    const std::string b = detail::trim(text.substr(dash + 1));
    const double start = std::stod(a, &used_a);
    const double end = std::stod(b, &used_b);
    require(used_a == a.size() && used_b == b.size(), "config",
            "window '" + text + "' must look like 'start-end' in ms");
    return {start, end};
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception&) {
    fail("config", "window '" + text + "' must look like 'start-end' in ms");
  }
}

inline std::string window_label(const dsp::TimeWindow& w) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << w.start_ms << "-" << w.end_ms;
  return out.str();
}

inline SynthSpec synth_spec_from_config(const PipelineConfig& c) {
  SynthSpec s;
  s.class_count = static_cast<int>(c.get_int("synth.classes"));
  s.images_per_class = static_cast<int>(c.get_int("synth.images_per_class"));
  s.subject_count = static_cast<int>(c.get_int("synth.subjects"));
  s.channel_count = static_cast<int>(c.get_int("synth.channels"));
  s.sample_rate_hz = c.get_double("synth.sample_rate_hz");
  s.per_image_duration_ms = c.get_double("synth.duration_ms");
  s.noise_sigma = c.get_double("synth.noise_sigma");
  s.subject_jitter = c.get_double("synth.subject_jitter");
  s.mode = signal_mode_from_name(c.get("synth.mode"));
  s.onset_ms = c.get_double("synth.onset_ms");
  s.decay_ms = c.get_double("synth.decay_ms");
  s.feature_sigma = c.get_double("synth.feature_sigma");
  return s;
}

inline RegressorSpec regressor_spec_from_config(const PipelineConfig& c,
                                                const std::string& kind_name) {
  RegressorSpec spec;
  spec.kind = regressor_kind_from_name(kind_name);
  spec.k = static_cast<int>(c.get_int("regressor.k"));
  spec.lambda = c.get_double("regressor.lambda");
  spec.forest.tree_count = static_cast<int>(c.get_int("regressor.trees"));
  spec.forest.max_depth = static_cast<int>(c.get_int("regressor.depth"));
  spec.forest.min_leaf = static_cast<int>(c.get_int("regressor.min_leaf"));
  spec.forest.features_per_split = static_cast<int>(c.get_int("regressor.mtry"));
  spec.forest.bootstrap = c.get_bool("regressor.bootstrap");
  return spec;
}

inline TrainHyper hyper_from_config(const PipelineConfig& c, int threads) {
  TrainHyper h;
  h.learning_rate = c.get_double("train.learning_rate");
  h.momentum = c.get_double("train.momentum");
  h.batch_size = static_cast<int>(c.get_int("train.batch_size"));
  h.epochs = static_cast<int>(c.get_int("train.epochs"));
  h.clip_norm = c.get_double("train.clip_norm");
  h.forget_bias = c.get_double("train.forget_bias");
  h.threads = threads;
  return h;
}

inline ExperimentConfig experiment_from_config(const PipelineConfig& c, std::uint64_t seed,
                                               int threads) {
  ExperimentConfig e;
  e.eeg_path = c.get("data.eeg");
  e.image_features_path = c.get("data.image_features");
  e.synth = synth_spec_from_config(c);
  e.synth.seed = seed;
  e.feature_dim = static_cast<Eigen::Index>(c.get_int("synth.feature_dim"));
  e.limits.amplitude_threshold = c.get_double("data.amplitude_limit");
  e.limits.channel_count = static_cast<std::uint32_t>(c.get_int("data.channels"));
  e.limits.min_samples = static_cast<std::uint32_t>(c.get_int("data.min_samples"));
  e.file_classes = static_cast<std::uint32_t>(c.get_int("data.classes"));
  e.file_subjects = static_cast<std::uint32_t>(c.get_int("data.subjects"));
  e.filter_low_hz = c.get_double("filter.low_hz");
  e.filter_high_hz = c.get_double("filter.high_hz");
  e.filter_order = static_cast<int>(c.get_int("filter.order"));
  e.notch_low_hz = c.get_double("filter.notch_low_hz");
  e.notch_high_hz = c.get_double("filter.notch_high_hz");
  e.layouts = c.get_list("experiment.layouts");
  for (const std::string& w : c.get_list("experiment.windows"))
    e.windows.push_back(parse_window(w));
  for (const std::string& r : c.get_list("experiment.regressors"))
    e.regressors.push_back(regressor_spec_from_config(c, r));
  e.aggregation = aggregation_from_name(c.get("aggregate.strategy"));
  e.standardize = c.get_bool("encoder.standardize");
  e.hyper = hyper_from_config(c, threads);
  e.split_fractions = {c.get_double("split.train"), c.get_double("split.val"),
                       c.get_double("split.test")};
  e.seed = seed;
  e.threads = threads;
  return e;
}

// ---------------------------------------------------------------------------
// Preprocessing helpers shared by the CLI stages and the experiment runner
// ---------------------------------------------------------------------------

/// Notch (49-51 Hz) then band-pass (14-71 Hz), applied to every sequence.
inline Dataset filter_dataset(Dataset ds, double low_hz, double high_hz, int order,
                              double notch_low_hz, double notch_high_hz) {
  require(!ds.sequences.empty(), "preprocess", "dataset has no sequences");
  const double rate = ds.sequences.front().sample_rate_hz;
  for (const auto& seq : ds.sequences)
    require(seq.sample_rate_hz == rate, "preprocess",
            "sequences disagree on the sampling rate");
  dsp::IirFilterSpec notch;
  notch.kind = dsp::FilterKind::notch;
  notch.low_cut_hz = notch_low_hz;
  notch.high_cut_hz = notch_high_hz;
  notch.sample_rate_hz = rate;
  dsp::IirFilterSpec band;
  band.kind = dsp::FilterKind::bandpass_butterworth;
  band.order = order;
  band.low_cut_hz = low_hz;
  band.high_cut_hz = high_hz;
  band.sample_rate_hz = rate;
  const dsp::IirCoefficients notch_coeffs = dsp::design_filter(notch);
  const dsp::IirCoefficients band_coeffs = dsp::design_filter(band);
  for (auto& seq : ds.sequences)
    seq.samples = dsp::apply_filter(band_coeffs, dsp::apply_filter(notch_coeffs, seq.samples));
  return ds;
}

inline Dataset window_dataset(const Dataset& ds, const dsp::TimeWindow& window) {
  Dataset out = ds;
  for (auto& seq : out.sequences) seq = dsp::window_sequence(seq, window);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment report
// ---------------------------------------------------------------------------

struct PredictionRow {
  std::uint32_t image_id = 0;
  std::uint32_t true_class = 0;
  std::uint32_t predicted_class = 0;
  double max_prob = 0.0;
};

struct EncoderCell {
  std::string layout;
  std::string window;
  double max_va = 0.0;
  double ta_at_max_va = 0.0;
  int best_epoch = 0;
  int epochs = 0;
  double train_loss_at_best = 0.0;
};

struct RegressorCell {
  std::string layout;
  std::string window;
  std::string aggregation;
  std::string kind;
  std::string params;
  std::uint32_t train_pairs = 0;
  std::uint32_t test_pairs = 0;
  double mse = 0.0;
};

struct EndToEndCell {
  std::string layout;
  std::string window;
  std::string aggregation;
  std::string kind;
  double accuracy_overall = 0.0;
  double accuracy_per_class_mean = 0.0;
  std::vector<PredictionRow> predictions;
};

/// Externally reported full-scale reference results, echoed in every report
/// for context. They are not reproduction targets at this scale.
struct ReferencePoints {
  double encoder_max_va = 0.401;        // best recurrent configuration
  double encoder_ta_at_max_va = 0.358;  // its test accuracy at max VA
  double late_window_va = 0.418;        // 320-480 ms window, same setup
  double best_regression_mse = 0.8;     // external features + k-NN, average
  double end_to_end_accuracy = 0.851;   // full-scale test-split accuracy
};

struct ExperimentReport {
  int schema_version = 1;
  std::string config_hash;
  std::uint64_t seed = 0;
  bool synthetic = false;
  LoadReport load;
  std::uint32_t image_count = 0;
  std::uint32_t class_count = 0;
  std::uint32_t subject_count = 0;
  std::vector<EncoderCell> encoder_cells;
  std::vector<RegressorCell> regressor_cells;
  std::vector<EndToEndCell> end_to_end_cells;
  std::uint64_t audit_violations = 0;
  std::string aborted_stage;  // empty when the run completed

  ordered_json to_json() const {
    ordered_json j;
    j["schema_version"] = schema_version;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["dataset"] = {{"synthetic", synthetic},
                    {"records_total", load.records_total},
                    {"accepted", load.accepted},
                    {"dropped_nonfinite", load.dropped_nonfinite},
                    {"dropped_amplitude", load.dropped_amplitude},
                    {"dropped_channel_count", load.dropped_channel_count},
                    {"images", image_count},
                    {"classes", class_count},
                    {"subjects", subject_count}};
    const ReferencePoints ref;
    j["reference_points"] = {{"encoder_max_va", ref.encoder_max_va},
                             {"encoder_ta_at_max_va", ref.encoder_ta_at_max_va},
                             {"late_window_va", ref.late_window_va},
                             {"best_regression_mse", ref.best_regression_mse},
                             {"end_to_end_accuracy", ref.end_to_end_accuracy}};
    j["encoder_grid"] = ordered_json::array();
    for (const auto& c : encoder_cells)
      j["encoder_grid"].push_back({{"layout", c.layout},
                                   {"window_ms", c.window},
                                   {"max_va", c.max_va},
                                   {"ta_at_max_va", c.ta_at_max_va},
                                   {"best_epoch", c.best_epoch},
                                   {"epochs", c.epochs},
                                   {"train_loss_at_best", c.train_loss_at_best}});
    j["regressor_grid"] = ordered_json::array();
    for (const auto& c : regressor_cells)
      j["regressor_grid"].push_back({{"layout", c.layout},
                                     {"window_ms", c.window},
                                     {"aggregation", c.aggregation},
                                     {"kind", c.kind},
                                     {"params", c.params},
                                     {"train_pairs", c.train_pairs},
                                     {"test_pairs", c.test_pairs},
                                     {"mse", c.mse}});
    j["end_to_end"] = ordered_json::array();
    for (const auto& c : end_to_end_cells)
      j["end_to_end"].push_back({{"layout", c.layout},
                                 {"window_ms", c.window},
                                 {"aggregation", c.aggregation},
                                 {"kind", c.kind},
                                 {"accuracy_overall", c.accuracy_overall},
                                 {"accuracy_per_class_mean", c.accuracy_per_class_mean},
                                 {"test_images", c.predictions.size()}});
    j["audit"] = {{"test_reads_during_fit", audit_violations}};
    j["aborted_stage"] = aborted_stage;
    return j;
  }

  std::string encoder_grid_csv() const {
    std::string out = "layout, window_ms, max_va, ta_at_max_va, best_epoch, epochs\n";
    for (const auto& c : encoder_cells)
      out += c.layout + ", " + c.window + ", " + format_fixed(c.max_va, 6) + ", " +
             format_fixed(c.ta_at_max_va, 6) + ", " + std::to_string(c.best_epoch) + ", " +
             std::to_string(c.epochs) + "\n";
    return out;
  }

  std::string regressor_grid_csv() const {
    std::string out = "layout, window_ms, aggregation, kind, params, train_pairs, test_pairs, mse\n";
    for (const auto& c : regressor_cells)
      out += c.layout + ", " + c.window + ", " + c.aggregation + ", " + c.kind + ", " +
             c.params + ", " + std::to_string(c.train_pairs) + ", " +
             std::to_string(c.test_pairs) + ", " + format_fixed(c.mse, 9) + "\n";
    return out;
  }

  std::string end_to_end_csv() const {
    std::string out =
        "layout, window_ms, aggregation, kind, accuracy_overall, accuracy_per_class_mean\n";
    for (const auto& c : end_to_end_cells)
      out += c.layout + ", " + c.window + ", " + c.aggregation + ", " + c.kind + ", " +
             format_fixed(c.accuracy_overall, 6) + ", " +
             format_fixed(c.accuracy_per_class_mean, 6) + "\n";
    return out;
  }

  static std::string predictions_csv(const EndToEndCell& cell) {
    std::string out = "image_id, true_class, predicted_class, max_prob\n";
    for (const auto& p : cell.predictions)
      out += std::to_string(p.image_id) + ", " + std::to_string(p.true_class) + ", " +
             std::to_string(p.predicted_class) + ", " + format_fixed(p.max_prob, 6) + "\n";
    return out;
  }
};

/// File-name fragment for a grid cell: keeps letters and digits, collapses
/// everything else to single dashes.
inline std::string sanitize_label(const std::string& text) {
  std::string out;
  bool pending_dash = false;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      if (pending_dash && !out.empty()) out += '-';
      pending_dash = false;
      out += c;
    } else {
      pending_dash = true;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

namespace detail {

struct PairedFeatures {
  Mat x;  // image features, one row per image
  Mat y;  // aggregated EEG features, same row order
  std::vector<std::uint32_t> image_ids;
};

/// Builds aligned (image feature, EEG feature) rows from an aggregated table,
/// in ascending image-id order.
inline PairedFeatures pair_features(const FeatureTable& aggregated,
                                    const ImageFeatureTable& image_features,
                                    const std::string& stage) {
  PairedFeatures out;
  const Eigen::Index eeg_dim = aggregated.dimension();
  const Eigen::Index img_dim = image_features.dimension();
  require(eeg_dim > 0, stage, "aggregated EEG feature table is empty");
  out.x.resize(static_cast<Eigen::Index>(aggregated.by_image.size()), img_dim);
  out.y.resize(static_cast<Eigen::Index>(aggregated.by_image.size()), eeg_dim);
  Eigen::Index row = 0;
  for (const auto& [image_id, list] : aggregated.by_image) {
    auto it = image_features.features.find(image_id);
    require(it != image_features.features.end(), stage,
            "image " + std::to_string(image_id) + " has no image feature");
    require(it->second.size() == img_dim, stage, "image-feature dimension varies");
    out.x.row(row) = it->second.transpose();
    out.y.row(row) = list.front().values.transpose();
    out.image_ids.push_back(image_id);
    ++row;
  }
  return out;
}

}  // namespace detail

/// Runs the full grid: preprocess -> per-(layout, window) encoder training ->
/// feature extraction + aggregation -> per-regressor fitting, MSE, and
/// end-to-end classification on the test split. On a stage failure the
/// partial report (with `aborted_stage` set) is handed to `flush` before the
/// error propagates.
inline ExperimentReport run_experiment(
    const ExperimentConfig& cfg,
    const std::function<void(const ExperimentReport&)>& flush = {}) {
  cfg.validate();
  ExperimentReport report;
  report.seed = cfg.seed;
  try {
    // --- data -----------------------------------------------------------
    Dataset ds;
    if (cfg.eeg_path.empty()) {
      report.synthetic = true;
      SynthResult r = generate_dataset(cfg.synth);
      ds = std::move(r.dataset);
      report.load.records_total = ds.sequences.size();
      report.load.accepted = ds.sequences.size();
    } else {
      DatasetLoadResult r = load_dataset(cfg.eeg_path, {}, cfg.limits, cfg.file_classes,
                                         cfg.file_subjects);
      ds = std::move(r.dataset);
      report.load = r.report;
    }
    report.image_count = static_cast<std::uint32_t>(ds.images.size());
    report.class_count = ds.class_count;
    report.subject_count = ds.subject_count;

    const ImageFeatureTable image_features =
        cfg.image_features_path.empty()
            ? generate_image_features(cfg.synth, cfg.feature_dim)
            : io::read_feature_table(cfg.image_features_path, "experiment");
    for (const auto& [image_id, entry] : ds.images)
      require(image_features.features.count(image_id) != 0, "experiment",
              "image " + std::to_string(image_id) + " has no image feature");

    // --- preprocessing and split ----------------------------------------
    const Dataset filtered =
        filter_dataset(std::move(ds), cfg.filter_low_hz, cfg.filter_high_hz,
                       cfg.filter_order, cfg.notch_low_hz, cfg.notch_high_hz);
    const SplitAssignment split = split_dataset(filtered, cfg.split_fractions, cfg.seed);
    StageAudit audit;

    // --- grid -------------------------------------------------------------
    for (const std::string& layout : cfg.layouts) {
      for (const dsp::TimeWindow& window : cfg.windows) {
        const Dataset ds_w = window_dataset(filtered, window);
        EncoderConfig enc_cfg;
        parse_encoder_layout(layout, enc_cfg);
        enc_cfg.channel_count = static_cast<int>(filtered.channel_count);
        enc_cfg.class_count = static_cast<int>(filtered.class_count);
        enc_cfg.standardize = cfg.standardize;

        for (const EegSequence* seq : sequences_in_split(ds_w, split, Split::train))
          audit.record_sequence(*seq, split);
        for (const EegSequence* seq : sequences_in_split(ds_w, split, Split::val))
          audit.record_sequence(*seq, split);
        const TrainResult trained =
            train_encoder(ds_w, split, enc_cfg, cfg.hyper, cfg.seed);

        EncoderCell enc_cell;
        enc_cell.layout = layout;
        enc_cell.window = window_label(window);
        enc_cell.max_va = trained.history.best().val_acc;
        enc_cell.ta_at_max_va = trained.history.best().test_acc;
        enc_cell.best_epoch = trained.history.best().epoch;
        enc_cell.epochs = static_cast<int>(trained.history.epochs.size());
        enc_cell.train_loss_at_best = trained.history.best().train_loss;
        report.encoder_cells.push_back(enc_cell);

        // Features for every sequence; fitting-side tables carry train images
        // only, the test-side table exists for evaluation targets.
        const FeatureTable all_features =
            extract_features(trained.model, ds_w, cfg.threads);
        FeatureTable train_table, test_table;
        for (const auto& [image_id, list] : all_features.by_image) {
          switch (split.of(image_id)) {
            case Split::train: train_table.by_image[image_id] = list; break;
            case Split::test: test_table.by_image[image_id] = list; break;
            default: break;  // val images serve encoder selection only
          }
        }
        for (const auto& [image_id, list] : train_table.by_image)
          audit.record_image(image_id, split);
        const FeatureTable agg_train = aggregate(train_table, cfg.aggregation);
        const FeatureTable agg_test = aggregate(test_table, cfg.aggregation);

        const detail::PairedFeatures train_pairs =
            detail::pair_features(agg_train, image_features, "experiment");
        const detail::PairedFeatures test_pairs =
            detail::pair_features(agg_test, image_features, "experiment");
        for (std::uint32_t image_id : train_pairs.image_ids)
          audit.record_image(image_id, split);

        for (const RegressorSpec& spec : cfg.regressors) {
          const RegressorModel model = fit_regressor(spec, train_pairs.x, train_pairs.y);
          const RegressionReport mse = evaluate_mse(model, test_pairs.x, test_pairs.y);

          RegressorCell reg_cell;
          reg_cell.layout = layout;
          reg_cell.window = enc_cell.window;
          reg_cell.aggregation = aggregation_name(cfg.aggregation);
          reg_cell.kind = regressor_kind_name(spec.kind);
          reg_cell.params = model.params_summary();
          reg_cell.train_pairs = mse.train_count;
          reg_cell.test_pairs = mse.test_count;
          reg_cell.mse = mse.mse;
          report.regressor_cells.push_back(reg_cell);

          EndToEndCell e2e;
          e2e.layout = layout;
          e2e.window = enc_cell.window;
          e2e.aggregation = reg_cell.aggregation;
          e2e.kind = reg_cell.kind;
          std::vector<std::uint32_t> predicted, truth;
          for (std::uint32_t image_id : test_pairs.image_ids) {
            const Vec& x = image_features.features.at(image_id);
            const Classification c = classify_image_features(model, trained.model, x);
            const std::uint32_t label = filtered.images.at(image_id).class_id;
            predicted.push_back(c.class_id);
            truth.push_back(label);
            e2e.predictions.push_back(
                {image_id, label, c.class_id, c.probabilities.maxCoeff()});
          }
          e2e.accuracy_overall = evaluate_accuracy(predicted, truth);
          std::map<std::uint32_t, std::pair<std::uint32_t, std::uint32_t>> per_class;
          for (std::size_t i = 0; i < predicted.size(); ++i) {
            auto& [hits, total] = per_class[truth[i]];
            if (predicted[i] == truth[i]) ++hits;
            ++total;
          }
          double class_mean = 0.0;
          for (const auto& [cls, counts] : per_class)
            class_mean += static_cast<double>(counts.first) / counts.second;
          e2e.accuracy_per_class_mean = class_mean / static_cast<double>(per_class.size());
          report.end_to_end_cells.push_back(std::move(e2e));
        }
      }
    }
    report.audit_violations = audit.test_reads_during_fit;
  } catch (const PipelineError& e) {
    report.aborted_stage = e.stage();
    if (flush) flush(report);
    throw;
  }
  return report;
}

}  // namespace brainfold
