#pragma once

#include "brainfold/common.hpp"
#include "brainfold/encoder.hpp"
#include "brainfold/io.hpp"
#include "brainfold/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace brainfold {

// ---------------------------------------------------------------------------
// Feature tables
// ---------------------------------------------------------------------------

/// Compact representation of one EEG sequence, together with the
/// classification loss the jointly trained head assigned to it.
struct EegFeatureVector {
  Vec values;
  std::uint32_t image_id = 0;
  std::uint32_t subject_id = 0;
  double classification_loss = 0.0;
};

/// Per-image collections of subject feature vectors. Before aggregation,
/// each image holds one vector per available subject; afterwards exactly one.
struct FeatureTable {
  std::map<std::uint32_t, std::vector<EegFeatureVector>> by_image;
  FeatureAggregation aggregation = FeatureAggregation::none;

  std::size_t vector_count() const {
    std::size_t n = 0;
    for (const auto& [id, list] : by_image) n += list.size();
    return n;
  }

  Eigen::Index dimension() const {
    for (const auto& [id, list] : by_image)
      if (!list.empty()) return list.front().values.size();
    return 0;
  }
};

namespace detail {

inline void check_uniform_dimension(const FeatureTable& table, const std::string& stage) {
  const Eigen::Index dim = table.dimension();
  for (const auto& [id, list] : table.by_image)
    for (const auto& fv : list)
      require(fv.values.size() == dim, stage,
              "feature dimension varies within the table (image " + std::to_string(id) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Runs the encoder over every sequence and records the feature vector plus
/// the head's cross-entropy loss on it. Sequences must be preprocessed the
/// same way as the training data (the model applies its own standardization
/// setting). Output order within an image follows dataset order.
inline FeatureTable extract_features(const EncoderModel& model, const Dataset& dataset,
                                     int threads = 1) {
  const std::string stage = "extract";
  const std::size_t n = dataset.sequences.size();
  std::vector<EegFeatureVector> flat(n);
  parallel_chunks(n, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const EegSequence& seq = dataset.sequences[i];
      require(seq.class_id < model.config.class_count, stage,
              "sequence class id " + std::to_string(seq.class_id) +
                  " exceeds the model's class count");
      EegFeatureVector fv;
      fv.values = encode(model, seq);
      require(fv.values.allFinite(), stage, "non-finite feature vector");
      fv.image_id = seq.image_id;
      fv.subject_id = seq.subject_id;
      fv.classification_loss =
          loss_crossentropy(model, fv.values, static_cast<int>(seq.class_id));
      flat[i] = std::move(fv);
    }
  });
  FeatureTable table;
  for (auto& fv : flat) table.by_image[fv.image_id].push_back(std::move(fv));
  return table;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Elementwise arithmetic mean over the subject vectors of each image.
inline FeatureTable aggregate_average(const FeatureTable& table) {
  const std::string stage = "aggregate";
  require(table.aggregation == FeatureAggregation::none, stage,
          "table is already aggregated");
  detail::check_uniform_dimension(table, stage);
  FeatureTable out;
  out.aggregation = FeatureAggregation::average;
  for (const auto& [image_id, list] : table.by_image) {
    require(!list.empty(), stage,
            "image " + std::to_string(image_id) + " has no feature vectors");
    EegFeatureVector mean;
    mean.image_id = image_id;
    mean.subject_id = 0;
    mean.values = Vec::Zero(list.front().values.size());
    for (const auto& fv : list) {
      mean.values += fv.values;
      mean.classification_loss += fv.classification_loss;
    }
    mean.values /= static_cast<double>(list.size());
    mean.classification_loss /= static_cast<double>(list.size());
    out.by_image[image_id] = {std::move(mean)};
  }
  return out;
}

/// Picks, per image, the subject vector with the smallest classification
/// loss; ties go to the smallest subject_id so the choice is deterministic
/// regardless of listing order.
inline FeatureTable aggregate_best(const FeatureTable& table) {
  const std::string stage = "aggregate";
  require(table.aggregation == FeatureAggregation::none, stage,
          "table is already aggregated");
  detail::check_uniform_dimension(table, stage);
  FeatureTable out;
  out.aggregation = FeatureAggregation::best;
  for (const auto& [image_id, list] : table.by_image) {
    require(!list.empty(), stage,
            "image " + std::to_string(image_id) + " has no feature vectors");
    const EegFeatureVector* best = &list.front();
    for (const auto& fv : list) {
      if (fv.classification_loss < best->classification_loss ||
          (fv.classification_loss == best->classification_loss &&
           fv.subject_id < best->subject_id))
        best = &fv;
    }
    out.by_image[image_id] = {*best};
  }
  return out;
}

inline FeatureTable aggregate(const FeatureTable& table, FeatureAggregation how) {
  switch (how) {
    case FeatureAggregation::average: return aggregate_average(table);
    case FeatureAggregation::best: return aggregate_best(table);
    default: return table;
  }
}

// ---------------------------------------------------------------------------
// Interchange with the serialized forms
// ---------------------------------------------------------------------------

/// Collapses an aggregated table to the one-vector-per-image layout used by
/// the image-feature files, preserving the aggregation tag.
inline ImageFeatureTable to_image_features(const FeatureTable& table) {
  const std::string stage = "features-export";
  require(table.aggregation != FeatureAggregation::none, stage,
          "export requires an aggregated table (run aggregation first)");
  ImageFeatureTable out;
  out.aggregation = table.aggregation;
  out.source_tag = "eeg";
  for (const auto& [image_id, list] : table.by_image) {
    require(list.size() == 1, stage,
            "aggregated table must hold exactly one vector per image");
    out.features[image_id] = list.front().values;
  }
  return out;
}

inline std::vector<io::FeatureArchiveRecord> to_archive_records(const FeatureTable& table) {
  std::vector<io::FeatureArchiveRecord> records;
  for (const auto& [image_id, list] : table.by_image)
    for (const auto& fv : list)
      records.push_back({fv.image_id, fv.subject_id, fv.classification_loss, fv.values});
  return records;
}

inline FeatureTable table_from_archive(const std::vector<io::FeatureArchiveRecord>& records) {
  FeatureTable table;
  for (const auto& rec : records)
    table.by_image[rec.image_id].push_back(
        {rec.values, rec.image_id, rec.subject_id, rec.classification_loss});
  return table;
}

inline void save_feature_table(const std::filesystem::path& path, const FeatureTable& table) {
  if (table.aggregation == FeatureAggregation::none)
    io::write_feature_archive(path, to_archive_records(table));
  else
    io::write_feature_table(path, to_image_features(table), /*with_aggregation_tag=*/true);
}

}  // namespace brainfold
