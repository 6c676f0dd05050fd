#pragma once

#include "brainfold/common.hpp"
#include "brainfold/io.hpp"
#include "brainfold/rng.hpp"
#include "brainfold/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace brainfold {

struct ValidationLimits {
  double amplitude_threshold = 100.0;
  std::uint32_t channel_count = 29;
  std::uint32_t min_samples = 0;  // raw per-image recordings require >= 120
};

enum class SequenceVerdict { accept, reject_nonfinite, reject_amplitude, reject_channel_count };

/// Total function: reject iff any non-finite sample, any channel peak above
/// the amplitude threshold, or unexpected channel count.
inline SequenceVerdict validate_sequence(const EegSequence& seq,
                                         const ValidationLimits& limits = {}) {
  if (seq.channels() != static_cast<Eigen::Index>(limits.channel_count))
    return SequenceVerdict::reject_channel_count;
  if (!seq.samples.allFinite()) return SequenceVerdict::reject_nonfinite;
  if (seq.samples.size() > 0 &&
      seq.samples.cwiseAbs().maxCoeff() > limits.amplitude_threshold)
    return SequenceVerdict::reject_amplitude;
  return SequenceVerdict::accept;
}

struct DatasetLoadResult {
  Dataset dataset;
  LoadReport report;
};

/// Builds a validated Dataset from parsed records. Sequences failing
/// validation are dropped and counted; structural problems (class id out of
/// range, conflicting class for an image, too many subjects per image) are
/// fatal because they indicate a corrupt file rather than a noisy recording.
inline DatasetLoadResult build_dataset(std::vector<EegSequence> records,
                                       const ValidationLimits& limits,
                                       std::uint32_t class_count, std::uint32_t subject_count,
                                       const std::string& stage = "load") {
  DatasetLoadResult result;
  result.dataset.class_count = class_count;
  result.dataset.subject_count = subject_count;
  result.dataset.channel_count = limits.channel_count;
  result.report.records_total = records.size();
  std::map<std::uint32_t, std::uint32_t> subjects_per_image;
  std::uint64_t position = 0;
  for (EegSequence& seq : records) {
    ++position;
    require(seq.class_id < class_count, stage,
            "unknown class id " + std::to_string(seq.class_id) + " at record " +
                std::to_string(position));
    require(seq.length() >= static_cast<Eigen::Index>(limits.min_samples), stage,
            "record " + std::to_string(position) + " shorter than " +
                std::to_string(limits.min_samples) + " samples");
    switch (validate_sequence(seq, limits)) {
      case SequenceVerdict::reject_nonfinite:
        ++result.report.dropped_nonfinite;
        continue;
      case SequenceVerdict::reject_amplitude:
        ++result.report.dropped_amplitude;
        continue;
      case SequenceVerdict::reject_channel_count:
        ++result.report.dropped_channel_count;
        continue;
      case SequenceVerdict::accept:
        break;
    }
    auto [it, fresh] = result.dataset.images.try_emplace(seq.image_id, ImageEntry{seq.class_id, {}});
    require(fresh || it->second.class_id == seq.class_id, stage,
            "image " + std::to_string(seq.image_id) + " appears with two class ids");
    const std::uint32_t n = ++subjects_per_image[seq.image_id];
    require(n <= subject_count, stage,
            "image " + std::to_string(seq.image_id) + " has more than " +
                std::to_string(subject_count) + " sequences");
    result.dataset.sequences.push_back(std::move(seq));
    ++result.report.accepted;
  }
  require(result.report.accepted > 0, stage, "no records survived validation");
  // Canonical order regardless of how the file was produced.
  std::stable_sort(result.dataset.sequences.begin(), result.dataset.sequences.end(),
                   [](const EegSequence& a, const EegSequence& b) {
                     return std::pair(a.subject_id, a.image_id) < std::pair(b.subject_id, b.image_id);
                   });
  return result;
}

/// Loads recordings (binary BFEEG1 or the CSV import path, selected by file
/// extension) plus an optional BFIMF1 image-feature file.
inline DatasetLoadResult load_dataset(const std::filesystem::path& eeg_path,
                                      const std::optional<std::filesystem::path>& features_path = {},
                                      const ValidationLimits& limits = {},
                                      std::uint32_t class_count = 40,
                                      std::uint32_t subject_count = 7) {
  const std::string stage = "load";
  io::RawEegFile raw = eeg_path.extension() == ".csv" ? io::read_eeg_csv(eeg_path, stage)
                                                      : io::read_eeg_file(eeg_path, stage);
  require(raw.channels == limits.channel_count, stage,
          "file has " + std::to_string(raw.channels) + " channels, expected " +
              std::to_string(limits.channel_count));
  DatasetLoadResult result =
      build_dataset(std::move(raw.records), limits, class_count, subject_count, stage);
  if (features_path) {
    ImageFeatureTable table = io::read_feature_table(*features_path, stage);
    const Eigen::Index dim = table.dimension();
    for (auto& [image_id, values] : table.features) {
      require(values.size() == dim, stage, "feature dimension mismatch");
      require(values.allFinite(), stage,
              "non-finite feature for image " + std::to_string(image_id));
      auto it = result.dataset.images.find(image_id);
      if (it != result.dataset.images.end()) it->second.feature = std::move(values);
    }
  }
  return result;
}

/// Deterministic stratified split by image. Each class contributes the same
/// fractions, rounded by largest remainder; ties go to the earlier split.
inline SplitAssignment split_dataset(const Dataset& dataset,
                                     const std::array<double, 3>& fractions,
                                     std::uint64_t seed) {
  const std::string stage = "split";
  require(!dataset.images.empty(), stage, "dataset has no images");
  double sum = 0.0;
  for (double f : fractions) {
    require(f > 0.0, stage, "fractions must be positive");
    sum += f;
  }
  require(std::abs(sum - 1.0) <= 1e-9, stage, "fractions must sum to 1");

  std::map<std::uint32_t, std::vector<std::uint32_t>> images_by_class;
  for (const auto& [image_id, entry] : dataset.images)
    images_by_class[entry.class_id].push_back(image_id);

  SplitAssignment assignment;
  assignment.seed = seed;
  for (auto& [class_id, image_ids] : images_by_class) {
    const std::size_t n = image_ids.size();
    require(n >= 3, stage, "class " + std::to_string(class_id) + " too small to stratify");
    // image_ids come out of the map sorted; shuffle with a per-class substream
    // so the result depends only on (image ids, fractions, seed).
    Rng rng = substream(seed, {0x5e71u, class_id});
    rng.shuffle(image_ids);

    std::array<std::size_t, 3> counts{};
    std::array<double, 3> remainders{};
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = fractions[static_cast<std::size_t>(s)] * static_cast<double>(n);
      counts[static_cast<std::size_t>(s)] = static_cast<std::size_t>(std::floor(exact));
      remainders[static_cast<std::size_t>(s)] = exact - std::floor(exact);
      assigned += counts[static_cast<std::size_t>(s)];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return remainders[static_cast<std::size_t>(a)] > remainders[static_cast<std::size_t>(b)];
    });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned)
      ++counts[static_cast<std::size_t>(order[i % 3])];

    std::size_t cursor = 0;
    for (int s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < counts[static_cast<std::size_t>(s)]; ++i)
        assignment.by_image[image_ids[cursor++]] = static_cast<Split>(s);
  }
  return assignment;
}

/// Sequences of a dataset restricted to one split, canonical order preserved.
inline std::vector<const EegSequence*> sequences_in_split(const Dataset& dataset,
                                                          const SplitAssignment& split,
                                                          Split wanted) {
  std::vector<const EegSequence*> out;
  for (const EegSequence& seq : dataset.sequences)
    if (split.of(seq.image_id) == wanted) out.push_back(&seq);
  return out;
}

}  // namespace brainfold
