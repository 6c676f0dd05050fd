#pragma once

#include "brainfold/common.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace brainfold {

/// One multi-channel recording for a single (subject, image) presentation.
/// samples is channels x time.
struct EegSequence {
  std::uint32_t subject_id = 0;
  std::uint32_t image_id = 0;
  std::uint32_t class_id = 0;
  double sample_rate_hz = 250.0;
  Mat samples;

  Eigen::Index channels() const { return samples.rows(); }
  Eigen::Index length() const { return samples.cols(); }
};

struct ImageEntry {
  std::uint32_t class_id = 0;
  std::optional<Vec> feature;
};

struct Dataset {
  std::vector<EegSequence> sequences;
  std::map<std::uint32_t, ImageEntry> images;
  std::uint32_t class_count = 40;
  std::uint32_t subject_count = 7;
  std::uint32_t channel_count = 29;
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

/// Image-level partition; every sequence of an image shares the image's split.
struct SplitAssignment {
  std::map<std::uint32_t, Split> by_image;
  std::uint64_t seed = 0;

  Split of(std::uint32_t image_id) const {
    auto it = by_image.find(image_id);
    require(it != by_image.end(), "split", "image " + std::to_string(image_id) + " has no split");
    return it->second;
  }
};

enum class FeatureAggregation { none, average, best };

inline const char* aggregation_name(FeatureAggregation a) {
  switch (a) {
    case FeatureAggregation::none: return "none";
    case FeatureAggregation::average: return "average";
    default: return "best";
  }
}

struct ImageFeatureTable {
  std::map<std::uint32_t, Vec> features;
  std::string source_tag;
  FeatureAggregation aggregation = FeatureAggregation::none;

  Eigen::Index dimension() const {
    return features.empty() ? 0 : features.begin()->second.size();
  }
};

struct LoadReport {
  std::uint64_t records_total = 0;
  std::uint64_t accepted = 0;
  std::uint64_t dropped_nonfinite = 0;
  std::uint64_t dropped_amplitude = 0;
  std::uint64_t dropped_channel_count = 0;

  std::uint64_t dropped() const {
    return dropped_nonfinite + dropped_amplitude + dropped_channel_count;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "{\"records_total\": " << records_total << ", \"accepted\": " << accepted
        << ", \"dropped_nonfinite\": " << dropped_nonfinite
        << ", \"dropped_amplitude\": " << dropped_amplitude
        << ", \"dropped_channel_count\": " << dropped_channel_count << "}";
    return out.str();
  }
};

}  // namespace brainfold
