#pragma once

#include "brainfold/common.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace brainfold {

// ---------------------------------------------------------------------------
// Configuration document: line-oriented `key = value` pairs with dotted
// section prefixes. Every key has a registered default and description;
// unknown keys are rejected. The canonical rendering (all keys, sorted)
// hashes to the run-directory name, so equal effective configurations map to
// the same directory.
// ---------------------------------------------------------------------------

struct ConfigKey {
  std::string default_value;
  std::string doc;
};

inline const std::map<std::string, ConfigKey>& config_schema() {
  static const std::map<std::string, ConfigKey> schema = {
      {"schema", {"1", "configuration schema version"}},

      {"data.eeg", {"", "recordings file (binary or .csv); empty = synthesize"}},
      {"data.image_features", {"", "image-feature file; empty = synthesize"}},
      {"data.classes", {"40", "class count of a recordings file"}},
      {"data.subjects", {"7", "subject count of a recordings file"}},
      {"data.channels", {"29", "channel count of a recordings file"}},
      {"data.amplitude_limit", {"100", "absolute amplitude threshold for validation"}},
      {"data.min_samples", {"120", "minimum raw samples per recording"}},

      {"synth.classes", {"8", "synthetic class count"}},
      {"synth.images_per_class", {"20", "synthetic images per class"}},
      {"synth.subjects", {"3", "synthetic subject count"}},
      {"synth.channels", {"8", "synthetic channel count"}},
      {"synth.sample_rate_hz", {"250", "synthetic sampling rate"}},
      {"synth.duration_ms", {"500", "synthetic recording length"}},
      {"synth.noise_sigma", {"0.4", "white-noise standard deviation"}},
      {"synth.subject_jitter", {"0.1", "per-subject amplitude/phase jitter scale"}},
      {"synth.mode", {"oscillatory", "signal mode: oscillatory | late_transient"}},
      {"synth.onset_ms", {"320", "transient-mode signature onset"}},
      {"synth.decay_ms", {"120", "transient-mode envelope time constant"}},
      {"synth.feature_sigma", {"0.1", "per-image image-feature spread"}},
      {"synth.feature_dim", {"16", "synthetic image-feature dimension"}},

      {"filter.low_hz", {"14", "band-pass low cutoff"}},
      {"filter.high_hz", {"71", "band-pass high cutoff"}},
      {"filter.order", {"2", "band-pass analog prototype order"}},
      {"filter.notch_low_hz", {"49", "notch band lower edge"}},
      {"filter.notch_high_hz", {"51", "notch band upper edge"}},

      {"window.start_ms", {"40", "analysis window start"}},
      {"window.end_ms", {"480", "analysis window end"}},

      {"split.train", {"0.8", "train fraction of images per class"}},
      {"split.val", {"0.1", "validation fraction of images per class"}},
      {"split.test", {"0.1", "test fraction of images per class"}},

      {"encoder.layout", {"32 common, 32 output", "encoder layout notation"}},
      {"encoder.standardize", {"true", "per-channel standardization before encoding"}},

      {"train.learning_rate", {"0.03", "SGD learning rate"}},
      {"train.momentum", {"0.9", "SGD momentum"}},
      {"train.batch_size", {"16", "minibatch size"}},
      {"train.epochs", {"100", "training epochs"}},
      {"train.clip_norm", {"0", "gradient L2 clip threshold; 0 disables"}},
      {"train.forget_bias", {"1", "initial forget-gate bias"}},

      {"aggregate.strategy", {"average", "feature aggregation: average | best"}},

      {"regressor.kind", {"knn", "regressor: knn | ridge | random_forest"}},
      {"regressor.k", {"5", "k-NN neighbor count"}},
      {"regressor.lambda", {"1", "ridge penalty"}},
      {"regressor.trees", {"100", "forest tree count"}},
      {"regressor.depth", {"12", "forest maximum depth"}},
      {"regressor.min_leaf", {"2", "forest minimum samples per leaf"}},
      {"regressor.mtry", {"0", "forest features per split; 0 = ceil(sqrt(D))"}},
      {"regressor.bootstrap", {"true", "forest bootstrap sampling"}},

      {"experiment.layouts",
       {"32 common, 32 output", "encoder layout grid, '|'-separated"}},
      {"experiment.windows", {"40-480", "window grid in ms, '|'-separated"}},
      {"experiment.regressors",
       {"knn | ridge | random_forest", "regressor grid, '|'-separated"}},
  };
  return schema;
}

namespace detail {

inline std::string trim(const std::string& text) {
  const auto begin = text.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = text.find_last_not_of(" \t\r\n");
  return text.substr(begin, end - begin + 1);
}

}  // namespace detail

class PipelineConfig {
 public:
  PipelineConfig() {
    for (const auto& [key, entry] : config_schema()) values_[key] = entry.default_value;
  }

  static PipelineConfig from_text(const std::string& text,
                                  const std::string& origin = "config") {
    PipelineConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto comment = line.find('#');
      if (comment != std::string::npos) line = line.substr(0, comment);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, "config",
              origin + " line " + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      cfg.set(key, value, origin + " line " + std::to_string(line_no));
    }
    require(cfg.get("schema") == "1", "config",
            "unsupported schema version '" + cfg.get("schema") + "' (expected 1)");
    return cfg;
  }

  static PipelineConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "config", "cannot open config file: " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return from_text(text.str(), path.filename().string());
  }

  void set(const std::string& key, const std::string& value,
           const std::string& origin = "override") {
    require(config_schema().count(key) != 0, "config",
            origin + ": unknown key '" + key + "'");
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    require(it != values_.end(), "config", "unknown key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    const std::string& raw = get(key);
    std::size_t used = 0;
    double value = 0.0;
    try {
      value = std::stod(raw, &used);
    } catch (const std::exception&) {
      fail("config", "key '" + key + "': '" + raw + "' is not a number");
    }
    require(used == raw.size(), "config", "key '" + key + "': '" + raw + "' is not a number");
    return value;
  }

  long long get_int(const std::string& key) const {
    const std::string& raw = get(key);
    std::size_t used = 0;
    long long value = 0;
    try {
      value = std::stoll(raw, &used);
    } catch (const std::exception&) {
      fail("config", "key '" + key + "': '" + raw + "' is not an integer");
    }
    require(used == raw.size(), "config",
            "key '" + key + "': '" + raw + "' is not an integer");
    return value;
  }

  bool get_bool(const std::string& key) const {
    const std::string& raw = get(key);
    if (raw == "true" || raw == "1" || raw == "yes") return true;
    if (raw == "false" || raw == "0" || raw == "no") return false;
    fail("config", "key '" + key + "': '" + raw + "' is not a boolean");
  }

  /// Values of a '|'-separated list key, trimmed, empties dropped.
  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> items;
    std::string current;
    std::istringstream in(get(key));
    while (std::getline(in, current, '|')) {
      current = detail::trim(current);
      if (!current.empty()) items.push_back(current);
    }
    return items;
  }

  /// All keys in sorted order with their effective values — the hashed form.
  std::string canonical_text() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
    return out;
  }

  std::uint64_t hash() const {
    // FNV-1a, 64-bit.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : canonical_text()) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::string hash_hex() const {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = hash();
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[h & 0xf];
      h >>= 4;
    }
    return out;
  }

  /// Directory name for a run of this configuration with the given seed.
  std::string run_directory_name(std::uint64_t seed) const {
    return "run-" + hash_hex() + "-seed" + std::to_string(seed);
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace brainfold
