#pragma once

#include "brainfold/common.hpp"
#include "brainfold/dataset.hpp"
#include "brainfold/rng.hpp"
#include "brainfold/types.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace brainfold {

// ---------------------------------------------------------------------------
// Specification
// ---------------------------------------------------------------------------

/// One band-limited signature component: a sinusoid at `frequency_hz`
/// projected onto the channels with `channel_weights` and scaled by
/// `amplitude`. Frequencies must survive the downstream filter chain, i.e.
/// lie inside the 15-70 Hz passband and outside the 49-51 Hz notch.
struct SynthComponent {
  double frequency_hz = 30.0;
  Vec channel_weights;  // one weight per channel
  double amplitude = 1.0;
  double phase = 0.0;
};

/// How class identity is written into the signal over time.
enum class SignalMode {
  oscillatory,     // signature present across the whole sequence
  late_transient,  // damped signature injected only after onset_ms
};

inline const char* signal_mode_name(SignalMode m) {
  return m == SignalMode::oscillatory ? "oscillatory" : "late_transient";
}

struct SynthSpec {
  int class_count = 8;
  int images_per_class = 20;
  int subject_count = 3;
  int channel_count = 8;
  double sample_rate_hz = 250.0;
  double per_image_duration_ms = 500.0;
  double noise_sigma = 0.4;     // white Gaussian noise added per sample
  double subject_jitter = 0.1;  // per-subject amplitude/phase perturbation scale
  SignalMode mode = SignalMode::oscillatory;
  double onset_ms = 320.0;  // late_transient: signature start
  double decay_ms = 120.0;  // late_transient: envelope time constant
  double feature_sigma = 0.1;  // per-image spread of synthetic image features
  std::uint64_t seed = 0;

  /// Explicit per-class signature templates; left empty, distinct templates
  /// are derived deterministically from the seed.
  std::vector<std::vector<SynthComponent>> class_templates;

  Eigen::Index samples_per_sequence() const {
    return static_cast<Eigen::Index>(
        std::llround(per_image_duration_ms / 1000.0 * sample_rate_hz));
  }

  std::uint32_t image_count() const {
    return static_cast<std::uint32_t>(class_count) *
           static_cast<std::uint32_t>(images_per_class);
  }

  void validate() const {
    const std::string stage = "synth-spec";
    require(class_count >= 1, stage, "class count must be >= 1");
    require(images_per_class >= 1, stage, "images per class must be >= 1");
    require(subject_count >= 1, stage, "subject count must be >= 1");
    require(channel_count >= 1, stage, "channel count must be >= 1");
    require(sample_rate_hz > 0.0, stage, "sample rate must be positive");
    require(per_image_duration_ms > 0.0, stage, "duration must be positive");
    require(samples_per_sequence() >= 2, stage, "duration too short for the sample rate");
    require(noise_sigma >= 0.0, stage, "noise sigma must be >= 0");
    require(subject_jitter >= 0.0, stage, "subject jitter must be >= 0");
    require(feature_sigma >= 0.0, stage, "feature sigma must be >= 0");
    if (mode == SignalMode::late_transient) {
      require(onset_ms >= 0.0 && onset_ms < per_image_duration_ms, stage,
              "transient onset must fall inside the sequence");
      require(decay_ms > 0.0, stage, "transient decay must be positive");
    }
    if (!class_templates.empty()) {
      require(class_templates.size() == static_cast<std::size_t>(class_count), stage,
              "one template per class is required");
      for (const auto& components : class_templates) {
        require(!components.empty(), stage, "class templates need at least one component");
        for (const auto& comp : components) validate_component(comp);
      }
    }
  }

  void validate_component(const SynthComponent& comp) const {
    const std::string stage = "synth-spec";
    require(comp.frequency_hz >= 15.0 && comp.frequency_hz <= 70.0, stage,
            "template frequency " + format_fixed(comp.frequency_hz, 3) +
                " Hz lies outside the 15-70 Hz passband");
    require(comp.frequency_hz < 49.0 || comp.frequency_hz > 51.0, stage,
            "template frequency " + format_fixed(comp.frequency_hz, 3) +
                " Hz falls inside the 49-51 Hz notch band");
    require(comp.amplitude > 0.0, stage, "component amplitude must be positive");
    require(comp.channel_weights.size() == channel_count, stage,
            "channel weight vector must have one entry per channel");
  }
};

// ---------------------------------------------------------------------------
// Template resolution
// ---------------------------------------------------------------------------

/// Fully determined generation plan: validated spec, one signature template
/// per class, and (for the transient mode) the shared class-independent
/// background oscillation.
struct ResolvedSynth {
  SynthSpec spec;  // class_templates filled in
  std::vector<SynthComponent> background;
};

/// Derives distinct class templates from the seed when none are given:
/// frequencies evenly spaced across 16-46 Hz (clear of the notch band) and a
/// seeded positive channel-weight pattern per class.
inline ResolvedSynth resolve_synth(const SynthSpec& spec) {
  spec.validate();
  ResolvedSynth out{spec, {}};
  SynthSpec& s = out.spec;
  if (s.class_templates.empty()) {
    for (int cls = 0; cls < s.class_count; ++cls) {
      Rng rng = substream(s.seed, {0x7e31, static_cast<std::uint64_t>(cls)});
      SynthComponent comp;
      comp.frequency_hz =
          s.class_count == 1
              ? 30.0
              : 16.0 + 30.0 * static_cast<double>(cls) / static_cast<double>(s.class_count - 1);
      comp.amplitude = 1.0;
      comp.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      comp.channel_weights.resize(s.channel_count);
      for (int c = 0; c < s.channel_count; ++c)
        comp.channel_weights[c] = rng.uniform(0.3, 1.0);
      s.class_templates.push_back({comp});
    }
    s.validate();
  }
  if (s.mode == SignalMode::late_transient) {
    Rng rng = substream(s.seed, {0xb6d0});
    SynthComponent bg;
    bg.frequency_hz = 22.0;
    bg.amplitude = 0.6;
    bg.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    bg.channel_weights.resize(s.channel_count);
    for (int c = 0; c < s.channel_count; ++c) bg.channel_weights[c] = rng.uniform(0.3, 1.0);
    out.background.push_back(bg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Waveform synthesis
// ---------------------------------------------------------------------------

namespace detail {

/// Adds one component's contribution; amp_scale/phase_shift carry the
/// per-subject jitter (both zero for the noiseless template).
inline void add_component(Mat& samples, const SynthComponent& comp, const SynthSpec& spec,
                          bool transient, double amp_scale, double phase_shift) {
  const double fs = spec.sample_rate_hz;
  const double onset_s = spec.onset_ms / 1000.0;
  const double tau_s = spec.decay_ms / 1000.0;
  const double w = 2.0 * std::numbers::pi * comp.frequency_hz;
  for (Eigen::Index n = 0; n < samples.cols(); ++n) {
    const double t = static_cast<double>(n) / fs;
    double wave;
    if (transient) {
      if (t < onset_s) continue;
      const double dt = t - onset_s;
      wave = std::exp(-dt / tau_s) * std::sin(w * dt + comp.phase + phase_shift);
    } else {
      wave = std::sin(w * t + comp.phase + phase_shift);
    }
    const double value = comp.amplitude * amp_scale * wave;
    for (Eigen::Index c = 0; c < samples.rows(); ++c)
      samples(c, n) += comp.channel_weights[c] * value;
  }
}

}  // namespace detail

/// The noiseless, zero-jitter signature of one class (the ground truth the
/// generator embeds for every subject).
inline Mat template_waveform(const ResolvedSynth& plan, int cls) {
  const SynthSpec& s = plan.spec;
  require(cls >= 0 && cls < s.class_count, "synth", "class id out of range");
  Mat samples = Mat::Zero(s.channel_count, s.samples_per_sequence());
  const bool transient = s.mode == SignalMode::late_transient;
  for (const auto& bg : plan.background)
    detail::add_component(samples, bg, s, /*transient=*/false, 1.0, 0.0);
  for (const auto& comp : s.class_templates[static_cast<std::size_t>(cls)])
    detail::add_component(samples, comp, s, transient, 1.0, 0.0);
  return samples;
}

struct SynthGroundTruth {
  SynthSpec spec;  // resolved templates included
  std::vector<SynthComponent> background;

  std::string to_text() const {
    std::string out = "brainfold synthetic ground truth v1\n";
    out += "seed: " + std::to_string(spec.seed) + "\n";
    out += "mode: " + std::string(signal_mode_name(spec.mode)) + "\n";
    out += "classes: " + std::to_string(spec.class_count) +
           ", images_per_class: " + std::to_string(spec.images_per_class) +
           ", subjects: " + std::to_string(spec.subject_count) +
           ", channels: " + std::to_string(spec.channel_count) + "\n";
    out += "sample_rate_hz: " + format_fixed(spec.sample_rate_hz, 3) +
           ", duration_ms: " + format_fixed(spec.per_image_duration_ms, 3) + "\n";
    out += "noise_sigma: " + format_fixed(spec.noise_sigma, 6) +
           ", subject_jitter: " + format_fixed(spec.subject_jitter, 6) + "\n";
    if (spec.mode == SignalMode::late_transient)
      out += "onset_ms: " + format_fixed(spec.onset_ms, 3) +
             ", decay_ms: " + format_fixed(spec.decay_ms, 3) + "\n";
    auto describe = [](const SynthComponent& c) {
      std::string line = "f=" + format_fixed(c.frequency_hz, 6) +
                         " Hz, amp=" + format_fixed(c.amplitude, 6) +
                         ", phase=" + format_fixed(c.phase, 6) + ", weights=[";
      for (Eigen::Index i = 0; i < c.channel_weights.size(); ++i) {
        if (i) line += ", ";
        line += format_fixed(c.channel_weights[i], 6);
      }
      return line + "]";
    };
    for (const auto& bg : background) out += "background: " + describe(bg) + "\n";
    for (int cls = 0; cls < spec.class_count; ++cls)
      for (const auto& comp : spec.class_templates[static_cast<std::size_t>(cls)])
        out += "class " + std::to_string(cls) + ": " + describe(comp) + "\n";
    return out;
  }
};

struct SynthResult {
  Dataset dataset;
  SynthGroundTruth truth;
};

/// Generates the full synthetic dataset. Every sequence is the class
/// signature (with per-subject amplitude/phase jitter) plus white noise; all
/// randomness is drawn from substreams keyed by (seed, subject, image | class)
/// so the output is independent of generation order.
inline SynthResult generate_dataset(const SynthSpec& raw_spec) {
  const ResolvedSynth plan = resolve_synth(raw_spec);
  const SynthSpec& s = plan.spec;
  const Eigen::Index steps = s.samples_per_sequence();
  const bool transient = s.mode == SignalMode::late_transient;

  Dataset ds;
  ds.class_count = static_cast<std::uint32_t>(s.class_count);
  ds.subject_count = static_cast<std::uint32_t>(s.subject_count);
  ds.channel_count = static_cast<std::uint32_t>(s.channel_count);
  for (std::uint32_t img = 0; img < s.image_count(); ++img)
    ds.images[img] = {img / static_cast<std::uint32_t>(s.images_per_class), {}};

  for (int subject = 0; subject < s.subject_count; ++subject) {
    for (std::uint32_t img = 0; img < s.image_count(); ++img) {
      const auto cls = ds.images[img].class_id;
      EegSequence seq;
      seq.subject_id = static_cast<std::uint32_t>(subject);
      seq.image_id = img;
      seq.class_id = cls;
      seq.sample_rate_hz = s.sample_rate_hz;
      seq.samples = Mat::Zero(s.channel_count, steps);

      for (const auto& bg : plan.background)
        detail::add_component(seq.samples, bg, s, /*transient=*/false, 1.0, 0.0);

      // Subject jitter depends on (subject, class) only, so with zero noise
      // every image of one (class, subject) pair renders identically.
      Rng jitter = substream(s.seed, {0x517e, static_cast<std::uint64_t>(subject),
                                      static_cast<std::uint64_t>(cls)});
      for (const auto& comp : s.class_templates[cls]) {
        const double amp_scale = 1.0 + s.subject_jitter * jitter.normal();
        const double phase_shift = s.subject_jitter * jitter.normal();
        detail::add_component(seq.samples, comp, s, transient, amp_scale, phase_shift);
      }

      if (s.noise_sigma > 0.0) {
        Rng noise = substream(s.seed, {0x4015e, static_cast<std::uint64_t>(subject),
                                       static_cast<std::uint64_t>(img)});
        for (Eigen::Index c = 0; c < seq.samples.rows(); ++c)
          for (Eigen::Index n = 0; n < steps; ++n)
            seq.samples(c, n) += noise.normal(0.0, s.noise_sigma);
      }
      ds.sequences.push_back(std::move(seq));
    }
  }
  return {std::move(ds), SynthGroundTruth{s, plan.background}};
}

/// Synthetic image features: a fixed seeded class embedding plus a per-image
/// Gaussian perturbation of scale feature_sigma, giving a learnable
/// image -> class -> signal correspondence.
inline ImageFeatureTable generate_image_features(const SynthSpec& raw_spec,
                                                 Eigen::Index dimension) {
  raw_spec.validate();
  require(dimension >= 1, "synth", "feature dimension must be >= 1");
  ImageFeatureTable table;
  table.source_tag = "synthetic";
  table.aggregation = FeatureAggregation::none;
  std::vector<Vec> embeddings;
  for (int cls = 0; cls < raw_spec.class_count; ++cls) {
    Rng rng = substream(raw_spec.seed, {0x1f0a, static_cast<std::uint64_t>(cls)});
    Vec e(dimension);
    for (Eigen::Index i = 0; i < dimension; ++i) e[i] = rng.normal();
    embeddings.push_back(std::move(e));
  }
  for (std::uint32_t img = 0; img < raw_spec.image_count(); ++img) {
    const auto cls = img / static_cast<std::uint32_t>(raw_spec.images_per_class);
    Vec f = embeddings[cls];
    if (raw_spec.feature_sigma > 0.0) {
      Rng rng = substream(raw_spec.seed, {0x19b2, static_cast<std::uint64_t>(img)});
      for (Eigen::Index i = 0; i < dimension; ++i)
        f[i] += rng.normal(0.0, raw_spec.feature_sigma);
    }
    table.features[img] = std::move(f);
  }
  return table;
}

}  // namespace brainfold
