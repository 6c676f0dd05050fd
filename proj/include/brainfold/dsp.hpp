#pragma once

#include "brainfold/common.hpp"
#include "brainfold/types.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace brainfold::dsp {

enum class FilterKind { notch, bandpass_butterworth };

struct IirFilterSpec {
  FilterKind kind = FilterKind::bandpass_butterworth;
  int order = 2;  // analog prototype order; band-pass only
  double low_cut_hz = 14.0;
  double high_cut_hz = 71.0;
  double sample_rate_hz = 250.0;

  void validate() const {
    require(sample_rate_hz > 0.0, "dsp", "sample rate must be positive");
    require(low_cut_hz > 0.0, "dsp", "low cutoff must be positive");
    require(low_cut_hz < high_cut_hz, "dsp", "low cutoff must be below high cutoff");
    require(high_cut_hz < sample_rate_hz / 2.0, "dsp", "cutoff above Nyquist");
    if (kind == FilterKind::bandpass_butterworth)
      require(order >= 1, "dsp", "order must be positive");
  }
};

struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;  // denominator, a0 = 1
};

/// Digital IIR filter as a cascade of second-order sections. The expanded
/// numerator/denominator polynomials are kept alongside for inspection and
/// response evaluation; filtering always runs through the cascade.
struct IirCoefficients {
  std::vector<Biquad> sections;
  std::vector<double> numerator;    // b, expanded
  std::vector<double> denominator;  // a, expanded, a[0] = 1
  double sample_rate_hz = 0.0;

  double max_pole_magnitude() const {
    double worst = 0.0;
    for (const Biquad& s : sections) {
      const double disc = s.a1 * s.a1 - 4.0 * s.a2;
      if (disc < 0.0) {
        worst = std::max(worst, std::sqrt(s.a2));
      } else {
        const double r = std::sqrt(disc);
        worst = std::max({worst, std::abs((-s.a1 + r) / 2.0), std::abs((-s.a1 - r) / 2.0)});
      }
    }
    return worst;
  }

  bool stable() const { return max_pole_magnitude() < 1.0; }
};

namespace detail {

inline std::vector<double> poly_multiply(const std::vector<double>& p,
                                         const std::vector<double>& q) {
  std::vector<double> out(p.size() + q.size() - 1, 0.0);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j) out[i + j] += p[i] * q[j];
  return out;
}

inline void expand_sections(IirCoefficients& coeffs) {
  std::vector<double> b{1.0};
  std::vector<double> a{1.0};
  for (const Biquad& s : coeffs.sections) {
    b = poly_multiply(b, {s.b0, s.b1, s.b2});
    a = poly_multiply(a, {1.0, s.a1, s.a2});
  }
  coeffs.numerator = std::move(b);
  coeffs.denominator = std::move(a);
}

inline IirCoefficients design_bandpass(const IirFilterSpec& spec) {
  using cd = std::complex<double>;
  const double fs = spec.sample_rate_hz;
  const int n = spec.order;

  // Analog Butterworth low-pass prototype: n poles on the unit circle in the
  // left half plane, unity gain.
  std::vector<cd> prototype;
  for (int k = 1; k <= n; ++k) {
    const double phi =
        std::numbers::pi / 2.0 + std::numbers::pi * (2.0 * k - 1.0) / (2.0 * n);
    prototype.emplace_back(std::cos(phi), std::sin(phi));
  }

  // Frequency pre-warping so the band edges land exactly after the bilinear
  // transform.
  const double warped_low = 2.0 * fs * std::tan(std::numbers::pi * spec.low_cut_hz / fs);
  const double warped_high = 2.0 * fs * std::tan(std::numbers::pi * spec.high_cut_hz / fs);
  const double bw = warped_high - warped_low;
  const double w0 = std::sqrt(warped_low * warped_high);

  // Low-pass -> band-pass: each prototype pole maps to a pair of poles; the
  // n zeros sit at the origin; analog gain is bw^n.
  std::vector<cd> analog_poles;
  for (const cd& p : prototype) {
    const cd pb = p * bw;
    const cd root = std::sqrt(pb * pb - 4.0 * w0 * w0);
    analog_poles.push_back((pb + root) / 2.0);
    analog_poles.push_back((pb - root) / 2.0);
  }
  const double analog_gain = std::pow(bw, n);

  // Bilinear transform s -> K (z-1)/(z+1), K = 2 fs.
  const double bilinear_k = 2.0 * fs;
  std::vector<cd> digital_poles;
  cd pole_product(1.0, 0.0);
  for (const cd& s : analog_poles) {
    digital_poles.push_back((bilinear_k + s) / (bilinear_k - s));
    pole_product *= bilinear_k - s;
  }
  // Analog zeros are n copies of s = 0; they map to z = 1 and contribute K^n
  // to the gain product. The remaining n digital zeros sit at z = -1.
  const double digital_gain =
      (analog_gain * std::pow(bilinear_k, n) / pole_product).real();

  // Group into biquads: conjugate pole pairs, each paired with one zero at
  // z = 1 and one at z = -1, i.e. numerator (z-1)(z+1) = z^2 - 1.
  std::vector<cd> upper;
  std::vector<double> real_poles;
  for (const cd& p : digital_poles) {
    if (p.imag() > 1e-12) upper.push_back(p);
    else if (p.imag() >= -1e-12) real_poles.push_back(p.real());
  }
  std::sort(upper.begin(), upper.end(), [](const cd& a, const cd& b) {
    return std::abs(a) != std::abs(b) ? std::abs(a) > std::abs(b) : a.real() < b.real();
  });
  std::sort(real_poles.begin(), real_poles.end());

  IirCoefficients coeffs;
  coeffs.sample_rate_hz = fs;
  for (const cd& p : upper) {
    Biquad s;
    s.a1 = -2.0 * p.real();
    s.a2 = std::norm(p);
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;
    coeffs.sections.push_back(s);
  }
  for (std::size_t i = 0; i + 1 < real_poles.size(); i += 2) {
    Biquad s;
    s.a1 = -(real_poles[i] + real_poles[i + 1]);
    s.a2 = real_poles[i] * real_poles[i + 1];
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;
    coeffs.sections.push_back(s);
  }
  require(coeffs.sections.size() == static_cast<std::size_t>(n), "dsp",
          "unexpected pole layout in band-pass design");
  coeffs.sections.front().b0 *= digital_gain;
  coeffs.sections.front().b1 *= digital_gain;
  coeffs.sections.front().b2 *= digital_gain;
  expand_sections(coeffs);
  return coeffs;
}

inline IirCoefficients design_notch(const IirFilterSpec& spec) {
  // Single biquad centered at the band midpoint with Q = f0 / (high - low).
  const double fs = spec.sample_rate_hz;
  const double f0 = (spec.low_cut_hz + spec.high_cut_hz) / 2.0;
  const double q = f0 / (spec.high_cut_hz - spec.low_cut_hz);
  const double w0 = 2.0 * std::numbers::pi * f0 / fs;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;

  IirCoefficients coeffs;
  coeffs.sample_rate_hz = fs;
  Biquad s;
  s.b0 = 1.0 / a0;
  s.b1 = -2.0 * std::cos(w0) / a0;
  s.b2 = 1.0 / a0;
  s.a1 = -2.0 * std::cos(w0) / a0;
  s.a2 = (1.0 - alpha) / a0;
  coeffs.sections.push_back(s);
  expand_sections(coeffs);
  return coeffs;
}

}  // namespace detail

inline IirCoefficients design_filter(const IirFilterSpec& spec) {
  spec.validate();
  IirCoefficients coeffs = spec.kind == FilterKind::bandpass_butterworth
                               ? detail::design_bandpass(spec)
                               : detail::design_notch(spec);
  require(coeffs.stable(), "dsp", "designed filter is unstable");
  return coeffs;
}

/// |H(e^{jw})| at the given frequency, evaluated per section.
inline double magnitude_response(const IirCoefficients& coeffs, double freq_hz) {
  using cd = std::complex<double>;
  const double w = 2.0 * std::numbers::pi * freq_hz / coeffs.sample_rate_hz;
  const cd z1 = std::polar(1.0, -w);
  const cd z2 = z1 * z1;
  cd h(1.0, 0.0);
  for (const Biquad& s : coeffs.sections)
    h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  return std::abs(h);
}

inline double gain_db(const IirCoefficients& coeffs, double freq_hz) {
  return 20.0 * std::log10(magnitude_response(coeffs, freq_hz));
}

/// Causal single-pass filtering through the cascade, zero initial state,
/// transposed direct form II, each channel independent.
inline Mat apply_filter(const IirCoefficients& coeffs, const Mat& samples) {
  Mat out = samples;
  for (Eigen::Index c = 0; c < out.rows(); ++c) {
    for (const Biquad& s : coeffs.sections) {
      double s1 = 0.0, s2 = 0.0;
      for (Eigen::Index t = 0; t < out.cols(); ++t) {
        const double x = out(c, t);
        const double y = s.b0 * x + s1;
        s1 = s.b1 * x - s.a1 * y + s2;
        s2 = s.b2 * x - s.a2 * y;
        out(c, t) = y;
      }
    }
  }
  return out;
}

inline EegSequence apply_filter(const IirCoefficients& coeffs, const EegSequence& seq) {
  require(coeffs.stable(), "dsp", "refusing to run an unstable filter");
  EegSequence out = seq;
  out.samples = apply_filter(coeffs, seq.samples);
  return out;
}

struct TimeWindow {
  double start_ms = 40.0;
  double end_ms = 480.0;
};

/// ms -> sample index, round half away from zero. The 40-480 ms window at
/// 250 Hz must land on indices [10, 120), i.e. 110 samples.
inline Eigen::Index window_index(double ms, double sample_rate_hz) {
  return static_cast<Eigen::Index>(std::llround(ms * sample_rate_hz / 1000.0));
}

inline std::pair<Eigen::Index, Eigen::Index> window_indices(const TimeWindow& window,
                                                            double sample_rate_hz) {
  require(window.start_ms >= 0.0 && window.start_ms < window.end_ms, "dsp",
          "window start must be non-negative and before its end");
  return {window_index(window.start_ms, sample_rate_hz),
          window_index(window.end_ms, sample_rate_hz)};
}

inline EegSequence window_sequence(const EegSequence& seq, const TimeWindow& window) {
  const auto [start, end] = window_indices(window, seq.sample_rate_hz);
  require(end > start, "dsp", "window is empty after rounding");
  require(end <= seq.length(), "dsp", "window extends past the recording");
  EegSequence out = seq;
  out.samples = seq.samples.middleCols(start, end - start).eval();
  return out;
}

}  // namespace brainfold::dsp
