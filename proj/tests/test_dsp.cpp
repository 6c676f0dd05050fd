#include "brainfold/dsp.hpp"
#include "brainfold/rng.hpp"

#include "filter_design_oracle.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

using namespace brainfold;
using Catch::Approx;

namespace {

dsp::IirFilterSpec paper_bandpass() {
  return {dsp::FilterKind::bandpass_butterworth, 2, 14.0, 71.0, 250.0};
}

dsp::IirFilterSpec paper_notch() {
  return {dsp::FilterKind::notch, 2, 49.0, 51.0, 250.0};
}

}  // namespace

TEST_CASE("bandpass design matches the polynomial-route oracle") {
  const auto coeffs = dsp::design_filter(paper_bandpass());
  const auto reference = oracle::design_bandpass(2, 14.0, 71.0, 250.0);

  REQUIRE(coeffs.numerator.size() == reference.b.size());
  REQUIRE(coeffs.denominator.size() == reference.a.size());
  for (std::size_t i = 0; i < reference.b.size(); ++i) {
    CHECK(coeffs.numerator[i] == Approx(reference.b[i]).margin(1e-8));
    CHECK(coeffs.denominator[i] == Approx(reference.a[i]).margin(1e-8));
  }

  // Frozen values from an independent run of scipy.signal.butter(2, [14, 71],
  // btype='bandpass', fs=250).
  const double expected_b[] = {0.25353710388577927, 0.0, -0.5070742077715585, 0.0,
                               0.25353710388577927};
  const double expected_a[] = {1.0, -1.3809533774109752, 0.708041580591136,
                               -0.3286278805645343, 0.17622012903148843};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(coeffs.numerator[i] == Approx(expected_b[i]).margin(1e-8));
    CHECK(coeffs.denominator[i] == Approx(expected_a[i]).margin(1e-8));
  }
}

TEST_CASE("bandpass design matches the oracle across orders and bands") {
  const struct {
    int order;
    double low, high, fs;
  } cases[] = {
      {1, 14.0, 71.0, 250.0}, {2, 8.0, 30.0, 250.0},  {3, 14.0, 71.0, 250.0},
      {2, 1.0, 40.0, 160.0},  {4, 20.0, 90.0, 500.0},
  };
  for (const auto& c : cases) {
    CAPTURE(c.order, c.low, c.high, c.fs);
    const auto coeffs = dsp::design_filter(
        {dsp::FilterKind::bandpass_butterworth, c.order, c.low, c.high, c.fs});
    const auto reference = oracle::design_bandpass(c.order, c.low, c.high, c.fs);
    REQUIRE(coeffs.numerator.size() == reference.b.size());
    for (std::size_t i = 0; i < reference.b.size(); ++i) {
      CHECK(coeffs.numerator[i] == Approx(reference.b[i]).margin(1e-8));
      CHECK(coeffs.denominator[i] == Approx(reference.a[i]).margin(1e-8));
    }
  }
}

TEST_CASE("bandpass magnitude response is -3 dB at the cutoffs") {
  const auto coeffs = dsp::design_filter(paper_bandpass());
  CHECK(dsp::gain_db(coeffs, 14.0) == Approx(-3.0103).margin(1e-3));
  CHECK(dsp::gain_db(coeffs, 71.0) == Approx(-3.0103).margin(1e-3));
  // Mid band within +-3 dB of unity, stop band below -20 dB.
  CHECK(std::abs(dsp::gain_db(coeffs, 50.0)) < 3.0);
  CHECK(dsp::gain_db(coeffs, 1.0) < -20.0);
  CHECK(dsp::gain_db(coeffs, 120.0) < -20.0);

  const auto reference = oracle::design_bandpass(2, 14.0, 71.0, 250.0);
  for (double f : {1.0, 14.0, 33.0, 50.0, 71.0, 120.0})
    CHECK(dsp::magnitude_response(coeffs, f) ==
          Approx(oracle::magnitude(reference, f, 250.0)).margin(1e-10));
}

TEST_CASE("notch kills a 50 Hz sinusoid in steady state") {
  const auto coeffs = dsp::design_filter(paper_notch());
  CHECK(dsp::magnitude_response(coeffs, 50.0) < 1e-12);
  // A nearby frequency passes nearly untouched.
  CHECK(dsp::magnitude_response(coeffs, 45.0) == Approx(0.9893104078522894).margin(1e-9));

  const int n = 3000;
  Mat x(1, n);
  for (int t = 0; t < n; ++t)
    x(0, t) = std::sin(2.0 * std::numbers::pi * 50.0 * t / 250.0);
  const Mat y = dsp::apply_filter(coeffs, x);
  double in_power = 0.0, out_power = 0.0;
  for (int t = 2000; t < n; ++t) {
    in_power += x(0, t) * x(0, t);
    out_power += y(0, t) * y(0, t);
  }
  CHECK(std::sqrt(out_power) <= 0.05 * std::sqrt(in_power));
}

TEST_CASE("DC input dies through the bandpass") {
  const auto coeffs = dsp::design_filter(paper_bandpass());
  Mat x = Mat::Ones(1, 4000);
  const Mat y = dsp::apply_filter(coeffs, x);
  CHECK(std::abs(y(0, 3999)) <= 1e-6);
}

TEST_CASE("cutoff above Nyquist is rejected") {
  auto spec = paper_bandpass();
  spec.high_cut_hz = 125.0;
  CHECK_THROWS_WITH(dsp::design_filter(spec), Catch::Matchers::ContainsSubstring("Nyquist"));
}

TEST_CASE("designed filters are stable over randomized valid specs") {
  Rng rng(20240817);
  for (int trial = 0; trial < 300; ++trial) {
    dsp::IirFilterSpec spec;
    spec.kind = trial % 3 == 0 ? dsp::FilterKind::notch : dsp::FilterKind::bandpass_butterworth;
    spec.order = 1 + static_cast<int>(rng.below(4));
    spec.sample_rate_hz = 100.0 + rng.uniform01() * 900.0;
    const double nyquist = spec.sample_rate_hz / 2.0;
    spec.low_cut_hz = rng.uniform(0.01 * nyquist, 0.7 * nyquist);
    spec.high_cut_hz = rng.uniform(spec.low_cut_hz + 0.05 * nyquist, 0.98 * nyquist);
    CAPTURE(spec.order, spec.low_cut_hz, spec.high_cut_hz, spec.sample_rate_hz);
    const auto coeffs = dsp::design_filter(spec);
    CHECK(coeffs.max_pole_magnitude() < 1.0);
  }
}

TEST_CASE("all-zero input stays all-zero") {
  const auto coeffs = dsp::design_filter(paper_bandpass());
  EegSequence seq;
  seq.samples = Mat::Zero(29, 125);
  const auto out = dsp::apply_filter(coeffs, seq);
  CHECK(out.samples.isZero(0.0));
}

TEST_CASE("impulse response matches the direct-recursion oracle, other channels untouched") {
  const auto coeffs = dsp::design_filter(paper_bandpass());
  const auto reference = oracle::design_bandpass(2, 14.0, 71.0, 250.0);

  const int n = 200;
  EegSequence seq;
  seq.samples = Mat::Zero(4, n);
  seq.samples(2, 0) = 1.0;
  const auto out = dsp::apply_filter(coeffs, seq);

  std::vector<double> impulse(n, 0.0);
  impulse[0] = 1.0;
  const auto expected = oracle::filter_direct(reference, impulse);
  for (int t = 0; t < n; ++t)
    CHECK(out.samples(2, t) == Approx(expected[static_cast<std::size_t>(t)]).margin(1e-10));
  for (Eigen::Index c : {0, 1, 3}) CHECK(out.samples.row(c).isZero(0.0));
}

TEST_CASE("filtering is linear: scaling input scales output") {
  const auto coeffs = dsp::design_filter(paper_bandpass());
  Rng rng(7);
  Mat x(3, 150);
  for (Eigen::Index c = 0; c < x.rows(); ++c)
    for (Eigen::Index t = 0; t < x.cols(); ++t) x(c, t) = rng.normal();
  const Mat y1 = dsp::apply_filter(coeffs, x);
  const Mat y3 = dsp::apply_filter(coeffs, (3.0 * x).eval());
  CHECK((y3 - 3.0 * y1).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("filtering commutes with channel permutation") {
  const auto coeffs = dsp::design_filter(paper_notch());
  Rng rng(11);
  Mat x(5, 80);
  for (Eigen::Index c = 0; c < x.rows(); ++c)
    for (Eigen::Index t = 0; t < x.cols(); ++t) x(c, t) = rng.normal();
  const Mat y = dsp::apply_filter(coeffs, x);

  const int perm[5] = {3, 0, 4, 1, 2};
  Mat xp(5, 80);
  for (int c = 0; c < 5; ++c) xp.row(c) = x.row(perm[c]);
  const Mat yp = dsp::apply_filter(coeffs, xp);
  for (int c = 0; c < 5; ++c) CHECK((yp.row(c) - y.row(perm[c])).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("window arithmetic reproduces the published sample counts") {
  EegSequence seq;
  seq.sample_rate_hz = 250.0;
  seq.samples = Mat::Zero(29, 125);
  for (Eigen::Index t = 0; t < 125; ++t) seq.samples(0, t) = static_cast<double>(t);

  const auto full = dsp::window_sequence(seq, {40.0, 480.0});
  CHECK(full.length() == 110);
  CHECK(full.samples(0, 0) == 10.0);  // starts at index 10

  CHECK(dsp::window_sequence(seq, {40.0, 160.0}).length() == 30);
  CHECK(dsp::window_sequence(seq, {40.0, 320.0}).length() == 70);
  const auto late = dsp::window_sequence(seq, {320.0, 480.0});
  CHECK(late.length() == 40);
  CHECK(late.samples(0, 0) == 80.0);
}

TEST_CASE("windows compose") {
  EegSequence seq;
  seq.sample_rate_hz = 250.0;
  seq.samples = Mat::Zero(2, 125);
  for (Eigen::Index t = 0; t < 125; ++t) seq.samples(1, t) = static_cast<double>(t) * 0.5;

  const auto a = dsp::window_sequence(seq, {40.0, 480.0});
  const auto b = dsp::window_sequence(a, {0.0, 160.0});  // relative to a's origin
  const auto direct = dsp::window_sequence(seq, {40.0, 200.0});
  REQUIRE(b.length() == direct.length());
  CHECK((b.samples - direct.samples).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("empty window is rejected") {
  EegSequence seq;
  seq.sample_rate_hz = 250.0;
  seq.samples = Mat::Zero(2, 125);
  CHECK_THROWS_AS(dsp::window_sequence(seq, {40.0, 41.0}), PipelineError);
  CHECK_THROWS_AS(dsp::window_sequence(seq, {40.0, 600.0}), PipelineError);
}
