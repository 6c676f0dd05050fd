#include "brainfold/encoder.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

using namespace brainfold;

namespace {

// ---------------------------------------------------------------------------
// Independent forward oracle: plain scalar loops over the gate equations,
// no shared code with the library's Eigen-based step.
// ---------------------------------------------------------------------------

// Runs one LSTM layer over an input matrix (rows = input dims, cols = time)
// and returns the full hidden trajectory (hidden x time).
Mat oracle_lstm_run(const LstmParams& p, const Mat& x) {
  const Eigen::Index H = p.hidden_size();
  const Eigen::Index D = p.input_size();
  REQUIRE(x.rows() == D);
  std::vector<double> h(H, 0.0), c(H, 0.0);
  Mat track(H, x.cols());
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    std::vector<double> hn(H), cn(H);
    for (Eigen::Index k = 0; k < H; ++k) {
      double zi = p.b[k], zf = p.b[H + k], zg = p.b[2 * H + k], zo = p.b[3 * H + k];
      for (Eigen::Index j = 0; j < D; ++j) {
        zi += p.W(k, j) * x(j, t);
        zf += p.W(H + k, j) * x(j, t);
        zg += p.W(2 * H + k, j) * x(j, t);
        zo += p.W(3 * H + k, j) * x(j, t);
      }
      for (Eigen::Index j = 0; j < H; ++j) {
        zi += p.W(k, D + j) * h[j];
        zf += p.W(H + k, D + j) * h[j];
        zg += p.W(2 * H + k, D + j) * h[j];
        zo += p.W(3 * H + k, D + j) * h[j];
      }
      const double gi = 1.0 / (1.0 + std::exp(-zi));
      const double gf = 1.0 / (1.0 + std::exp(-zf));
      const double gg = std::tanh(zg);
      const double go = 1.0 / (1.0 + std::exp(-zo));
      cn[k] = gf * c[k] + gi * gg;
      hn[k] = go * std::tanh(cn[k]);
    }
    h = hn;
    c = cn;
    for (Eigen::Index k = 0; k < H; ++k) track(k, t) = h[k];
  }
  return track;
}

// Full-architecture forward oracle built from oracle_lstm_run.
Vec oracle_encode(const EncoderModel& m, const Mat& raw) {
  const EncoderConfig& cfg = m.config;
  Mat x = raw;
  if (cfg.standardize) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mean = x.row(r).mean();
      double var = 0.0;
      for (Eigen::Index t = 0; t < x.cols(); ++t)
        var += (x(r, t) - mean) * (x(r, t) - mean);
      var /= static_cast<double>(x.cols());
      double sd = std::sqrt(var);
      if (!(sd > 1e-12)) sd = 1.0;
      for (Eigen::Index t = 0; t < x.cols(); ++t) x(r, t) = (x(r, t) - mean) / sd;
    }
  }
  Mat below;
  if (cfg.arch == EncoderArch::channel_common) {
    below.resize(cfg.channel_count * cfg.channel_hidden, x.cols());
    for (int c = 0; c < cfg.channel_count; ++c) {
      Mat series = x.row(c);
      below.middleRows(c * cfg.channel_hidden, cfg.channel_hidden) =
          oracle_lstm_run(m.p.channel_units[c], series);
    }
  } else {
    below = x;
  }
  for (const auto& layer : m.p.stack) below = oracle_lstm_run(layer, below);
  Vec feature = below.col(below.cols() - 1);
  if (cfg.arch == EncoderArch::common_output) {
    Vec out(cfg.output_size);
    for (int i = 0; i < cfg.output_size; ++i) {
      double acc = m.p.output_b[i];
      for (Eigen::Index j = 0; j < feature.size(); ++j) acc += m.p.output_w(i, j) * feature[j];
      out[i] = acc > 0.0 ? acc : 0.0;
    }
    feature = out;
  }
  return feature;
}

EegSequence sequence_from(const Mat& samples) {
  EegSequence seq;
  seq.samples = samples;
  return seq;
}

Mat random_samples(Rng& rng, Eigen::Index channels, Eigen::Index steps, double scale = 1.0) {
  Mat x(channels, steps);
  for (Eigen::Index c = 0; c < channels; ++c)
    for (Eigen::Index t = 0; t < steps; ++t) x(c, t) = rng.normal(0.0, scale);
  return x;
}

}  // namespace

TEST_CASE("lstm_step base cases") {
  SECTION("all-zero parameters and state stay at zero") {
    LstmParams p;
    p.W = Mat::Zero(8, 5);
    p.b = Vec::Zero(8);
    LstmState s{Vec::Zero(2), Vec::Zero(2)};
    Vec x = Vec::Constant(3, 0.7);
    const auto out = lstm_step(p, x, s);
    CHECK(out.c.isZero(0.0));
    CHECK(out.h.isZero(0.0));
  }

  SECTION("saturated scalar gates pass the cell straight through") {
    // Weights zero; input/forget/output biases at +100 pin those gates at 1,
    // the candidate bias 0 makes g = 0, so c' = c and h' = tanh(c).
    LstmParams p;
    p.W = Mat::Zero(4, 2);
    p.b.resize(4);
    p.b << 100.0, 100.0, 0.0, 100.0;
    LstmState s{Vec::Zero(1), Vec::Constant(1, 2.0)};
    Vec x = Vec::Constant(1, 0.3);
    const auto out = lstm_step(p, x, s);
    CHECK(out.c[0] == Catch::Approx(2.0).epsilon(1e-12));
    CHECK(out.h[0] == Catch::Approx(std::tanh(2.0)).epsilon(1e-12));
    CHECK(out.h[0] == Catch::Approx(0.9640275800758169).epsilon(1e-12));
  }

  SECTION("hidden output is bounded by 1 for any finite input") {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
      LstmParams p = lstm_init(rng, 4, 6);
      p.W *= 40.0;  // exaggerate to probe the saturation regime
      LstmState s{Vec::Zero(6), Vec::Zero(6)};
      for (int t = 0; t < 5; ++t) {
        Vec x(4);
        for (int j = 0; j < 4; ++j) x[j] = rng.normal(0.0, 50.0);
        s = lstm_step(p, x, s);
        CHECK(s.h.cwiseAbs().maxCoeff() <= 1.0);
        CHECK(s.h.allFinite());
        CHECK(s.c.allFinite());
      }
    }
  }
}

TEST_CASE("encode matches an independent scalar-loop oracle") {
  Rng rng(77);

  SECTION("single common layer") {
    EncoderConfig cfg;
    cfg.arch = EncoderArch::common;
    cfg.common_sizes = {5};
    cfg.channel_count = 4;
    cfg.class_count = 3;
    auto m = init_encoder(cfg, 11);
    const Mat x = random_samples(rng, 4, 9);
    const Vec got = encode(m, sequence_from(x));
    const Vec want = oracle_encode(m, x);
    REQUIRE(got.size() == want.size());
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("two stacked common layers") {
    EncoderConfig cfg;
    cfg.arch = EncoderArch::common;
    cfg.common_sizes = {6, 4};
    cfg.channel_count = 3;
    cfg.class_count = 3;
    auto m = init_encoder(cfg, 12);
    const Mat x = random_samples(rng, 3, 11);
    CHECK((encode(m, sequence_from(x)) - oracle_encode(m, x)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("per-channel units feeding the common stack") {
    EncoderConfig cfg;
    cfg.arch = EncoderArch::channel_common;
    cfg.channel_hidden = 2;
    cfg.common_sizes = {5};
    cfg.channel_count = 4;
    cfg.class_count = 3;
    auto m = init_encoder(cfg, 13);
    const Mat x = random_samples(rng, 4, 8);
    CHECK((encode(m, sequence_from(x)) - oracle_encode(m, x)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("affine + ReLU output layer") {
    EncoderConfig cfg;
    cfg.arch = EncoderArch::common_output;
    cfg.common_sizes = {5};
    cfg.output_size = 7;
    cfg.channel_count = 3;
    cfg.class_count = 3;
    auto m = init_encoder(cfg, 14);
    const Mat x = random_samples(rng, 3, 10);
    CHECK((encode(m, sequence_from(x)) - oracle_encode(m, x)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("encode output dimension follows the architecture") {
  EncoderConfig cfg;
  cfg.channel_count = 5;
  cfg.class_count = 4;
  Rng rng(3);
  const Mat x = random_samples(rng, 5, 6);

  cfg.arch = EncoderArch::common;
  cfg.common_sizes = {7, 5};
  CHECK(encode(init_encoder(cfg, 1), sequence_from(x)).size() == 5);
  CHECK(cfg.feature_dimension() == 5);

  cfg.arch = EncoderArch::channel_common;
  cfg.channel_hidden = 3;
  cfg.common_sizes = {6};
  CHECK(encode(init_encoder(cfg, 1), sequence_from(x)).size() == 6);

  cfg.arch = EncoderArch::common_output;
  cfg.common_sizes = {6};
  cfg.output_size = 9;
  CHECK(encode(init_encoder(cfg, 1), sequence_from(x)).size() == 9);
  CHECK(cfg.feature_dimension() == 9);
}

TEST_CASE("encode edge behavior") {
  EncoderConfig cfg;
  cfg.arch = EncoderArch::common_output;
  cfg.common_sizes = {4};
  cfg.output_size = 4;
  cfg.channel_count = 3;
  cfg.class_count = 3;

  SECTION("all-zero input through all-zero parameters gives a zero feature") {
    EncoderModel m{cfg, zero_params(cfg)};
    const Vec f = encode(m, sequence_from(Mat::Zero(3, 8)));
    CHECK(f.isZero(0.0));
  }

  SECTION("identical sequences produce bit-identical features") {
    auto m = init_encoder(cfg, 5);
    Rng rng(9);
    const Mat x = random_samples(rng, 3, 8);
    const Vec a = encode(m, sequence_from(x));
    const Vec b = encode(m, sequence_from(x));
    CHECK(a == b);
  }

  SECTION("channel mismatch is an error") {
    auto m = init_encoder(cfg, 5);
    CHECK_THROWS_AS(encode(m, sequence_from(Mat::Zero(4, 8))), PipelineError);
  }
}

TEST_CASE("softmax head") {
  SECTION("zero head over 40 classes is uniform") {
    EncoderConfig cfg;
    cfg.common_sizes = {4};
    cfg.channel_count = 2;
    cfg.class_count = 40;
    EncoderModel m{cfg, zero_params(cfg)};
    const Vec probs = classify_features(m, Vec::Zero(4));
    for (Eigen::Index k = 0; k < 40; ++k) CHECK(probs[k] == Catch::Approx(0.025).epsilon(1e-12));
  }

  SECTION("logits (ln 2, 0) give (2/3, 1/3)") {
    Vec logits(2);
    logits << std::log(2.0), 0.0;
    const Vec p = softmax<double>(logits);
    CHECK(p[0] == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(p[1] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  SECTION("shift invariance") {
    Rng rng(4);
    Vec logits(7);
    for (int i = 0; i < 7; ++i) logits[i] = rng.normal(0.0, 3.0);
    const Vec a = softmax<double>(logits);
    const Vec b = softmax<double>(Vec(logits.array() + 7.3));
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("probabilities are positive and sum to 1 for random logits") {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 2 + static_cast<int>(rng.below(40));
      Vec logits(n);
      for (int i = 0; i < n; ++i) logits[i] = rng.normal(0.0, 20.0);
      const Vec p = softmax<double>(logits);
      CHECK(p.minCoeff() > 0.0);
      CHECK(std::abs(p.sum() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cross-entropy from logits") {
  SECTION("uniform over 40 classes costs ln 40") {
    const Vec logits = Vec::Zero(40);
    CHECK(loss_from_logits<double>(logits, 17) ==
          Catch::Approx(3.6888794541139363).epsilon(1e-12));
  }

  SECTION("a certain prediction costs nothing") {
    Vec logits(3);
    logits << 120.0, 0.0, -5.0;
    CHECK(loss_from_logits<double>(logits, 0) < 1e-40);
  }

  SECTION("hand-evaluated 3-class case") {
    Vec logits(3);
    logits << 1.0, 2.0, 3.0;
    // log(e^1 + e^2 + e^3) - 3, evaluated by hand via log-sum-exp
    CHECK(loss_from_logits<double>(logits, 2) ==
          Catch::Approx(0.40760596444438079).epsilon(1e-12));
  }

  SECTION("loss is never negative for random logits") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
      Vec logits(5);
      for (int i = 0; i < 5; ++i) logits[i] = rng.normal(0.0, 10.0);
      CHECK(loss_from_logits<double>(logits, rng.below(5)) >= 0.0);
    }
  }
}

TEST_CASE("layer layout notation") {
  EncoderConfig cfg;

  parse_encoder_layout("128,64 common", cfg);
  CHECK(cfg.arch == EncoderArch::common);
  CHECK(cfg.common_sizes == std::vector<int>{128, 64});
  CHECK(format_encoder_layout(cfg) == "128,64 common");

  parse_encoder_layout("5 channel, 32 common", cfg);
  CHECK(cfg.arch == EncoderArch::channel_common);
  CHECK(cfg.channel_hidden == 5);
  CHECK(cfg.common_sizes == std::vector<int>{32});
  CHECK(format_encoder_layout(cfg) == "5 channel, 32 common");

  parse_encoder_layout("128 common, 128 output", cfg);
  CHECK(cfg.arch == EncoderArch::common_output);
  CHECK(cfg.output_size == 128);
  CHECK(format_encoder_layout(cfg) == "128 common, 128 output");

  CHECK_THROWS_AS(parse_encoder_layout("128", cfg), PipelineError);
  CHECK_THROWS_AS(parse_encoder_layout("128 tower", cfg), PipelineError);
  CHECK_THROWS_AS(parse_encoder_layout("64 output", cfg), PipelineError);
  CHECK_THROWS_AS(parse_encoder_layout("2 channel, 4 common, 8 output", cfg), PipelineError);
}

TEST_CASE("model files round-trip losslessly") {
  const auto dir = std::filesystem::temp_directory_path() / "bf_encoder_io";
  std::filesystem::create_directories(dir);
  Rng rng(31);

  for (auto arch :
       {EncoderArch::common, EncoderArch::channel_common, EncoderArch::common_output}) {
    EncoderConfig cfg;
    cfg.arch = arch;
    cfg.common_sizes = {6, 4};
    cfg.channel_hidden = 2;
    cfg.output_size = 5;
    cfg.channel_count = 3;
    cfg.class_count = 4;
    auto m = init_encoder(cfg, 42);

    const auto path = dir / ("model_" + std::string(arch_name(arch)) + ".bfenc");
    save_encoder(path, m);
    const auto loaded = load_encoder(path);

    CHECK(loaded.config.arch == cfg.arch);
    CHECK(loaded.config.common_sizes == cfg.common_sizes);
    CHECK(loaded.config.class_count == cfg.class_count);
    CHECK(loaded.config.standardize == cfg.standardize);

    const Mat x = random_samples(rng, 3, 7);
    const Vec before = encode(m, sequence_from(x));
    const Vec after = encode(loaded, sequence_from(x));
    CHECK(before == after);  // bit-identical

    // Saving the reloaded model reproduces the file byte for byte.
    const auto path2 = dir / "resaved.bfenc";
    save_encoder(path2, loaded);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
    const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
    CHECK(bytes_a == bytes_b);
  }

  SECTION("corrupted magic is rejected") {
    const auto bad = dir / "bad.bfenc";
    std::ofstream out(bad, std::ios::binary);
    out << "NOTENC1 garbage";
    out.close();
    CHECK_THROWS_AS(load_encoder(bad), PipelineError);
  }

  std::filesystem::remove_all(dir);
}
