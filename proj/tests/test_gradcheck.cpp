#include "brainfold/encoder.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace brainfold;

namespace {

EegSequence random_sequence(Rng& rng, Eigen::Index channels, Eigen::Index steps) {
  EegSequence seq;
  seq.samples.resize(channels, steps);
  for (Eigen::Index c = 0; c < channels; ++c)
    for (Eigen::Index t = 0; t < steps; ++t) seq.samples(c, t) = rng.normal();
  return seq;
}

EncoderConfig small_config(EncoderArch arch, Rng& rng) {
  EncoderConfig cfg;
  cfg.arch = arch;
  cfg.channel_count = 3 + static_cast<int>(rng.below(4));
  cfg.class_count = 2 + static_cast<int>(rng.below(4));
  const int hidden = 4 + static_cast<int>(rng.below(9));
  if (rng.below(2) == 0)
    cfg.common_sizes = {hidden};
  else
    cfg.common_sizes = {hidden, 3 + static_cast<int>(rng.below(6))};
  cfg.channel_hidden = 2 + static_cast<int>(rng.below(3));
  cfg.output_size = 4 + static_cast<int>(rng.below(9));
  return cfg;
}

}  // namespace

TEST_CASE("analytic BPTT matches central finite differences") {
  // A handful of randomized instances per architecture; the acceptance
  // harness repeats this at 20 seeds each.
  for (auto arch :
       {EncoderArch::common, EncoderArch::channel_common, EncoderArch::common_output}) {
    DYNAMIC_SECTION("architecture " << arch_name(arch)) {
      for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        Rng rng = substream(seed, {0x9cad, static_cast<std::uint64_t>(arch)});
        const EncoderConfig cfg = small_config(arch, rng);
        auto m = init_encoder(cfg, seed * 31 + 7);
        const auto seq = random_sequence(rng, cfg.channel_count, 8 + rng.below(8));
        const auto label = static_cast<std::uint32_t>(rng.below(cfg.class_count));
        GradCheckDetail detail;
        const double err = grad_check(m, seq, label, 1e-5, &detail);
        INFO("seed " << seed << " worst tensor " << detail.tensor << "[" << detail.index
                     << "] analytic " << detail.analytic << " numeric " << detail.numeric);
        CHECK(err < 1e-4);
      }
    }
  }
}

TEST_CASE("zero-parameter model: only the head bias carries gradient") {
  EncoderConfig cfg;
  cfg.arch = EncoderArch::common;
  cfg.common_sizes = {5};
  cfg.channel_count = 3;
  cfg.class_count = 4;
  EncoderModel m{cfg, zero_params(cfg)};

  Rng rng(12);
  const auto seq = random_sequence(rng, 3, 10);

  // Analytic head-bias gradient of softmax cross-entropy at constant logits
  // is p - onehot with p = 1/classes.
  EncoderParams grads = zero_params(cfg);
  const Mat x = prepare_input(cfg, seq.samples);
  sample_loss_grad(cfg, m.p, x, 2, grads);
  for (int k = 0; k < 4; ++k) {
    const double expected = 0.25 - (k == 2 ? 1.0 : 0.0);
    CHECK(grads.head_b[k] == Catch::Approx(expected).margin(1e-15));
  }
  CHECK(grads.head_w.isZero(0.0));  // zero feature kills the weight gradient
  for (const auto& layer : grads.stack) {
    CHECK(layer.W.isZero(0.0));
    CHECK(layer.b.isZero(0.0));
  }

  // The numeric check agrees to well below the acceptance bound.
  CHECK(grad_check(m, seq, 2, 1e-5) < 1e-8);
}

TEST_CASE("epsilon outside [1e-7, 1e-3] is rejected") {
  EncoderConfig cfg;
  cfg.common_sizes = {4};
  cfg.channel_count = 2;
  cfg.class_count = 2;
  auto m = init_encoder(cfg, 1);
  Rng rng(5);
  const auto seq = random_sequence(rng, 2, 6);
  CHECK_THROWS_AS(grad_check(m, seq, 0, 1e-8), PipelineError);
  CHECK_THROWS_AS(grad_check(m, seq, 0, 5e-3), PipelineError);
  CHECK_NOTHROW(grad_check(m, seq, 0, 1e-7));
  CHECK_NOTHROW(grad_check(m, seq, 0, 1e-3));
}

TEST_CASE("gradient accumulation across samples is additive") {
  EncoderConfig cfg;
  cfg.common_sizes = {4};
  cfg.channel_count = 2;
  cfg.class_count = 3;
  auto m = init_encoder(cfg, 9);
  Rng rng(14);
  const auto a = random_sequence(rng, 2, 7);
  const auto b = random_sequence(rng, 2, 7);

  EncoderParams g_both = zero_params(cfg);
  sample_loss_grad(cfg, m.p, prepare_input(cfg, a.samples), 0, g_both);
  sample_loss_grad(cfg, m.p, prepare_input(cfg, b.samples), 1, g_both);

  EncoderParams g_a = zero_params(cfg);
  EncoderParams g_b = zero_params(cfg);
  sample_loss_grad(cfg, m.p, prepare_input(cfg, a.samples), 0, g_a);
  sample_loss_grad(cfg, m.p, prepare_input(cfg, b.samples), 1, g_b);

  for_each_tensor_pair(g_a, g_b, [](auto& x, const auto& y) { x += y; });
  double diff = 0.0;
  for_each_tensor_pair(g_both, g_a, [&diff](const auto& x, const auto& y) {
    diff = std::max(diff, (x - y).cwiseAbs().maxCoeff());
  });
  CHECK(diff < 1e-12);
}
