#include "brainfold/encoder.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace brainfold;

namespace {

// Two-class toy problem: each class carries a distinct oscillation frequency,
// so the label survives per-channel standardization.
Dataset tone_dataset(int images_per_class, int subjects, Eigen::Index steps = 20,
                     Eigen::Index channels = 3) {
  Dataset ds;
  ds.class_count = 2;
  ds.subject_count = static_cast<std::uint32_t>(subjects);
  ds.channel_count = static_cast<std::uint32_t>(channels);
  Rng rng(2024);
  std::uint32_t image_id = 0;
  for (std::uint32_t cls = 0; cls < 2; ++cls) {
    const double cycles = cls == 0 ? 2.0 : 5.0;
    for (int img = 0; img < images_per_class; ++img, ++image_id) {
      ds.images[image_id] = {cls, {}};
      for (int s = 0; s < subjects; ++s) {
        EegSequence seq;
        seq.subject_id = static_cast<std::uint32_t>(s);
        seq.image_id = image_id;
        seq.class_id = cls;
        seq.samples.resize(channels, steps);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (Eigen::Index c = 0; c < channels; ++c)
          for (Eigen::Index t = 0; t < steps; ++t)
            seq.samples(c, t) =
                std::sin(2.0 * std::numbers::pi * cycles * t / double(steps) + phase +
                         0.4 * double(c)) +
                rng.normal(0.0, 0.05);
        ds.sequences.push_back(std::move(seq));
      }
    }
  }
  return ds;
}

// Round-robin split so every class appears in every split.
SplitAssignment round_robin_split(const Dataset& ds) {
  SplitAssignment split;
  std::uint32_t i = 0;
  for (const auto& [image_id, entry] : ds.images) {
    const Split s = i % 4 == 2 ? Split::val : (i % 4 == 3 ? Split::test : Split::train);
    split.by_image[image_id] = s;
    ++i;
  }
  return split;
}

EncoderConfig tiny_config(const Dataset& ds) {
  EncoderConfig cfg;
  cfg.arch = EncoderArch::common;
  cfg.common_sizes = {6};
  cfg.channel_count = static_cast<int>(ds.channel_count);
  cfg.class_count = static_cast<int>(ds.class_count);
  return cfg;
}

}  // namespace

TEST_CASE("a single training sample is memorized") {
  auto ds = tone_dataset(2, 1);  // 4 images; round-robin: 2 train, 1 val, 1 test
  // Shrink train to one sequence by pointing the split at a single image.
  SplitAssignment split;
  split.by_image[0] = Split::train;
  split.by_image[1] = Split::val;
  split.by_image[2] = Split::test;
  split.by_image[3] = Split::test;

  TrainHyper hyper;
  hyper.learning_rate = 0.3;
  hyper.momentum = 0.0;
  hyper.batch_size = 1;
  hyper.epochs = 400;
  auto cfg = tiny_config(ds);
  cfg.common_sizes = {4};

  const auto result = train_encoder(ds, split, cfg, hyper, 7);
  CHECK(result.history.epochs.back().train_loss < 0.01);
}

TEST_CASE("training is reproducible down to the model bytes") {
  const auto ds = tone_dataset(4, 2);
  const auto split = round_robin_split(ds);
  TrainHyper hyper;
  hyper.epochs = 3;
  hyper.batch_size = 4;
  hyper.learning_rate = 0.05;

  auto run = [&](int threads) {
    TrainHyper h = hyper;
    h.threads = threads;
    return train_encoder(ds, split, tiny_config(ds), h, 99);
  };
  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(3);  // same bytes at any thread count

  CHECK(a.history.to_text() == b.history.to_text());
  CHECK(a.history.to_text() == c.history.to_text());

  const auto dir = std::filesystem::temp_directory_path() / "bf_train_repro";
  std::filesystem::create_directories(dir);
  save_encoder(dir / "a.bfenc", a.model);
  save_encoder(dir / "b.bfenc", b.model);
  save_encoder(dir / "c.bfenc", c.model);
  auto slurp = [&](const char* name) {
    std::ifstream in(dir / name, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
  };
  const auto bytes_a = slurp("a.bfenc");
  CHECK(bytes_a == slurp("b.bfenc"));
  CHECK(bytes_a == slurp("c.bfenc"));
  CHECK(!bytes_a.empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("full-batch descent with plain gradient steps is monotone early") {
  const auto ds = tone_dataset(3, 1);
  const auto split = round_robin_split(ds);
  TrainHyper hyper;
  hyper.learning_rate = 1e-3;
  hyper.momentum = 0.0;
  hyper.batch_size = 64;  // larger than the split: one full-batch step per epoch
  hyper.epochs = 6;

  const auto result = train_encoder(ds, split, tiny_config(ds), hyper, 3);
  const auto& eps = result.history.epochs;
  REQUIRE(eps.size() == 6);
  for (std::size_t k = 0; k + 1 < 5; ++k)
    CHECK(eps[k + 1].train_loss <= eps[k].train_loss + 1e-12);
}

TEST_CASE("best-epoch snapshot has the maximum validation accuracy") {
  const auto ds = tone_dataset(6, 2);
  const auto split = round_robin_split(ds);
  TrainHyper hyper;
  hyper.epochs = 12;
  hyper.learning_rate = 0.05;
  hyper.batch_size = 8;

  const auto result = train_encoder(ds, split, tiny_config(ds), hyper, 17);
  const auto& hist = result.history;
  REQUIRE(hist.epochs.size() == 12);
  double max_va = -1.0;
  std::size_t first_argmax = 0;
  for (std::size_t k = 0; k < hist.epochs.size(); ++k)
    if (hist.epochs[k].val_acc > max_va) {
      max_va = hist.epochs[k].val_acc;
      first_argmax = k;
    }
  CHECK(hist.best_index == first_argmax);
  CHECK(hist.best().val_acc == max_va);

  // The returned parameters really are the snapshot from that epoch: its
  // validation accuracy must be reproduced by the returned model.
  const auto val = sequences_in_split(ds, split, Split::val);
  CHECK(split_accuracy(result.model, val) == Catch::Approx(max_va));
}

TEST_CASE("history rows are epoch, train_loss, val_acc, test_acc") {
  const auto ds = tone_dataset(3, 1);
  const auto split = round_robin_split(ds);
  TrainHyper hyper;
  hyper.epochs = 2;
  const auto result = train_encoder(ds, split, tiny_config(ds), hyper, 1);

  std::istringstream text(result.history.to_text());
  std::string line;
  REQUIRE(std::getline(text, line));
  CHECK(line == "epoch, train_loss, val_acc, test_acc");
  int rows = 0;
  while (std::getline(text, line)) {
    ++rows;
    int epoch;
    char comma;
    double loss, va, ta;
    std::istringstream row(line);
    row >> epoch >> comma >> loss >> comma >> va >> comma >> ta;
    CHECK(!row.fail());
    CHECK(epoch == rows);
    CHECK(loss >= 0.0);
    CHECK((va >= 0.0 && va <= 1.0));
    CHECK((ta >= 0.0 && ta <= 1.0));
  }
  CHECK(rows == 2);
}

TEST_CASE("non-finite loss aborts training with a diagnostic") {
  auto ds = tone_dataset(3, 1);
  ds.sequences[0].samples(1, 3) = std::numeric_limits<double>::quiet_NaN();
  const auto split = round_robin_split(ds);
  TrainHyper hyper;
  hyper.epochs = 2;
  CHECK_THROWS_WITH(train_encoder(ds, split, tiny_config(ds), hyper, 1),
                    Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("training preconditions are enforced") {
  const auto ds = tone_dataset(3, 1);
  auto split = round_robin_split(ds);

  SECTION("empty validation split") {
    for (auto& [img, s] : split.by_image)
      if (s == Split::val) s = Split::train;
    TrainHyper hyper;
    CHECK_THROWS_WITH(train_encoder(ds, split, tiny_config(ds), hyper, 1),
                      Catch::Matchers::ContainsSubstring("validation split is empty"));
  }

  SECTION("ragged window lengths") {
    auto ragged = ds;
    ragged.sequences[1].samples = Mat::Zero(3, 9);
    TrainHyper hyper;
    CHECK_THROWS_WITH(train_encoder(ragged, split, tiny_config(ds), hyper, 1),
                      Catch::Matchers::ContainsSubstring("windowed length"));
  }

  SECTION("class id outside the configured head") {
    auto cfg = tiny_config(ds);
    cfg.class_count = 1;
    TrainHyper hyper;
    CHECK_THROWS_AS(train_encoder(ds, split, cfg, hyper, 1), PipelineError);
  }

  SECTION("bad hyperparameters") {
    TrainHyper hyper;
    hyper.learning_rate = 0.0;
    CHECK_THROWS_AS(train_encoder(ds, split, tiny_config(ds), hyper, 1), PipelineError);
  }
}
