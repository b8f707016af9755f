// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "soho/error.hpp"
#include "soho/trainer.hpp"

namespace soho {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("soho_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TrainConfig tiny_config() {
  auto cfg = TrainConfig::toy();
  cfg.c = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.k = 16;
  cfg.batch_images = 4;
  cfg.epochs = 4;
  cfg.decay_epochs = {3};
  cfg.freeze_epochs = 2;
  cfg.keep_checkpoints = 10;
  cfg.train_images = 12;
  cfg.seed = 5;
  return cfg;
}

Dataset tiny_data(const TrainConfig& cfg) { return generate(cfg.seed, cfg.train_images); }

std::span<Real> grad_of(Tensor& t) {
  if (!t.has_grad()) t.zero_grad();
  return t.mutable_grad();
}

std::vector<Real> flat(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Sgd, HandWorkedSteps) {
  auto a = Tensor::parameter({1}, {1.0});
  grad_of(a)[0] = 0.5;
  Sgd plain({a}, 0.0);
  plain.step(0.1, 0.0);
  EXPECT_DOUBLE_EQ(a.at(0), 0.95);

  auto frozen = Tensor::parameter({2}, {1.0, -2.0});
  grad_of(frozen)[0] = grad_of(frozen)[1] = 3.0;
  Sgd zero_lr({frozen});
  zero_lr.step(0.0, 0.1);
  EXPECT_EQ(flat(frozen), (std::vector<Real>{1.0, -2.0}));

  auto b = Tensor::parameter({1}, {0.0});
  Sgd momentum({b}, 0.9);
  for (int i = 0; i < 2; ++i) {
    grad_of(b)[0] = 1.0;
    momentum.step(0.1, 0.0);
  }
  EXPECT_NEAR(b.at(0), -0.29, 1e-15);
}

TEST(Sgd, WeightDecayJoinsTheGradient) {
  auto a = Tensor::parameter({1}, {2.0});
  grad_of(a)[0] = 0.0;
  Sgd sgd({a}, 0.0);
  sgd.step(0.5, 0.1);
  EXPECT_DOUBLE_EQ(a.at(0), 2.0 - 0.5 * 0.2);
}

TEST(AdamW, HandWorkedSteps) {
  auto a = Tensor::parameter({1}, {1.0});
  grad_of(a)[0] = 0.5;
  AdamW adam({a});
  adam.step(0.1, 0.0);
  EXPECT_NEAR(a.at(0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(a.at(0), 0.9, 1e-7);
  EXPECT_EQ(adam.steps(), 1u);

  auto z = Tensor::parameter({3}, {1.0, -2.0, 0.25});
  grad_of(z);
  AdamW still({z});
  still.step(0.1, 0.0);
  EXPECT_EQ(flat(z), (std::vector<Real>{1.0, -2.0, 0.25}));

  auto d = Tensor::parameter({2}, {1.0, -3.0});
  grad_of(d);
  AdamW decay({d});
  decay.step(0.1, 0.01);
  EXPECT_EQ(d.at(0), 1.0 * (1.0 - 0.1 * 0.01));
  EXPECT_EQ(d.at(1), -3.0 * (1.0 - 0.1 * 0.01));
}

TEST(Optimizers, MissingGradientRejected) {
  auto a = Tensor::parameter({1}, {1.0});
  Sgd sgd({a});
  AdamW adam({a});
  EXPECT_THROW(sgd.step(0.1, 0.0), ContractError);
  EXPECT_THROW(adam.step(0.1, 0.0), ContractError);
}

TEST(Optimizers, ClipGradNorm) {
  auto a = Tensor::parameter({2}, {0.0, 0.0});
  grad_of(a)[0] = 3.0;
  grad_of(a)[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm({a}, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm({a}, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
}

TEST(Schedule, DecayIsMonotone) {
  const std::vector<std::size_t> marks{20, 26};
  EXPECT_EQ(decay_factor(marks, 0), 1.0);
  EXPECT_EQ(decay_factor(marks, 19), 1.0);
  EXPECT_DOUBLE_EQ(decay_factor(marks, 20), 0.1);
  EXPECT_DOUBLE_EQ(decay_factor(marks, 29), 0.1 * 0.1);
  for (std::size_t e = 1; e < 30; ++e) EXPECT_LE(decay_factor(marks, e), decay_factor(marks, e - 1));
}

TEST(Config, PresetsAndValidation) {
  const auto toy = TrainConfig::toy();
  EXPECT_EQ(toy.c, 64u);
  EXPECT_EQ(toy.layers, 3u);
  EXPECT_EQ(toy.heads, 4u);
  EXPECT_EQ(toy.downsample, 16u);
  EXPECT_EQ(toy.k, 128u);
  EXPECT_EQ(toy.batch_images, 8u);
  EXPECT_EQ(toy.epochs, 30u);
  EXPECT_EQ(toy.decay_epochs, (std::vector<std::size_t>{20, 26}));
  EXPECT_EQ(toy.freeze_epochs, 2u);
  EXPECT_EQ(toy.lr_encoder, 1e-2);
  EXPECT_EQ(toy.wd_encoder, 5e-4);
  EXPECT_EQ(toy.lr_transformer, 1e-4);
  EXPECT_EQ(toy.wd_transformer, 1e-2);
  EXPECT_NO_THROW(toy.validate());

  const auto full = TrainConfig::full_scale();
  EXPECT_EQ(full.epochs, 40u);
  EXPECT_EQ(full.decay_epochs, (std::vector<std::size_t>{25, 35}));
  EXPECT_EQ(full.batch_images * 4, 4096u);
  EXPECT_EQ(full.k, 2048u);
  EXPECT_EQ(full.ft_batch, 24u);
  EXPECT_NO_THROW(full.validate());

  auto bad = toy;
  bad.decay_epochs = {26, 20};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = toy;
  bad.freeze_epochs = 30;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = toy;
  bad.lr_transformer = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = toy;
  bad.decay_epochs = {30};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = toy;
  bad.whiten_power = 0.75;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Config, ParseRoundTripAndErrors) {
  const auto cfg = parse_config("# comment\nc = 32\n  heads=2 # trailing\ndecay_epochs = 5, 7\nuse_vd = false\n\n");
  EXPECT_EQ(cfg.c, 32u);
  EXPECT_EQ(cfg.heads, 2u);
  EXPECT_EQ(cfg.decay_epochs, (std::vector<std::size_t>{5, 7}));
  EXPECT_FALSE(cfg.use_vd);
  EXPECT_EQ(parse_config(to_text(cfg)), cfg);
  EXPECT_EQ(parse_config(to_text(TrainConfig::full_scale())), TrainConfig::full_scale());

  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  EXPECT_NE(message("c = 64\nbogus = 1\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("epochs = many\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("c 64\n"), "accepted");
  EXPECT_NE(message("heads = 5\n"), "accepted");
}

TEST(Config, SequenceLength) {
  EXPECT_EQ(sequence_length(600, 1000, 64, 16), 176u);
  EXPECT_EQ(sequence_length(64, 64, 16, 16), 32u);
}

TEST(Checkpoint, SaveLoadSaveIsBitwise) {
  const auto dir = scratch_dir("ckpt");
  Checkpoint c;
  c.tensors.push_back(make_record("w", {2, 3}, {1, 2, 3, 4, 5, -0.0}));
  c.tensors.push_back(make_record("counts", std::vector<std::uint64_t>{7, 0, 1ull << 40}));
  c.optimizer.push_back(make_record("m", {1}, {1e-300}));
  c.rng = "123 456";
  c.config = to_text(TrainConfig::toy());
  c.state = "epoch 3\n";
  save_checkpoint(dir / "a.ckpt", c);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(loaded, c);
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(slurp(dir / "a.ckpt").substr(0, 4), "SOHO");
}

TEST(Checkpoint, CorruptionReportsOffsets) {
  Checkpoint c;
  c.tensors.push_back(make_record("w", {2}, {1, 2}));
  const auto bytes = serialize_checkpoint(c);
  auto offset_of = [](const std::string& b) -> std::uint64_t {
    try {
      parse_checkpoint(b, "x");
    } catch (const FormatError& e) {
      return e.offset();
    }
    ADD_FAILURE() << "accepted";
    return ~0ull;
  };
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(offset_of(bad), 0u);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(offset_of(bad), 4u);
  for (std::size_t cut : {std::size_t(3), std::size_t(10), bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_LE(offset_of(bytes.substr(0, cut)), cut) << cut;
  }
  EXPECT_EQ(offset_of(bytes + "z"), bytes.size());
}

TEST(Pretrainer, ParameterGroupsSplitBackboneFromTheRest) {
  const auto cfg = tiny_config();
  SohoModel model(cfg.model(20), 1);
  for (const auto& p : model.parameters()) {
    const bool conv = p.name.rfind("encoder.conv", 0) == 0;
    EXPECT_EQ(p.group == ParamGroup::kBackbone, conv) << p.name;
  }
}

TEST(Pretrainer, FreezeKeepsConvBlocksBitwise) {
  const auto cfg = tiny_config();
  Pretrainer t(cfg, tiny_data(cfg), scratch_dir("freeze"));
  auto snapshot = [&] {
    std::vector<std::pair<std::string, std::vector<Real>>> out;
    for (const auto& p : t.model().parameters()) out.emplace_back(p.name, flat(p.tensor));
    return out;
  };
  const auto before = snapshot();
  const auto book_before = flat(t.model().book.entries);
  t.run_epoch();
  t.run_epoch();
  const auto frozen = snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool conv = before[i].first.rfind("encoder.conv", 0) == 0;
    if (conv) {
      EXPECT_EQ(std::memcmp(before[i].second.data(), frozen[i].second.data(), before[i].second.size() * sizeof(Real)),
                0)
          << before[i].first;
    } else {
      EXPECT_NE(before[i].second, frozen[i].second) << before[i].first;
    }
  }
  EXPECT_NE(book_before, flat(t.model().book.entries));
  t.run_epoch();
  const auto after = snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NE(frozen[i].second, after[i].second) << before[i].first;
}

TEST(Pretrainer, OutputsAndSeedDeterminism) {
  const auto cfg = tiny_config();
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
  Pretrainer ta(cfg, tiny_data(cfg), a);
  Pretrainer tb(cfg, tiny_data(cfg), b);
  ta.run();
  tb.run();
  const auto csv = slurp(a / "metrics.csv");
  EXPECT_EQ(csv, slurp(b / "metrics.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,total,mlm,mvm,itm,itm_acc,util,perplexity");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  for (std::size_t e = 1; e <= cfg.epochs; ++e) EXPECT_TRUE(fs::exists(ta.checkpoint_path(e)));
  EXPECT_TRUE(fs::exists(a / "vocab.txt"));
  EXPECT_EQ(parse_config(slurp(a / "config.txt")), cfg);

  auto other = cfg;
  other.seed = 6;
  Pretrainer tc(other, tiny_data(cfg), scratch_dir("det_c"));
  EXPECT_NE(tc.run_epoch(), ta.history()[0]);
}

TEST(Pretrainer, ResumeReplaysTheNextEpochBitwise) {
  const auto cfg = tiny_config();
  const auto full_dir = scratch_dir("resume_full");
  Pretrainer full(cfg, tiny_data(cfg), full_dir);
  full.run();
  for (std::size_t e = 1; e < cfg.epochs; ++e) {
    const auto dir = scratch_dir("resume_" + std::to_string(e));
    auto resumed = Pretrainer::resume(full.checkpoint_path(e), tiny_data(cfg), dir);
    EXPECT_EQ(resumed.epochs_done(), e);
    const auto next = resumed.run_epoch();
    EXPECT_EQ(next, full.history()[e]) << "epoch " << e + 1;
    EXPECT_EQ(csv_row(next), csv_row(full.history()[e]));
  }
}

TEST(Pretrainer, CheckpointRebuildsTheModel) {
  const auto cfg = tiny_config();
  Pretrainer t(cfg, tiny_data(cfg), scratch_dir("rebuild"));
  t.run_epoch();
  const auto loaded = load_model(t.checkpoint_path(1));
  EXPECT_EQ(loaded.config, cfg);
  EXPECT_EQ(loaded.vocab.size(), t.vocab().size());
  const auto a = t.model().parameters(), b = loaded.model->parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(flat(a[i].tensor), flat(b[i].tensor)) << a[i].name;
  EXPECT_EQ(flat(t.model().book.entries), flat(loaded.model->book.entries));
  EXPECT_EQ(t.model().book.counts, loaded.model->book.counts);
}

TEST(Pretrainer, NonFiniteLossAbortsWithDump) {
  auto cfg = tiny_config();
  cfg.freeze_epochs = 0;
  cfg.lr_encoder = 1e300;
  cfg.lr_transformer = 1e300;
  const auto dir = scratch_dir("nonfinite");
  Pretrainer t(cfg, tiny_data(cfg), dir);
  try {
    t.run();
    FAIL() << "no abort";
  } catch (const NumericError& e) {
    EXPECT_TRUE(fs::exists(dir / ("nonfinite_batch_" + std::to_string(e.batch_id()) + ".tsv")));
  }
}

}  // namespace
}  // namespace soho
