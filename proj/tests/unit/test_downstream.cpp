// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "soho/bench.hpp"
#include "soho/config.hpp"
#include "soho/downstream.hpp"
#include "soho/error.hpp"
#include "soho/ops.hpp"

namespace soho {
namespace {

namespace fs = std::filesystem;

struct Fixture {
  Vocabulary vocab{grammar_words()};
  TrainConfig cfg = [] {
    auto c = TrainConfig::toy();
    c.c = 16;
    c.layers = 1;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.k = 16;
    return c;
  }();
  SohoModel model{cfg.model(vocab.size()), 3};
  Dataset data = generate(11, 12);
};

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("soho_downstream_" + name);
  fs::remove_all(dir);
  return dir;
}

RetrievalScores one_caption_each(std::size_t n, std::vector<Real> scores) {
  RetrievalScores s;
  s.images = n;
  s.captions = n;
  s.scores = std::move(scores);
  for (std::size_t j = 0; j < n; ++j) s.caption_image.push_back(j);
  return s;
}

TEST(RetrievalBatch, IdentityLabelsAndExcludedTruePairs) {
  const Dataset data = generate(4, 40);
  Rng rng(1);
  for (std::size_t t : {2u, 3u, 8u}) {
    std::vector<std::size_t> idx(t);
    for (std::size_t i = 0; i < t; ++i) idx[i] = i * 3;
    const auto b = build_retrieval_batch(data, idx, rng);
    ASSERT_EQ(b.size(), t);
    for (std::size_t i = 0; i < t; ++i) {
      EXPECT_TRUE(b.captions[i] == data[idx[i]].captions[0] || b.captions[i] == data[idx[i]].captions[1]);
      for (std::size_t j = 0; j < t; ++j) {
        EXPECT_EQ(b.labels[i * t + j], i == j ? 1.0 : 0.0);
        const bool true_off = i != j && caption_true(b.captions[j], data[idx[i]].scene);
        EXPECT_EQ(b.active[i * t + j], true_off ? 0 : 1);
      }
    }
  }
}

TEST(Recall, HandWorkedRanks) {
  const std::vector<std::size_t> ranks{1, 3, 6, 2};
  EXPECT_DOUBLE_EQ(recall_at(ranks, 1), 0.25);
  EXPECT_DOUBLE_EQ(recall_at(ranks, 5), 0.75);
  EXPECT_DOUBLE_EQ(recall_at(ranks, 10), 1.0);
  EXPECT_EQ(recall_at(std::vector<std::size_t>{}, 1), 0.0);
}

TEST(Recall, SingleImageWithTwoOwnCaptions) {
  RetrievalScores s;
  s.images = 1;
  s.captions = 2;
  s.scores = {0.2, 0.7};
  s.caption_image = {0, 0};
  const auto r = recall_report(s, {1});
  EXPECT_EQ(r.text[0], 1.0);
  EXPECT_EQ(r.image[0], 1.0);
}

TEST(Recall, RanksCountStrictlyBetterAndLowerIndexTies) {
  // Image 0: caption 2 beats its 0.5, caption 1 ties but has the higher index.
  // Image 2 scores everything 0.0, so both lower-indexed ties go first.
  auto s = one_caption_each(3, {0.5, 0.5, 0.9, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0});
  EXPECT_EQ(text_ranks(s), (std::vector<std::size_t>{2, 2, 3}));
  // Caption 2 ranks images [0.9, 0.3, 0.0]: its own image (2) is last.
  EXPECT_EQ(image_ranks(s), (std::vector<std::size_t>{1, 2, 3}));
  auto flat = one_caption_each(4, std::vector<Real>(16, 0.5));
  EXPECT_EQ(text_ranks(flat), (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Recall, TextAndImageRanksAreTransposes) {
  Rng rng(2);
  const std::size_t n = 30;
  std::vector<Real> scores(n * n), transposed(n * n);
  for (auto& v : scores) v = rng.uniform();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) transposed[j * n + i] = scores[i * n + j];
  const auto a = one_caption_each(n, scores), b = one_caption_each(n, transposed);
  EXPECT_EQ(image_ranks(a), text_ranks(b));
  EXPECT_EQ(text_ranks(a), image_ranks(b));
}

TEST(Recall, RandomScoresGiveChanceAndMonotoneK) {
  Rng rng(3);
  const std::size_t n = 50, trials = 400;
  Real r1 = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<Real> scores(n * n);
    for (auto& v : scores) v = rng.uniform();
    const auto s = one_caption_each(n, scores);
    const auto rep = recall_report(s, {1, 5, 10, 50});
    for (std::size_t k = 1; k < rep.ks.size(); ++k) {
      EXPECT_LE(rep.text[k - 1], rep.text[k]);
      EXPECT_LE(rep.image[k - 1], rep.image[k]);
    }
    EXPECT_EQ(rep.text.back(), 1.0);
    r1 += rep.text[0];
  }
  r1 /= Real(trials);
  // Standard error of the mean is sqrt(p (1-p) / (n trials)) ~ 0.001.
  EXPECT_NEAR(r1, 1.0 / Real(n), 0.005);
}

TEST(Recall, ReportFormat) {
  const auto s = one_caption_each(2, {0.9, 0.1, 0.2, 0.8});
  EXPECT_EQ(recall_report(s, {1}).to_tsv(), "metric\tvalue\ntr_r@1\t1.000000\nir_r@1\t1.000000\n");
}

TEST(ScoreRetrieval, ShapeRangeAndChunkInvariance) {
  Fixture f;
  const Dataset eval(f.data.begin(), f.data.begin() + 5);
  for (bool use_vd : {false, true}) {
    const auto a = score_retrieval(f.model, f.vocab, eval, use_vd, 64);
    const auto b = score_retrieval(f.model, f.vocab, eval, use_vd, 3);
    ASSERT_EQ(a.images, 5u);
    ASSERT_EQ(a.captions, 10u);
    ASSERT_EQ(a.scores.size(), 50u);
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(a.caption_image[j], j / 2);
    for (std::size_t i = 0; i < a.scores.size(); ++i) {
      EXPECT_GT(a.scores[i], 0.0);
      EXPECT_LT(a.scores[i], 1.0);
      EXPECT_NEAR(a.scores[i], b.scores[i], 1e-12);
    }
  }
  EXPECT_THROW(score_retrieval(f.model, f.vocab, Dataset{}, false), DataError);
}

TEST(ScoreRetrieval, VdSwitchChangesScores) {
  Fixture f;
  const Dataset eval(f.data.begin(), f.data.begin() + 3);
  const auto a = score_retrieval(f.model, f.vocab, eval, false);
  const auto b = score_retrieval(f.model, f.vocab, eval, true);
  EXPECT_NE(a.scores, b.scores);
}

TEST(FinetuneRetrieval, BatchValidation) {
  Fixture f;
  RetrievalFinetuneOptions opt;
  opt.batch = 1;
  EXPECT_THROW(finetune_retrieval(f.model, f.vocab, f.data, opt), ConfigError);
  opt.batch = f.data.size() + 1;
  EXPECT_THROW(finetune_retrieval(f.model, f.vocab, f.data, opt), ConfigError);
}

TEST(FinetuneRetrieval, LossDecreasesOnTinySet) {
  Fixture f;
  RetrievalFinetuneOptions opt;
  opt.batch = 4;
  opt.epochs = 6;
  opt.lr = 1e-3;
  opt.halve_epochs = {};
  std::size_t calls = 0;
  const auto hist = finetune_retrieval(f.model, f.vocab, f.data, opt, [&](const FinetuneEpoch&) { ++calls; });
  ASSERT_EQ(hist.size(), 6u);
  EXPECT_EQ(calls, 6u);
  for (const auto& e : hist) {
    EXPECT_TRUE(std::isfinite(e.loss));
    EXPECT_GE(e.accuracy, 0.0);
    EXPECT_LE(e.accuracy, 1.0);
  }
  EXPECT_LT(hist.back().loss, hist.front().loss);
}

TEST(Classifier, HeadWidthsAndUntrainedLoss) {
  Fixture f;
  Rng rng(4);
  EXPECT_EQ(classifier_input_dim(ClassifyMode::kSingle, 16), 16u);
  EXPECT_EQ(classifier_input_dim(ClassifyMode::kPaired, 16), 32u);
  for (auto [mode, classes] : {std::pair{ClassifyMode::kSingle, 5u}, std::pair{ClassifyMode::kPaired, 4u}}) {
    const auto head = make_classifier_head(classifier_input_dim(mode, 16), 16, classes, rng);
    EXPECT_EQ(head.classes(), classes);
    const auto samples = mode == ClassifyMode::kSingle ? color_qa_samples(f.data, 40, rng) : paired_samples(f.data, 40, rng);
    const Tensor logits = classify_logits(f.model, head, f.vocab, f.data, samples, mode, false);
    EXPECT_EQ(logits.dim(0), 40u);
    EXPECT_EQ(logits.dim(1), classes);
    EXPECT_NEAR(classify_loss(logits, samples).item(), std::log(Real(classes)), 0.05);
  }
  const auto wrong = make_classifier_head(16, 16, 4, rng);
  const auto pairs = paired_samples(f.data, 2, rng);
  EXPECT_THROW(classify_logits(f.model, wrong, f.vocab, f.data, pairs, ClassifyMode::kPaired, false), DimensionError);
}

TEST(Classifier, LabelOutOfRangeRejected) {
  Fixture f;
  Rng rng(5);
  const auto head = make_classifier_head(16, 16, 5, rng);
  auto samples = color_qa_samples(f.data, 3, rng);
  const Tensor logits = classify_logits(f.model, head, f.vocab, f.data, samples, ClassifyMode::kSingle, false);
  samples[1].label = 5;
  EXPECT_THROW(classify_loss(logits, samples), DataError);
  samples[1].label = -1;
  EXPECT_THROW(classify_loss(logits, samples), DataError);
  ClassifySample lonely{0, kNoImage, "a circle", 0};
  EXPECT_THROW(classify_logits(f.model, make_classifier_head(32, 16, 4, rng), f.vocab, f.data,
                               std::span(&lonely, 1), ClassifyMode::kPaired, false),
               DataError);
}

TEST(Classifier, ColorQuestionsAreAnswerable) {
  const Dataset data = generate(6, 50);
  Rng rng(6);
  for (const auto& s : color_qa_samples(data, 300, rng)) {
    ASSERT_EQ(s.text.rfind("a ", 0), 0u);
    const std::string shape = s.text.substr(2);
    std::size_t matches = 0;
    for (const auto& o : data[s.image].scene.objects) {
      if (name(o.shape) != shape) continue;
      ++matches;
      EXPECT_EQ(s.label, std::int32_t(o.color));
    }
    EXPECT_EQ(matches, 1u);
    EXPECT_EQ(s.image2, kNoImage);
  }
}

TEST(Classifier, PairedLabelsEncodeTruth) {
  const Dataset data = generate(7, 30);
  Rng rng(7);
  std::set<std::int32_t> seen;
  for (const auto& s : paired_samples(data, 500, rng)) {
    ASSERT_NE(s.image, s.image2);
    EXPECT_EQ(s.label & 1, caption_true(s.text, data[s.image].scene) ? 1 : 0);
    EXPECT_EQ((s.label >> 1) & 1, caption_true(s.text, data[s.image2].scene) ? 1 : 0);
    EXPECT_NE(s.label, 0);
    seen.insert(s.label);
  }
  EXPECT_EQ(seen, (std::set<std::int32_t>{1, 2, 3}));
  const Dataset one(data.begin(), data.begin() + 1);
  EXPECT_THROW(paired_samples(one, 1, rng), DataError);
}

TEST(Classifier, FinetuneFitsTinySet) {
  Fixture f;
  Rng rng(8);
  const auto samples = color_qa_samples(f.data, 24, rng);
  ClassifyOptions opt;
  opt.epochs = 25;
  opt.batch = 8;
  opt.lr = 3e-3;
  std::vector<FinetuneEpoch> hist;
  const auto head = finetune_classify(f.model, f.vocab, f.data, samples, opt, [&](const FinetuneEpoch& e) { hist.push_back(e); });
  ASSERT_EQ(hist.size(), 25u);
  EXPECT_LT(hist.back().loss, hist.front().loss);
  const Real acc = classify_accuracy(f.model, head, f.vocab, f.data, samples, ClassifyMode::kSingle, false);
  EXPECT_GE(acc, 0.5);
  auto bad = samples;
  bad[0].label = 9;
  EXPECT_THROW(finetune_classify(f.model, f.vocab, f.data, bad, opt), DataError);
}

TEST(PatchLabel, BackgroundAndDominantColor) {
  const Dataset data = generate(9, 4);
  const auto& item = data[0];
  const auto& obj = item.scene.objects[0];
  const std::size_t cell = item.scene.cell();
  EXPECT_EQ(patch_label(crop(item.image, obj.row * cell, obj.col * cell, cell)), name(obj.color));
  RgbImage blank{16, 16, std::vector<std::uint8_t>(16 * 16 * 3, 64)};
  EXPECT_EQ(patch_label(blank), "background");
}

TEST(Crop, CopiesPixelsAndZeroFillsOutside) {
  const Dataset data = generate(10, 1);
  const auto& img = data[0].image;
  const auto tile = crop(img, 60, 60, 8);
  EXPECT_EQ(tile.height, 8u);
  EXPECT_EQ(tile.pixel(0, 0), img.pixel(60, 60));
  EXPECT_EQ(tile.pixel(3, 3), img.pixel(63, 63));
  EXPECT_EQ(tile.pixel(4, 4), (Rgb{0, 0, 0}));
}

TEST(InspectVd, WritesTilesManifestAndSummary) {
  Fixture f;
  const auto dir = scratch_dir("inspect");
  InspectOptions opt;
  opt.top = 3;
  opt.max_patches = 5;
  const auto sums = inspect_vd(f.model, f.data, dir, opt);
  ASSERT_FALSE(sums.empty());
  ASSERT_LE(sums.size(), 3u);
  for (std::size_t i = 1; i < sums.size(); ++i) EXPECT_GE(sums[i - 1].tokens, sums[i].tokens);
  std::size_t dumped = 0;
  for (const auto& s : sums) {
    EXPECT_GT(s.tokens, 0u);
    EXPECT_EQ(s.dumped, std::min<std::size_t>(s.tokens, 5));
    EXPECT_GT(s.purity, 0.0);
    EXPECT_LE(s.purity, 1.0);
    for (std::size_t n = 0; n < s.dumped; ++n) {
      const auto tile = read_ppm(dir / ("idx_" + std::to_string(s.index)) / ("patch_" + std::to_string(n) + ".ppm"));
      EXPECT_EQ(tile.height, 16u);
      EXPECT_EQ(tile.width, 16u);
    }
    dumped += s.dumped;
  }
  std::ifstream manifest(dir / "manifest.tsv");
  std::string line;
  std::getline(manifest, line);
  EXPECT_EQ(line, "image\trow\tcol\tindex\tpatch");
  std::size_t rows = 0;
  while (std::getline(manifest, line)) rows += !line.empty() && line[0] != '#';
  EXPECT_EQ(rows, dumped);
  EXPECT_TRUE(fs::exists(dir / "summary.tsv"));
}

TEST(InspectVd, UnusedIndexAndRangeCheck) {
  Fixture f;
  const Dataset one(f.data.begin(), f.data.begin() + 1);
  // One image has 16 tokens; find an index none of them uses.
  const auto used = assign(f.model.encoder.encode(one[0].image.to_image(), true).features, f.model.book);
  std::size_t unused = 0;
  while (used.inverse_map.count(std::int32_t(unused))) ++unused;
  const auto dir = scratch_dir("unused");
  InspectOptions opt;
  opt.indices = {unused};
  const auto sums = inspect_vd(f.model, one, dir, opt);
  ASSERT_EQ(sums.size(), 1u);
  EXPECT_EQ(sums[0].tokens, 0u);
  EXPECT_TRUE(fs::is_directory(dir / ("idx_" + std::to_string(unused))));
  EXPECT_TRUE(fs::is_empty(dir / ("idx_" + std::to_string(unused))));
  std::ifstream manifest(dir / "manifest.tsv");
  const std::string text((std::istreambuf_iterator<char>(manifest)), {});
  EXPECT_NE(text.find("# idx_" + std::to_string(unused)), std::string::npos);

  opt.indices = {f.model.book.k};
  EXPECT_THROW(inspect_vd(f.model, one, scratch_dir("range"), opt), UsageError);
}

TEST(Bench, ReportsThreeStagesAndSequenceLength) {
  Fixture f;
  const auto rep = bench_forward(f.model, f.vocab, f.data[0].image.to_image(), f.data[0].captions[0], true, 2, 1);
  ASSERT_EQ(rep.stages.size(), 3u);
  for (const auto& s : rep.stages) EXPECT_GE(s.mean_ms, 0.0);
  EXPECT_EQ(rep.visual_tokens, 16u);
  EXPECT_EQ(rep.sequence_length(), 32u);
  EXPECT_NE(rep.to_tsv().find("transformer\t"), std::string::npos);
  EXPECT_THROW(bench_forward(f.model, f.vocab, f.data[0].image.to_image(), "a", false, 0), UsageError);
}

}  // namespace
}  // namespace soho
