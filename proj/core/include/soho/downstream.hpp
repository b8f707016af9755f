// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "soho/model.hpp"
#include "soho/synthetic.hpp"
#include "soho/text.hpp"
#include "soho/transformer.hpp"

namespace soho {

// ---------------------------------------------------------------- retrieval

/// One fine-tuning mini-batch: t images, one caption each. Pair (i, j) scores
/// image i against caption j; the diagonal is aligned. Off-diagonal captions
/// that happen to be true of image i are left out of the loss.
struct RetrievalBatch {
  std::vector<std::size_t> images;
  std::vector<std::string> captions;
  std::vector<Real> labels;          // t x t, row = image
  std::vector<std::uint8_t> active;  // t x t

  std::size_t size() const { return images.size(); }
};

RetrievalBatch build_retrieval_batch(const Dataset& data, std::span<const std::size_t> images, Rng& rng);

struct RetrievalFinetuneOptions {
  std::size_t batch = 8;
  std::size_t epochs = 10;
  std::vector<std::size_t> halve_epochs{2, 4, 6};
  Real lr = 1e-4;
  Real wd = 1e-2;
  bool use_vd = false;
  std::uint64_t seed = 0;
};

struct FinetuneEpoch {
  std::size_t epoch = 0;
  Real loss = 0.0;
  Real accuracy = 0.0;
};

/// Binary cross-entropy on the [CLS] matching logit over every active pair of
/// each batch; AdamW over all model parameters, LR halved at each mark.
/// Throws ConfigError when the batch size is below 2 or exceeds the data.
std::vector<FinetuneEpoch> finetune_retrieval(SohoModel& model, const Vocabulary& vocab, const Dataset& train,
                                              const RetrievalFinetuneOptions& options,
                                              const std::function<void(const FinetuneEpoch&)>& on_epoch = {});

/// Matching probabilities of every image against every caption of the set.
/// Caption j belongs to image caption_image[j]; captions are ordered image by
/// image.
struct RetrievalScores {
  std::size_t images = 0;
  std::size_t captions = 0;
  std::vector<Real> scores;  // images x captions
  std::vector<std::size_t> caption_image;

  Real at(std::size_t image, std::size_t caption) const { return scores[image * captions + caption]; }
};

RetrievalScores score_retrieval(const SohoModel& model, const Vocabulary& vocab, const Dataset& eval, bool use_vd,
                                std::size_t chunk = 64);

/// 1-based rank of the best ground truth per query; ties go to the lower
/// candidate index.
std::vector<std::size_t> text_ranks(const RetrievalScores& s);
std::vector<std::size_t> image_ranks(const RetrievalScores& s);

/// Fraction of ranks <= k.
Real recall_at(std::span<const std::size_t> ranks, std::size_t k);

struct RecallReport {
  std::vector<std::size_t> ks;
  std::vector<Real> text;   // image -> caption retrieval (TR)
  std::vector<Real> image;  // caption -> image retrieval (IR)

  /// "metric\tvalue" lines: tr_r@K then ir_r@K.
  std::string to_tsv() const;
};

RecallReport recall_report(const RetrievalScores& s, std::vector<std::size_t> ks = {1, 5, 10});

// ----------------------------------------------------------- classification

enum class ClassifyMode { kSingle, kPaired };

inline constexpr std::size_t kNoImage = std::numeric_limits<std::size_t>::max();

/// Images are indices into a Dataset; image2 is used in paired mode only.
struct ClassifySample {
  std::size_t image = 0;
  std::size_t image2 = kNoImage;
  std::string text;
  std::int32_t label = 0;
};

/// LayerNorm, Dense(in, hidden), GELU, Dense(hidden, classes).
struct ClassifierHead {
  LayerNormParams norm;
  Dense fc1;
  Dense fc2;

  std::size_t input_dim() const { return fc1.weight.dim(0); }
  std::size_t classes() const { return fc2.weight.dim(1); }
  Tensor operator()(const Tensor& x) const;
  void collect_parameters(ParameterList& out) const;
};

ClassifierHead make_classifier_head(std::size_t input_dim, std::size_t hidden, std::size_t classes, Rng& rng);

/// Input width of the head for a mode: c for single, 2c for paired.
std::size_t classifier_input_dim(ClassifyMode mode, std::size_t c);

/// "a {shape}" about a shape that occurs once in the scene; the label is that
/// object's color (kColors order, 5 classes).
std::vector<ClassifySample> color_qa_samples(const Dataset& data, std::size_t n, Rng& rng);

/// Two images and a caption taken from either; label bit 0 says the caption
/// is true of the first image, bit 1 of the second (4 classes).
std::vector<ClassifySample> paired_samples(const Dataset& data, std::size_t n, Rng& rng);

/// [n x classes] logits. Single mode reads the [CLS] state of one pass;
/// paired mode concatenates the [CLS] states of two passes.
Tensor classify_logits(const SohoModel& model, const ClassifierHead& head, const Vocabulary& vocab,
                       const Dataset& images, std::span<const ClassifySample> samples, ClassifyMode mode, bool use_vd);

/// Mean cross-entropy. Throws DataError for labels outside [0, classes).
Tensor classify_loss(const Tensor& logits, std::span<const ClassifySample> samples);

struct ClassifyOptions {
  ClassifyMode mode = ClassifyMode::kSingle;
  std::size_t classes = 5;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  Real lr = 1e-4;
  Real wd = 1e-2;
  bool use_vd = false;
  std::uint64_t seed = 0;
};

/// Trains a fresh head together with the model (AdamW on both).
ClassifierHead finetune_classify(SohoModel& model, const Vocabulary& vocab, const Dataset& images,
                                 std::span<const ClassifySample> train, const ClassifyOptions& options,
                                 const std::function<void(const FinetuneEpoch&)>& on_epoch = {});

Real classify_accuracy(const SohoModel& model, const ClassifierHead& head, const Vocabulary& vocab,
                       const Dataset& images, std::span<const ClassifySample> samples, ClassifyMode mode, bool use_vd);

// ---------------------------------------------------------- VD inspection

struct InspectOptions {
  /// Indices to dump; empty means the `top` most used ones.
  std::vector<std::size_t> indices;
  std::size_t top = 8;
  std::size_t max_patches = 64;
};

struct IndexSummary {
  std::size_t index = 0;
  std::size_t tokens = 0;
  std::size_t dumped = 0;
  /// Most common patch label ("red", ..., or "background") and its share.
  std::string majority;
  Real purity = 0.0;
};

/// Assigns every token of `data`, then writes {out}/idx_{j}/patch_{n}.ppm
/// tiles of s x s pixels, {out}/manifest.tsv (image, row, col, index, patch)
/// and {out}/summary.tsv. Throws UsageError for an index >= k.
std::vector<IndexSummary> inspect_vd(const SohoModel& model, const Dataset& data, const std::filesystem::path& out,
                                     const InspectOptions& options);

/// Palette color covering most pixels of the patch, or "background" when no
/// object pixel is present.
std::string patch_label(const RgbImage& patch);

RgbImage crop(const RgbImage& image, std::size_t y, std::size_t x, std::size_t size);

}  // namespace soho
