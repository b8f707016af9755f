// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "soho/dictionary.hpp"
#include "soho/encoder.hpp"
#include "soho/model.hpp"
#include "soho/random.hpp"
#include "soho/text.hpp"

namespace soho {

struct MvmSelection {
  /// Codebook indices chosen for masking, in draw order.
  std::vector<std::int32_t> chosen;
  /// One flag per token; set exactly on every token mapped to a chosen index.
  std::vector<std::uint8_t> flags;
  /// position -> pre-mask codebook index, at the flagged positions.
  std::map<std::size_t, std::int32_t> labels;
};

/// Draws min(m_idx, #used indices) distinct used indices uniformly and flags
/// every token assigned to them. Throws ContractError on an empty assignment.
MvmSelection mvm_select(const Assignment& assignment, Rng& rng, std::size_t m_idx = 1);

struct MvmMasked {
  Tensor embeddings;
  MvmSelection selection;
};

/// mvm_select, then replaces the flagged rows of visual_emb [l x c] with the
/// learned mask vector.
MvmMasked mvm_mask(const Assignment& assignment, const Tensor& visual_emb, const Tensor& mask_vector, Rng& rng,
                   std::size_t m_idx = 1);

struct PretrainOptions {
  Real mlm_p = 0.15;
  std::size_t m_idx = 1;
  bool use_vd = true;
  /// Encoder conv blocks behind a stop-gradient.
  bool frozen = false;
};

struct CaptionSet {
  std::array<std::string, 2> positives;
  std::array<std::string, 2> negatives;
};

struct PairRecord {
  std::size_t image = 0;
  Real itm_label = 0.0;
  /// Unmasked tokens, scored by the matching head.
  TokenSequence text;
  /// Token ids after MLM masking; equal to `text` on negative pairs.
  TokenSequence masked_text;
  std::map<std::size_t, std::int32_t> mlm_labels;
  std::vector<std::uint8_t> visual_flags;
  std::map<std::size_t, std::int32_t> mvm_labels;
};

/// Four pairs per image (two aligned captions, two from other images) over
/// one shared encoder pass. Matching is scored on unmasked inputs so that the
/// mask tokens cannot reveal which pairs are aligned; every positive pair
/// adds a second, masked sequence for MLM and MVM.
struct PretrainBatch {
  VisualFeatureMap features;
  Assignment assignment;
  std::vector<PairRecord> pairs;
  bool use_vd = true;
};

/// Encodes all images once, assigns them against the codebook and masks the
/// positive pairs. Pairs are ordered per image as [pos, pos, neg, neg].
/// Throws SamplingError when a negative repeats one of its image's positives.
PretrainBatch build_pretrain_batch(const SohoModel& model, const Vocabulary& vocab, std::span<const Image> images,
                                   std::span<const CaptionSet> captions, const PretrainOptions& options, Rng& rng);

struct PretrainLosses {
  Tensor total;
  Real mlm = 0.0;
  Real mvm = 0.0;
  Real itm = 0.0;
  std::size_t mlm_positions = 0;
  std::size_t mvm_positions = 0;
  std::size_t itm_correct = 0;
  std::size_t itm_pairs = 0;
};

/// MLM and MVM cross-entropy over masked positions of positive pairs, ITM
/// binary cross-entropy at [CLS] over all pairs; a term without positions is 0.
/// Sequences are packed as the matching sequences of all pairs followed by the
/// masked sequences of the positive pairs.
PretrainLosses pretrain_loss(const PretrainBatch& batch, const SohoModel& model);

}  // namespace soho
