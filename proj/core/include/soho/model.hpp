// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "soho/dictionary.hpp"
#include "soho/encoder.hpp"
#include "soho/parameters.hpp"
#include "soho/text.hpp"
#include "soho/transformer.hpp"

namespace soho {

struct ModelConfig {
  std::size_t c = 64;
  std::size_t downsample = 16;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t k = 128;
  Real gamma = 0.99;
  std::size_t max_len = 16;
  std::size_t vocab_size = 0;
  /// Multiplier on the 2-D sine encoding added to visual tokens.
  Real position_scale = 1.0;
};

/// Packed joint sequences: per sequence, l visual rows then T text rows.
struct JointInput {
  Tensor embeddings;
  std::vector<std::uint8_t> key_mask;
  std::size_t sequences = 0;
  std::size_t visual_len = 0;
  std::size_t text_len = 0;

  std::size_t seq_len() const { return visual_len + text_len; }
  std::size_t cls_row(std::size_t seq) const { return seq * seq_len() + visual_len; }
  std::size_t text_row(std::size_t seq, std::size_t pos) const { return seq * seq_len() + visual_len + pos; }
  std::size_t visual_row(std::size_t seq, std::size_t pos) const { return seq * seq_len() + pos; }
};

struct HeadOutputs {
  Tensor mlm;  // [T x vocab]
  Tensor mvm;  // [l x k]
  Tensor itm;  // scalar logit
};

/// Encoder, visual dictionary, embeddings, transformer and the three
/// pre-training heads.
class SohoModel {
 public:
  SohoModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Visual transformer inputs for every token of `features`: the quantized
  /// embedding when `use_vd`, the raw features otherwise.
  Tensor visual_tokens(const VisualFeatureMap& features, const Assignment& assignment, bool use_vd) const;

  /// visual_rows is [S*l x c], one block of l rows per sequence. Adds the 2-D
  /// position encoding and the visual segment row; builds text inputs from
  /// word, position and segment embeddings and interleaves both.
  JointInput joint_input(const Tensor& visual_rows, std::size_t grid_h, std::size_t grid_w,
                         std::span<const TokenSequence> texts) const;

  Tensor forward(const JointInput& input) const;

  /// Final norm applied to selected hidden rows.
  Tensor head_rows(const Tensor& hidden, std::span<const std::size_t> rows) const;
  /// All three heads over one unpacked sequence of l visual + T text rows.
  HeadOutputs heads(const Tensor& hidden, std::size_t visual_len) const;

  /// Everything an optimizer updates; the codebook is not included.
  ParameterList parameters() const;

  VisualEncoder encoder;
  Codebook book;
  CrossModalTransformer transformer;
  Tensor word_embedding;
  Tensor text_position;
  Tensor segment;
  Tensor visual_mask;
  LayerNormParams head_norm;
  Dense mlm_head;
  Dense mvm_head;
  Dense itm_head;

 private:
  ModelConfig config_;
};

}  // namespace soho
