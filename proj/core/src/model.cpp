// SPDX-License-Identifier: Apache-2.0
#include "soho/model.hpp"

#include <numeric>

#include "soho/error.hpp"
#include "soho/ops.hpp"

namespace soho {
namespace {

EncoderConfig encoder_config(const ModelConfig& m) { return {m.c, m.downsample}; }
TransformerConfig transformer_config(const ModelConfig& m) { return {m.c, m.layers, m.heads, m.mlp_ratio}; }

Tensor normal_parameter(Rng& rng, Shape shape, Real stddev) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<Real> v(n);
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::parameter(std::move(shape), std::move(v));
}

Rng stream(std::uint64_t seed, std::uint64_t tag) { return Rng(derive_seed(seed, {tag})); }

VisualEncoder make_encoder(const ModelConfig& m, std::uint64_t seed) {
  Rng rng = stream(seed, 1);
  return VisualEncoder(encoder_config(m), rng);
}

CrossModalTransformer make_transformer(const ModelConfig& m, std::uint64_t seed) {
  Rng rng = stream(seed, 3);
  return CrossModalTransformer(transformer_config(m), rng);
}

}  // namespace

SohoModel::SohoModel(const ModelConfig& config, std::uint64_t seed)
    : encoder(make_encoder(config, seed)),
      book(init_codebook(config.k, config.c, derive_seed(seed, {2}), config.gamma)),
      transformer(make_transformer(config, seed)),
      config_(config) {
  if (config.vocab_size <= std::size_t(Vocabulary::kFirstWord)) {
    throw ConfigError("model: vocabulary holds no words");
  }
  if (config.max_len < 3) throw ConfigError("model: max_len must be at least 3");
  const std::size_t c = config.c;
  Rng rng = stream(seed, 4);
  word_embedding = normal_parameter(rng, {config.vocab_size, c}, 0.02);
  text_position = normal_parameter(rng, {config.max_len, c}, 0.02);
  segment = normal_parameter(rng, {2, c}, 0.02);
  visual_mask = normal_parameter(rng, {c}, 0.02);
  head_norm = make_layer_norm(c);
  mlm_head = make_dense(c, config.vocab_size, rng);
  mvm_head = make_dense(c, config.k, rng);
  itm_head = make_dense(c, 1, rng);
}

Tensor SohoModel::visual_tokens(const VisualFeatureMap& features, const Assignment& assignment, bool use_vd) const {
  return use_vd ? embed(features.features, assignment, book) : features.features;
}

JointInput SohoModel::joint_input(const Tensor& visual_rows, std::size_t grid_h, std::size_t grid_w,
                                  std::span<const TokenSequence> texts) const {
  const std::size_t c = config_.c, l = grid_h * grid_w, s = texts.size(), t = config_.max_len;
  if (visual_rows.rank() != 2 || visual_rows.dim(1) != c || visual_rows.dim(0) != s * l) {
    throw DimensionError("joint_input: visual rows do not hold " + std::to_string(s) + " blocks of " +
                         std::to_string(l) + " x " + std::to_string(c));
  }
  const Tensor pe = position_encoding_2d(grid_h, grid_w, c);
  std::vector<Real> tiled(s * l * c);
  for (std::size_t i = 0; i < s; ++i) std::copy(pe.data().begin(), pe.data().end(), tiled.begin() + i * l * c);
  if (config_.position_scale != 1.0)
    for (auto& v : tiled) v *= config_.position_scale;

  std::vector<std::size_t> zeros(s * l, 0), ones(s * t, 1), ids, positions;
  ids.reserve(s * t);
  positions.reserve(s * t);
  for (const auto& seq : texts) {
    if (seq.max_len() != t) throw DimensionError("joint_input: token sequence length differs from max_len");
    for (std::size_t p = 0; p < t; ++p) {
      if (seq.ids[p] < 0 || std::size_t(seq.ids[p]) >= config_.vocab_size) {
        throw IndexError("joint_input: token id " + std::to_string(seq.ids[p]) + " outside the vocabulary");
      }
      ids.push_back(std::size_t(seq.ids[p]));
      positions.push_back(p);
    }
  }
  const Tensor visual = add(add(visual_rows, Tensor::constant({s * l, c}, std::move(tiled))), gather_rows(segment, zeros));
  const Tensor text =
      add(add(gather_rows(word_embedding, ids), gather_rows(text_position, positions)), gather_rows(segment, ones));

  JointInput out;
  out.sequences = s;
  out.visual_len = l;
  out.text_len = t;
  std::vector<std::size_t> order;
  order.reserve(s * (l + t));
  out.key_mask.reserve(s * (l + t));
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t p = 0; p < l; ++p) {
      order.push_back(i * l + p);
      out.key_mask.push_back(1);
    }
    for (std::size_t p = 0; p < t; ++p) {
      order.push_back(s * l + i * t + p);
      out.key_mask.push_back(texts[i].pad_mask[p]);
    }
  }
  out.embeddings = gather_rows(concat_rows({visual, text}), order);
  return out;
}

Tensor SohoModel::forward(const JointInput& input) const {
  return transformer.forward(input.embeddings, input.key_mask, input.seq_len());
}

Tensor SohoModel::head_rows(const Tensor& hidden, std::span<const std::size_t> rows) const {
  return head_norm(gather_rows(hidden, rows));
}

HeadOutputs SohoModel::heads(const Tensor& hidden, std::size_t visual_len) const {
  if (hidden.rank() != 2 || hidden.dim(0) != visual_len + config_.max_len) {
    throw DimensionError("heads: expected one sequence of " + std::to_string(visual_len + config_.max_len) + " rows");
  }
  std::vector<std::size_t> text(config_.max_len), visual(visual_len);
  std::iota(text.begin(), text.end(), visual_len);
  std::iota(visual.begin(), visual.end(), 0);
  const std::size_t cls = visual_len;
  return {mlm_head(head_rows(hidden, text)), mvm_head(head_rows(hidden, visual)),
          reshape(itm_head(head_rows(hidden, std::span(&cls, 1))), {})};
}

ParameterList SohoModel::parameters() const {
  constexpr auto g = ParamGroup::kAdaptive;
  ParameterList out;
  encoder.collect_parameters(out);
  out.push_back({"embed.word", word_embedding, g});
  out.push_back({"embed.text_position", text_position, g});
  out.push_back({"embed.segment", segment, g});
  out.push_back({"embed.visual_mask", visual_mask, g});
  transformer.collect_parameters(out);
  append_layer_norm(out, "head.norm", head_norm, g);
  append_dense(out, "head.mlm", mlm_head, g);
  append_dense(out, "head.mvm", mvm_head, g);
  append_dense(out, "head.itm", itm_head, g);
  return out;
}

}  // namespace soho
