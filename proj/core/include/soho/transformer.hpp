// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "soho/parameters.hpp"
#include "soho/random.hpp"
#include "soho/tensor.hpp"

namespace soho {

struct TransformerConfig {
  std::size_t c = 64;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
};

/// Weights are stored [in x out] so that y = x W + b.
struct Dense {
  Tensor weight;
  Tensor bias;

  Tensor operator()(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  Tensor operator()(const Tensor& x) const;
};

struct AttentionParams {
  Dense q, k, v, o;
};

struct TransformerLayer {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  Dense fc1;
  Dense fc2;
};

/// Xavier-uniform weight, zero bias.
Dense make_dense(std::size_t in, std::size_t out, Rng& rng);
LayerNormParams make_layer_norm(std::size_t c);

/// x is S packed sequences of seq_len rows each, [S*seq_len x c]. key_mask has
/// one flag per row; 0 removes that row as a key for every query of its
/// sequence. Throws DimensionError on mismatched shapes.
Tensor multi_head_attention(const Tensor& x, std::span<const std::uint8_t> key_mask, const AttentionParams& p,
                            std::size_t heads, std::size_t seq_len);

/// Pre-norm encoder stack: x + attn(ln1 x), then x + mlp(ln2 x) per layer.
/// No final norm; heads apply their own.
class CrossModalTransformer {
 public:
  CrossModalTransformer(const TransformerConfig& config, Rng& rng);

  Tensor forward(const Tensor& x, std::span<const std::uint8_t> key_mask, std::size_t seq_len) const;

  const TransformerConfig& config() const { return config_; }
  std::vector<TransformerLayer>& layers() { return layers_; }
  const std::vector<TransformerLayer>& layers() const { return layers_; }

  /// Names follow "layer.{i}.attn.q.weight", "layer.{i}.mlp.fc1.bias", ...
  void collect_parameters(ParameterList& out) const;

 private:
  TransformerConfig config_;
  std::vector<TransformerLayer> layers_;
};

void append_dense(ParameterList& out, const std::string& name, const Dense& d, ParamGroup group);
void append_layer_norm(ParameterList& out, const std::string& name, const LayerNormParams& ln, ParamGroup group);

}  // namespace soho
