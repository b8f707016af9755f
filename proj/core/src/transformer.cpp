// SPDX-License-Identifier: Apache-2.0
#include "soho/transformer.hpp"

#include <cmath>

#include "soho/error.hpp"
#include "soho/ops.hpp"

namespace soho {

Tensor Dense::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
  const Real bound = std::sqrt(6.0 / Real(in + out));
  std::vector<Real> w(in * out);
  for (auto& x : w) x = rng.uniform(-bound, bound);
  return {Tensor::parameter({in, out}, std::move(w)), Tensor::zeros({out}, true)};
}

LayerNormParams make_layer_norm(std::size_t c) { return {Tensor::full({c}, 1.0, true), Tensor::zeros({c}, true)}; }

Tensor multi_head_attention(const Tensor& x, std::span<const std::uint8_t> key_mask, const AttentionParams& p,
                            std::size_t heads, std::size_t seq_len) {
  if (x.rank() != 2 || key_mask.size() != x.dim(0)) {
    throw DimensionError("multi_head_attention: mask of length " + std::to_string(key_mask.size()) +
                         " does not match input rows");
  }
  return p.o(attention(p.q(x), p.k(x), p.v(x), key_mask, seq_len, heads));
}

CrossModalTransformer::CrossModalTransformer(const TransformerConfig& config, Rng& rng) : config_(config) {
  if (config.heads == 0 || config.c % config.heads != 0) {
    throw ConfigError("transformer: c=" + std::to_string(config.c) + " is not divisible by heads=" +
                      std::to_string(config.heads));
  }
  const std::size_t c = config.c, hidden = c * config.mlp_ratio;
  for (std::size_t i = 0; i < config.layers; ++i) {
    TransformerLayer layer;
    layer.ln1 = make_layer_norm(c);
    layer.attn.q = make_dense(c, c, rng);
    layer.attn.k = make_dense(c, c, rng);
    layer.attn.v = make_dense(c, c, rng);
    layer.attn.o = make_dense(c, c, rng);
    layer.ln2 = make_layer_norm(c);
    layer.fc1 = make_dense(c, hidden, rng);
    layer.fc2 = make_dense(hidden, c, rng);
    layers_.push_back(std::move(layer));
  }
}

Tensor CrossModalTransformer::forward(const Tensor& x, std::span<const std::uint8_t> key_mask,
                                      std::size_t seq_len) const {
  if (x.rank() != 2 || x.dim(1) != config_.c) {
    throw DimensionError("transformer: input width does not match c=" + std::to_string(config_.c));
  }
  Tensor h = x;
  for (const auto& layer : layers_) {
    h = add(h, multi_head_attention(layer.ln1(h), key_mask, layer.attn, config_.heads, seq_len));
    h = add(h, layer.fc2(gelu(layer.fc1(layer.ln2(h)))));
  }
  return h;
}

void append_dense(ParameterList& out, const std::string& name, const Dense& d, ParamGroup group) {
  out.push_back({name + ".weight", d.weight, group});
  out.push_back({name + ".bias", d.bias, group});
}

void append_layer_norm(ParameterList& out, const std::string& name, const LayerNormParams& ln, ParamGroup group) {
  out.push_back({name + ".gain", ln.gain, group});
  out.push_back({name + ".bias", ln.bias, group});
}

void CrossModalTransformer::collect_parameters(ParameterList& out) const {
  constexpr auto g = ParamGroup::kAdaptive;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layer." + std::to_string(i);
    append_layer_norm(out, p + ".ln1", l.ln1, g);
    append_dense(out, p + ".attn.q", l.attn.q, g);
    append_dense(out, p + ".attn.k", l.attn.k, g);
    append_dense(out, p + ".attn.v", l.attn.v, g);
    append_dense(out, p + ".attn.o", l.attn.o, g);
    append_layer_norm(out, p + ".ln2", l.ln2, g);
    append_dense(out, p + ".mlp.fc1", l.fc1, g);
    append_dense(out, p + ".mlp.fc2", l.fc2, g);
  }
}

}  // namespace soho
