// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "soho/error.hpp"
#include "soho/gradcheck.hpp"
#include "soho/model.hpp"
#include "soho/ops.hpp"
#include "soho/transformer.hpp"
#include "test_util.hpp"

namespace soho {
namespace {

void zero(Tensor t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

// y = x W + b evaluated with scalar loops.
std::vector<Real> dense_oracle(std::span<const Real> x, const Dense& d) {
  const std::size_t in = d.weight.dim(0), out = d.weight.dim(1);
  std::vector<Real> y(out);
  for (std::size_t j = 0; j < out; ++j) {
    Real acc = d.bias.at(j);
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * d.weight.at(i, j);
    y[j] = acc;
  }
  return y;
}

Image random_image(Rng& rng, std::size_t h, std::size_t w) {
  Image img;
  img.height = h;
  img.width = w;
  img.pixels = testing::random_values(rng, 3 * h * w, 0.0, 1.0);
  return img;
}

TEST(MultiHeadAttention, SingleTokenIsOutputOfValue) {
  Rng rng(1);
  const std::size_t c = 8;
  AttentionParams p{make_dense(c, c, rng), make_dense(c, c, rng), make_dense(c, c, rng), make_dense(c, c, rng)};
  for (auto* d : {&p.q, &p.k, &p.v, &p.o})
    for (auto& b : d->bias.mutable_data()) b = rng.uniform(-1, 1);
  auto x = testing::random_const(rng, {1, c});
  const std::uint8_t mask[] = {1};
  auto y = multi_head_attention(x, mask, p, 2, 1);
  const auto expect = dense_oracle(dense_oracle(x.data(), p.v), p.o);
  for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(y.at(j), expect[j], 1e-12);
}

TEST(MultiHeadAttention, SingleUnmaskedKeyTakesAllWeight) {
  Rng rng(2);
  const std::size_t c = 8, n = 5, keep = 3;
  AttentionParams p{make_dense(c, c, rng), make_dense(c, c, rng), make_dense(c, c, rng), make_dense(c, c, rng)};
  auto x = testing::random_const(rng, {n, c});
  std::vector<std::uint8_t> mask(n, 0);
  mask[keep] = 1;
  auto y = multi_head_attention(x, mask, p, 4, n);
  const auto expect = dense_oracle(dense_oracle(x.data().subspan(keep * c, c), p.v), p.o);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(y.at(i, j), expect[j], 1e-12);
}

TEST(MultiHeadAttention, RowsSumToOneOverUnmaskedKeys) {
  Rng rng(3);
  for (int trial = 0; trial < 128; ++trial) {
    const std::size_t heads = 1 + rng.below(4), dh = 1 + rng.below(6), c = heads * dh;
    const std::size_t n = 1 + rng.below(12), seqs = 1 + rng.below(3);
    auto q = testing::random_const(rng, {seqs * n, c}, -3, 3);
    auto k = testing::random_const(rng, {seqs * n, c}, -3, 3);
    std::vector<std::uint8_t> mask(seqs * n);
    for (auto& m : mask) m = rng.bernoulli(0.7);
    for (std::size_t s = 0; s < seqs; ++s) mask[s * n + rng.below(n)] = 1;
    const auto probs = attention_probabilities(q, k, mask, n, heads);
    for (std::size_t s = 0; s < seqs; ++s) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
          Real total = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const Real pij = probs[((s * heads + h) * n + i) * n + j];
            if (!mask[s * n + j]) EXPECT_EQ(pij, 0.0);
            total += pij;
          }
          EXPECT_NEAR(total, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(MultiHeadAttention, MaskLengthMismatch) {
  Rng rng(4);
  AttentionParams p{make_dense(4, 4, rng), make_dense(4, 4, rng), make_dense(4, 4, rng), make_dense(4, 4, rng)};
  std::vector<std::uint8_t> mask(3, 1);
  EXPECT_THROW(multi_head_attention(Tensor::zeros({4, 4}), mask, p, 2, 4), DimensionError);
}

TEST(Transformer, HeadsMustDivideWidth) {
  Rng rng(5);
  EXPECT_THROW(CrossModalTransformer({10, 1, 4, 4}, rng), ConfigError);
}

TEST(Transformer, ZeroResidualBranchesGiveIdentity) {
  Rng rng(6);
  CrossModalTransformer t({16, 3, 4, 4}, rng);
  for (auto& layer : t.layers()) {
    zero(layer.attn.o.weight);
    zero(layer.attn.o.bias);
    zero(layer.fc2.weight);
    zero(layer.fc2.bias);
  }
  auto x = testing::random_const(rng, {2 * 6, 16});
  std::vector<std::uint8_t> mask(12, 1);
  mask[5] = mask[11] = 0;
  auto y = t.forward(x, mask, 6);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(Transformer, PermutingPaddingLeavesOutputsUnchanged) {
  Rng rng(7);
  const std::size_t n = 8, c = 16;
  CrossModalTransformer t({c, 2, 4, 4}, rng);
  auto x = testing::random_values(rng, n * c);
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 0, 0};
  auto swapped = x;
  std::swap_ranges(swapped.begin() + 6 * c, swapped.begin() + 7 * c, swapped.begin() + 7 * c);
  auto a = t.forward(Tensor::constant({n, c}, x), mask, n);
  auto b = t.forward(Tensor::constant({n, c}, swapped), mask, n);
  for (std::size_t i = 0; i < 6 * c; ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(Transformer, EveryUnmaskedPositionInfluencesEveryOutput) {
  Rng rng(8);
  const std::size_t n = 6, c = 16;
  CrossModalTransformer t({c, 2, 4, 4}, rng);
  const auto x = testing::random_values(rng, n * c);
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 0};
  const auto base = t.forward(Tensor::constant({n, c}, x), mask, n);
  for (std::size_t j = 0; j < n; ++j) {
    auto y = x;
    for (std::size_t k = 0; k < c; ++k) y[j * c + k] += rng.uniform(-0.1, 0.1);
    const auto out = t.forward(Tensor::constant({n, c}, y), mask, n);
    for (std::size_t i = 0; i < n; ++i) {
      if (i == j) continue;
      Real diff = 0.0;
      for (std::size_t k = 0; k < c; ++k) diff += std::abs(out.at(i, k) - base.at(i, k));
      if (mask[j]) {
        EXPECT_GT(diff, 1e-6) << "output " << i << " ignores position " << j;
      } else {
        EXPECT_EQ(diff, 0.0) << "output " << i << " sees masked position " << j;
      }
    }
  }
}

ModelConfig tiny_config() {
  ModelConfig m;
  m.c = 16;
  m.downsample = 4;
  m.layers = 2;
  m.heads = 2;
  m.mlp_ratio = 2;
  m.k = 8;
  m.max_len = 5;
  m.vocab_size = 9;
  return m;
}

TEST(Heads, ZeroInputsGiveUniformDistributions) {
  auto cfg = tiny_config();
  SohoModel model(cfg, 1);
  for (auto* d : {&model.mlm_head, &model.mvm_head, &model.itm_head}) {
    zero(d->weight);
    zero(d->bias);
  }
  const std::size_t l = 4;
  auto out = model.heads(Tensor::zeros({l + cfg.max_len, cfg.c}), l);
  EXPECT_EQ(out.mlm.shape(), (Shape{cfg.max_len, cfg.vocab_size}));
  EXPECT_EQ(out.mvm.shape(), (Shape{l, cfg.k}));
  EXPECT_EQ(out.itm.shape(), Shape{});
  auto pm = softmax(out.mlm, 1);
  for (Real p : pm.data()) EXPECT_NEAR(p, 1.0 / Real(cfg.vocab_size), 1e-15);
  auto pv = softmax(out.mvm, 1);
  for (Real p : pv.data()) EXPECT_NEAR(p, 1.0 / Real(cfg.k), 1e-15);
  EXPECT_EQ(1.0 / (1.0 + std::exp(-out.itm.item())), 0.5);
}

struct Composite {
  SohoModel model;
  std::vector<Image> images;
  std::vector<TokenSequence> texts;
  Assignment assignment;
  std::vector<std::int32_t> mlm_targets;
  std::vector<std::int32_t> mvm_targets;

  explicit Composite(Rng& rng) : model(tiny_config(), rng.next_u64()) {
    for (int i = 0; i < 2; ++i) images.push_back(random_image(rng, 8, 8));
    for (int i = 0; i < 2; ++i) {
      TokenSequence t;
      t.ids = {1, std::int32_t(5 + rng.below(4)), std::int32_t(5 + rng.below(4)), 2, 0};
      t.pad_mask = {1, 1, 1, 1, 0};
      texts.push_back(t);
    }
    // Random head biases so no logit sits at a symmetric point.
    for (auto* d : {&model.mlm_head, &model.mvm_head, &model.itm_head})
      for (auto& b : d->bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
    assignment = assign(model.encoder.encode(images, false).features, model.book);
    for (int i = 0; i < 4; ++i) mlm_targets.push_back(std::int32_t(rng.below(9)));
    for (int i = 0; i < 3; ++i) mvm_targets.push_back(std::int32_t(rng.below(8)));
  }

  // heads . forward . (visual input) . encode, with a caller-chosen quantizer.
  template <class Quantize>
  Tensor loss(Quantize quantize) const {
    const auto features = model.encoder.encode(images, false);
    const Tensor visual = quantize(features.features);
    const auto joint = model.joint_input(visual, 2, 2, texts);
    const auto hidden = model.forward(joint);
    const std::size_t mlm_rows[] = {joint.text_row(0, 1), joint.text_row(0, 2), joint.text_row(1, 1),
                                    joint.text_row(1, 2)};
    const std::size_t mvm_rows[] = {joint.visual_row(0, 0), joint.visual_row(0, 3), joint.visual_row(1, 2)};
    const std::size_t cls_rows[] = {joint.cls_row(0), joint.cls_row(1)};
    const Real itm_targets[] = {1.0, 0.0};
    auto mlm = cross_entropy_logits(model.mlm_head(model.head_rows(hidden, mlm_rows)), mlm_targets);
    auto mvm = cross_entropy_logits(model.mvm_head(model.head_rows(hidden, mvm_rows)), mvm_targets);
    auto itm = bce_with_logits(reshape(model.itm_head(model.head_rows(hidden, cls_rows)), {2}), itm_targets);
    return add(add(mlm, mvm), itm);
  }
};

TEST(EndToEnd, FiniteDifferencesThroughEncoderQuantizerAndHeads) {
  Rng rng(9);
  for (int config = 0; config < 5; ++config) {
    Composite comp(rng);
    // The straight-through estimator differentiates the surrogate
    // v + (d - v)|_{v0}; finite differences see exactly that function.
    const auto v0 = comp.model.encoder.encode(comp.images, false).features;
    const Tensor offset = sub(embed(v0, comp.assignment, comp.model.book), v0).detach();
    auto surrogate = [&] { return comp.loss([&](const Tensor& v) { return add(v, offset); }); };
    auto real = [&] { return comp.loss([&](const Tensor& v) { return embed(v, comp.assignment, comp.model.book); }); };
    EXPECT_NEAR(surrogate().item(), real().item(), 1e-12);

    auto params = comp.model.parameters();
    GradCheckOptions opt;
    opt.max_elements = 12;
    opt.seed = rng.next_u64();
    for (auto& p : params) {
      auto report = finite_diff_check(surrogate, p.tensor, opt);
      if (p.name.ends_with("attn.k.bias")) {
        // Softmax is shift invariant per query, so this gradient is zero; a
        // relative error only measures rounding noise here.
        for (std::size_t i = 0; i < report.indices.size(); ++i) {
          EXPECT_LT(std::abs(report.analytic[i]), 1e-12) << p.name;
          EXPECT_LT(std::abs(report.numeric[i]), 1e-8) << p.name;
        }
        continue;
      }
      EXPECT_TRUE(report.passed) << "config " << config << " " << p.name << ": " << report.summary();
    }
    for (auto& p : params) p.tensor.zero_grad();
    backward(surrogate());
    std::vector<std::vector<Real>> want;
    for (auto& p : params) want.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    for (auto& p : params) p.tensor.zero_grad();
    backward(real());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto got = params[i].tensor.grad();
      for (std::size_t j = 0; j < got.size(); ++j) {
        ASSERT_NEAR(got[j], want[i][j], 1e-12 * std::max(1.0, std::abs(want[i][j]))) << params[i].name;
      }
    }
  }
}

TEST(EndToEnd, MatchingLossReachesVisualTokens) {
  Rng rng(10);
  auto cfg = tiny_config();
  SohoModel model(cfg, 3);
  std::vector<Image> images{random_image(rng, 8, 8)};
  auto features = model.encoder.encode(images, false);
  auto a = assign(features.features, model.book);
  auto visual = model.visual_tokens(features, a, true);
  visual.retain_grad();
  TokenSequence t{{1, 5, 6, 2, 0}, {1, 1, 1, 1, 0}};
  auto joint = model.joint_input(visual, 2, 2, std::span(&t, 1));
  auto hidden = model.forward(joint);
  const std::size_t cls = joint.cls_row(0);
  const Real target = 1.0;
  auto loss = bce_with_logits(reshape(model.itm_head(model.head_rows(hidden, std::span(&cls, 1))), {1}),
                              std::span(&target, 1));
  backward(loss);
  EXPECT_FALSE(testing::grad_is_zero(visual));
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("encoder.", 0) == 0) EXPECT_FALSE(testing::grad_is_zero(p.tensor)) << p.name;
  }
}

TEST(JointInput, LayoutAndMask) {
  auto cfg = tiny_config();
  SohoModel model(cfg, 4);
  std::vector<TokenSequence> texts{{{1, 5, 2, 0, 0}, {1, 1, 1, 0, 0}}, {{1, 6, 7, 2, 0}, {1, 1, 1, 1, 0}}};
  auto joint = model.joint_input(Tensor::zeros({8, cfg.c}), 2, 2, texts);
  EXPECT_EQ(joint.seq_len(), 9u);
  EXPECT_EQ(joint.embeddings.shape(), (Shape{18, cfg.c}));
  EXPECT_EQ(joint.cls_row(1), 13u);
  EXPECT_EQ(joint.key_mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0}));
  // A zero visual row carries exactly position encoding plus the visual segment row.
  const auto pe = position_encoding_2d(2, 2, cfg.c);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < cfg.c; ++j)
      EXPECT_EQ(joint.embeddings.at(joint.visual_row(1, p), j), pe.at(p, j) + model.segment.at(0, j));
  EXPECT_THROW(model.joint_input(Tensor::zeros({7, cfg.c}), 2, 2, texts), DimensionError);
}

}  // namespace
}  // namespace soho
