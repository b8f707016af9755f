// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "soho/dictionary.hpp"
#include "soho/model.hpp"
#include "soho/ops.hpp"
#include "soho/pretrain.hpp"
#include "soho/synthetic.hpp"
#include "soho/text.hpp"

namespace {

using namespace soho;

Tensor random_tensor(Rng& rng, Shape shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<Real> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::constant(shape, std::move(v));
}

ModelConfig toy_model(std::size_t vocab) {
  ModelConfig m;
  m.vocab_size = vocab;
  return m;
}

std::vector<Image> toy_images(std::size_t n) {
  std::vector<Image> out;
  for (const auto& item : generate(1, n)) out.push_back(item.image.to_image());
  return out;
}

void BM_Assign(benchmark::State& state) {
  Rng rng(1);
  const std::size_t l = std::size_t(state.range(0)), k = std::size_t(state.range(1));
  const auto book = init_codebook(k, 64, 2);
  const auto features = random_tensor(rng, {l, 64});
  for (auto _ : state) benchmark::DoNotOptimize(assign(features, book));
  state.SetItemsProcessed(std::int64_t(state.iterations() * l));
}
BENCHMARK(BM_Assign)->Args({128, 128})->Args({128, 2048})->Args({1024, 2048});

void BM_Matmul(benchmark::State& state) {
  Rng rng(2);
  const std::size_t n = std::size_t(state.range(0));
  const auto a = random_tensor(rng, {n, n}), b = random_tensor(rng, {n, n});
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_EncoderForward(benchmark::State& state) {
  const Vocabulary vocab(grammar_words());
  const SohoModel model(toy_model(vocab.size()), 3);
  const auto images = toy_images(std::size_t(state.range(0)));
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.encoder.encode(images, true));
  state.SetItemsProcessed(std::int64_t(state.iterations() * images.size()));
}
BENCHMARK(BM_EncoderForward)->Arg(1)->Arg(8);

void BM_TransformerForward(benchmark::State& state) {
  const Vocabulary vocab(grammar_words());
  const SohoModel model(toy_model(vocab.size()), 4);
  const std::size_t seqs = std::size_t(state.range(0));
  const auto images = toy_images(1);
  const auto features = model.encoder.encode(images, true);
  const auto visual = model.visual_tokens(features, assign(features.features, model.book), true);
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t p = 0; p < features.tokens_per_image(); ++p) rows.push_back(p);
  const std::vector<TokenSequence> texts(seqs, tokenize("a red circle left of a blue square", vocab, 16));
  NoGradGuard no_grad;
  const auto joint = model.joint_input(gather_rows(visual, rows), features.grid_h, features.grid_w, texts);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(joint));
  state.SetItemsProcessed(std::int64_t(state.iterations() * seqs));
}
BENCHMARK(BM_TransformerForward)->Arg(1)->Arg(32);

void BM_PretrainStep(benchmark::State& state) {
  const Dataset data = generate(5, 16);
  std::vector<std::string> corpus;
  for (const auto& d : data) corpus.insert(corpus.end(), d.captions.begin(), d.captions.end());
  const Vocabulary vocab = build_vocab(corpus);
  const SohoModel model(toy_model(vocab.size()), 5);
  std::vector<Image> images;
  std::vector<CaptionSet> captions;
  for (std::size_t i = 0; i < 8; ++i) {
    images.push_back(data[i].image.to_image());
    captions.push_back({data[i].captions, {data[i + 8].captions[0], data[i + 8].captions[1]}});
  }
  Rng rng(6);
  PretrainOptions opt;
  for (auto _ : state) {
    const auto batch = build_pretrain_batch(model, vocab, images, captions, opt, rng);
    const auto losses = pretrain_loss(batch, model);
    backward(losses.total);
  }
  state.SetItemsProcessed(std::int64_t(state.iterations() * images.size()));
}
BENCHMARK(BM_PretrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
