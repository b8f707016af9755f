// SPDX-License-Identifier: Apache-2.0
#include "soho/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "soho/dictionary.hpp"
#include "soho/error.hpp"
#include "soho/ops.hpp"
#include "soho/optim.hpp"

namespace soho {

namespace {

struct VisualInput {
  Tensor tokens;  // [images * l x c]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t l = 0;
};

VisualInput encode_visual(const SohoModel& model, std::span<const Image> images, bool use_vd) {
  const auto features = model.encoder.encode(images, false);
  const auto assignment = assign(features.features, model.book);
  return {model.visual_tokens(features, assignment, use_vd), features.grid_h, features.grid_w,
          features.tokens_per_image()};
}

/// Final hidden state at [CLS] of each sequence, [S x c].
Tensor cls_states(const SohoModel& model, const VisualInput& visual, std::span<const std::size_t> seq_image,
                  std::span<const TokenSequence> texts) {
  std::vector<std::size_t> rows;
  rows.reserve(seq_image.size() * visual.l);
  for (auto img : seq_image)
    for (std::size_t p = 0; p < visual.l; ++p) rows.push_back(img * visual.l + p);
  const JointInput joint = model.joint_input(gather_rows(visual.tokens, rows), visual.grid_h, visual.grid_w, texts);
  const Tensor hidden = model.forward(joint);
  std::vector<std::size_t> cls(texts.size());
  for (std::size_t s = 0; s < cls.size(); ++s) cls[s] = joint.cls_row(s);
  return gather_rows(hidden, cls);
}

Tensor itm_logits(const SohoModel& model, const VisualInput& visual, std::span<const std::size_t> seq_image,
                  std::span<const TokenSequence> texts) {
  const Tensor states = cls_states(model, visual, seq_image, texts);
  std::vector<std::size_t> all(texts.size());
  for (std::size_t s = 0; s < all.size(); ++s) all[s] = s;
  return reshape(model.itm_head(model.head_rows(states, all)), {texts.size()});
}

std::vector<Tensor> tensors_of(const ParameterList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

Real halving(const std::vector<std::size_t>& marks, std::size_t epoch) {
  Real f = 1.0;
  for (auto m : marks)
    if (m <= epoch) f *= 0.5;
  return f;
}

std::size_t rank_of(std::span<const Real> scores, std::size_t target) {
  const Real t = scores[target];
  std::size_t better = 0;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > t || (scores[j] == t && j < target)) ++better;
  return better + 1;
}

}  // namespace

// ---------------------------------------------------------------- retrieval

RetrievalBatch build_retrieval_batch(const Dataset& data, std::span<const std::size_t> images, Rng& rng) {
  RetrievalBatch b;
  const std::size_t t = images.size();
  b.images.assign(images.begin(), images.end());
  for (auto i : images) {
    if (i >= data.size()) throw IndexError("retrieval batch: image index out of range");
    b.captions.push_back(data[i].captions[rng.below(2)]);
  }
  b.labels.assign(t * t, 0.0);
  b.active.assign(t * t, 1);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      if (i == j) {
        b.labels[i * t + j] = 1.0;
      } else if (caption_true(b.captions[j], data[images[i]].scene)) {
        b.active[i * t + j] = 0;
      }
    }
  }
  return b;
}

std::vector<FinetuneEpoch> finetune_retrieval(SohoModel& model, const Vocabulary& vocab, const Dataset& train,
                                              const RetrievalFinetuneOptions& options,
                                              const std::function<void(const FinetuneEpoch&)>& on_epoch) {
  const std::size_t t = options.batch;
  if (t < 2) throw ConfigError("retrieval fine-tuning needs at least 2 pairs per batch");
  if (t > train.size()) {
    throw ConfigError(fmt::format("retrieval batch {} exceeds the {} available images", t, train.size()));
  }
  ParameterList params = model.parameters();
  AdamW adam(tensors_of(params));
  Rng rng(derive_seed(options.seed, {0x7274}));
  const std::size_t max_len = model.config().max_len;

  std::vector<FinetuneEpoch> history;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const Real lr = options.lr * halving(options.halve_epochs, epoch);
    const auto order = permutation(train.size(), rng);
    Real loss_sum = 0.0;
    std::size_t batches = 0, correct = 0, pairs = 0;
    for (std::size_t first = 0; first + t <= order.size(); first += t) {
      const auto batch = build_retrieval_batch(train, std::span(order).subspan(first, t), rng);
      std::vector<Image> images;
      std::vector<TokenSequence> captions;
      for (std::size_t i = 0; i < t; ++i) {
        images.push_back(train[batch.images[i]].image.to_image());
        captions.push_back(tokenize(batch.captions[i], vocab, max_len));
      }
      std::vector<std::size_t> seq_image;
      std::vector<TokenSequence> texts;
      std::vector<Real> labels;
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
          if (!batch.active[i * t + j]) continue;
          seq_image.push_back(i);
          texts.push_back(captions[j]);
          labels.push_back(batch.labels[i * t + j]);
        }
      }
      for (auto& p : params) p.tensor.zero_grad();
      const VisualInput visual = encode_visual(model, images, options.use_vd);
      const Tensor logits = itm_logits(model, visual, seq_image, texts);
      const Tensor loss = bce_with_logits(logits, labels);
      if (!std::isfinite(loss.item())) throw NumericError(std::int64_t(batches), "non-finite retrieval loss");
      backward(loss);
      adam.step(lr, options.wd);
      loss_sum += loss.item();
      for (std::size_t s = 0; s < labels.size(); ++s) correct += (logits.at(s) > 0.0) == (labels[s] > 0.5);
      pairs += labels.size();
      ++batches;
    }
    FinetuneEpoch e{epoch + 1, batches ? loss_sum / Real(batches) : 0.0, pairs ? Real(correct) / Real(pairs) : 0.0};
    history.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return history;
}

RetrievalScores score_retrieval(const SohoModel& model, const Vocabulary& vocab, const Dataset& eval, bool use_vd,
                                std::size_t chunk) {
  if (eval.empty()) throw DataError("retrieval evaluation needs at least one image");
  if (chunk == 0) chunk = 1;
  NoGradGuard no_grad;
  RetrievalScores out;
  out.images = eval.size();
  std::vector<TokenSequence> captions;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    for (const auto& c : eval[i].captions) {
      captions.push_back(tokenize(c, vocab, model.config().max_len));
      out.caption_image.push_back(i);
    }
  }
  out.captions = captions.size();
  out.scores.assign(out.images * out.captions, 0.0);

  std::vector<Image> images;
  for (const auto& item : eval) images.push_back(item.image.to_image());
  std::vector<Tensor> blocks;
  VisualInput visual;
  for (std::size_t first = 0; first < images.size(); first += 32) {
    const std::size_t n = std::min<std::size_t>(32, images.size() - first);
    visual = encode_visual(model, std::span(images).subspan(first, n), use_vd);
    blocks.push_back(visual.tokens);
  }
  visual.tokens = concat_rows(blocks);

  for (std::size_t i = 0; i < out.images; ++i) {
    for (std::size_t first = 0; first < out.captions; first += chunk) {
      const std::size_t n = std::min(chunk, out.captions - first);
      const std::vector<std::size_t> seq_image(n, i);
      const Tensor logits = itm_logits(model, visual, seq_image, std::span(captions).subspan(first, n));
      for (std::size_t j = 0; j < n; ++j) out.scores[i * out.captions + first + j] = 1.0 / (1.0 + std::exp(-logits.at(j)));
    }
  }
  return out;
}

std::vector<std::size_t> text_ranks(const RetrievalScores& s) {
  std::vector<std::size_t> ranks;
  for (std::size_t i = 0; i < s.images; ++i) {
    const std::span<const Real> row(s.scores.data() + i * s.captions, s.captions);
    std::size_t best = 0;
    for (std::size_t j = 0; j < s.captions; ++j) {
      if (s.caption_image[j] != i) continue;
      const std::size_t r = rank_of(row, j);
      best = best == 0 ? r : std::min(best, r);
    }
    if (best > 0) ranks.push_back(best);
  }
  return ranks;
}

std::vector<std::size_t> image_ranks(const RetrievalScores& s) {
  std::vector<std::size_t> ranks;
  std::vector<Real> column(s.images);
  for (std::size_t j = 0; j < s.captions; ++j) {
    for (std::size_t i = 0; i < s.images; ++i) column[i] = s.at(i, j);
    ranks.push_back(rank_of(column, s.caption_image[j]));
  }
  return ranks;
}

Real recall_at(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (auto r : ranks) hits += r <= k;
  return Real(hits) / Real(ranks.size());
}

std::string RecallReport::to_tsv() const {
  std::string out = "metric\tvalue\n";
  for (std::size_t i = 0; i < ks.size(); ++i) out += fmt::format("tr_r@{}\t{:.6f}\n", ks[i], text[i]);
  for (std::size_t i = 0; i < ks.size(); ++i) out += fmt::format("ir_r@{}\t{:.6f}\n", ks[i], image[i]);
  return out;
}

RecallReport recall_report(const RetrievalScores& s, std::vector<std::size_t> ks) {
  RecallReport r;
  r.ks = std::move(ks);
  const auto tr = text_ranks(s), ir = image_ranks(s);
  for (auto k : r.ks) {
    r.text.push_back(recall_at(tr, k));
    r.image.push_back(recall_at(ir, k));
  }
  return r;
}

// ----------------------------------------------------------- classification

Tensor ClassifierHead::operator()(const Tensor& x) const { return fc2(gelu(fc1(norm(x)))); }

void ClassifierHead::collect_parameters(ParameterList& out) const {
  out.push_back({"cls.norm.gain", norm.gain, ParamGroup::kAdaptive});
  out.push_back({"cls.norm.bias", norm.bias, ParamGroup::kAdaptive});
  out.push_back({"cls.fc1.weight", fc1.weight, ParamGroup::kAdaptive});
  out.push_back({"cls.fc1.bias", fc1.bias, ParamGroup::kAdaptive});
  out.push_back({"cls.fc2.weight", fc2.weight, ParamGroup::kAdaptive});
  out.push_back({"cls.fc2.bias", fc2.bias, ParamGroup::kAdaptive});
}

ClassifierHead make_classifier_head(std::size_t input_dim, std::size_t hidden, std::size_t classes, Rng& rng) {
  if (input_dim == 0 || hidden == 0 || classes < 2) throw ConfigError("classifier head needs positive widths and >= 2 classes");
  ClassifierHead head{make_layer_norm(input_dim), make_dense(input_dim, hidden, rng), make_dense(hidden, classes, rng)};
  // Near-zero output layer: an untrained head predicts the uniform distribution.
  for (Real& w : head.fc2.weight.mutable_data()) w *= 0.01;
  return head;
}

std::size_t classifier_input_dim(ClassifyMode mode, std::size_t c) { return mode == ClassifyMode::kPaired ? 2 * c : c; }

std::vector<ClassifySample> color_qa_samples(const Dataset& data, std::size_t n, Rng& rng) {
  // (image, object) pairs whose shape occurs once in the scene.
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& objs = data[i].scene.objects;
    for (std::size_t o = 0; o < objs.size(); ++o) {
      const auto same = std::count_if(objs.begin(), objs.end(), [&](const SceneObject& x) { return x.shape == objs[o].shape; });
      if (same == 1) pool.emplace_back(i, o);
    }
  }
  if (pool.empty()) throw DataError("no scene has an object with a unique shape");
  std::vector<ClassifySample> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto [i, o] = pool[rng.below(pool.size())];
    const auto& obj = data[i].scene.objects[o];
    out.push_back({i, kNoImage, "a " + std::string(name(obj.shape)), std::int32_t(obj.color)});
  }
  return out;
}

std::vector<ClassifySample> paired_samples(const Dataset& data, std::size_t n, Rng& rng) {
  if (data.size() < 2) throw DataError("paired samples need at least two images");
  std::vector<ClassifySample> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t a = rng.below(data.size());
    std::size_t b = rng.below(data.size() - 1);
    if (b >= a) ++b;
    const std::size_t pick = rng.below(4);
    const std::string& text = data[pick < 2 ? a : b].captions[pick % 2];
    const std::int32_t label =
        std::int32_t(caption_true(text, data[a].scene)) | (std::int32_t(caption_true(text, data[b].scene)) << 1);
    out.push_back({a, b, text, label});
  }
  return out;
}

Tensor classify_logits(const SohoModel& model, const ClassifierHead& head, const Vocabulary& vocab,
                       const Dataset& images, std::span<const ClassifySample> samples, ClassifyMode mode, bool use_vd) {
  if (samples.empty()) throw DataError("classification needs at least one sample");
  const std::size_t c = model.config().c;
  if (head.input_dim() != classifier_input_dim(mode, c)) {
    throw DimensionError(fmt::format("classifier head expects width {}, mode needs {}", head.input_dim(),
                                     classifier_input_dim(mode, c)));
  }
  // Encode each distinct image once.
  std::map<std::size_t, std::size_t> slot;
  std::vector<Image> pixels;
  auto use = [&](std::size_t idx) {
    if (idx >= images.size()) throw DataError(fmt::format("sample refers to image {} of {}", idx, images.size()));
    auto [it, fresh] = slot.emplace(idx, pixels.size());
    if (fresh) pixels.push_back(images[idx].image.to_image());
    return it->second;
  };
  std::vector<std::size_t> first, second;
  std::vector<TokenSequence> texts;
  for (const auto& s : samples) {
    first.push_back(use(s.image));
    if (mode == ClassifyMode::kPaired) {
      if (s.image2 == kNoImage) throw DataError("paired sample without a second image");
      second.push_back(use(s.image2));
    }
    texts.push_back(tokenize(s.text, vocab, model.config().max_len));
  }
  const VisualInput visual = encode_visual(model, pixels, use_vd);
  Tensor states = cls_states(model, visual, first, texts);
  if (mode == ClassifyMode::kPaired) states = concat_cols(states, cls_states(model, visual, second, texts));
  return head(states);
}

Tensor classify_loss(const Tensor& logits, std::span<const ClassifySample> samples) {
  const std::size_t classes = logits.dim(1);
  std::vector<std::int32_t> labels;
  for (const auto& s : samples) {
    if (s.label < 0 || std::size_t(s.label) >= classes) {
      throw DataError(fmt::format("class label {} outside [0, {})", s.label, classes));
    }
    labels.push_back(s.label);
  }
  return cross_entropy_logits(logits, labels);
}

ClassifierHead finetune_classify(SohoModel& model, const Vocabulary& vocab, const Dataset& images,
                                 std::span<const ClassifySample> train, const ClassifyOptions& options,
                                 const std::function<void(const FinetuneEpoch&)>& on_epoch) {
  if (train.empty()) throw DataError("classification fine-tuning needs samples");
  if (options.batch == 0) throw ConfigError("classification batch must be positive");
  for (const auto& s : train) {
    if (s.label < 0 || std::size_t(s.label) >= options.classes) {
      throw DataError(fmt::format("class label {} outside [0, {})", s.label, options.classes));
    }
  }
  Rng rng(derive_seed(options.seed, {0x636c}));
  const std::size_t c = model.config().c;
  ClassifierHead head = make_classifier_head(classifier_input_dim(options.mode, c), c, options.classes, rng);
  ParameterList params = model.parameters();
  head.collect_parameters(params);
  AdamW adam(tensors_of(params));

  std::vector<ClassifySample> batch;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = permutation(train.size(), rng);
    Real loss_sum = 0.0;
    std::size_t batches = 0, correct = 0;
    for (std::size_t first = 0; first < order.size(); first += options.batch) {
      batch.clear();
      for (std::size_t i = first; i < std::min(order.size(), first + options.batch); ++i) batch.push_back(train[order[i]]);
      for (auto& p : params) p.tensor.zero_grad();
      const Tensor logits = classify_logits(model, head, vocab, images, batch, options.mode, options.use_vd);
      const Tensor loss = classify_loss(logits, batch);
      if (!std::isfinite(loss.item())) throw NumericError(std::int64_t(batches), "non-finite classification loss");
      backward(loss);
      adam.step(options.lr, options.wd);
      loss_sum += loss.item();
      for (std::size_t s = 0; s < batch.size(); ++s) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < options.classes; ++k)
          if (logits.at(s, k) > logits.at(s, best)) best = k;
        correct += std::int32_t(best) == batch[s].label;
      }
      ++batches;
    }
    const FinetuneEpoch e{epoch + 1, loss_sum / Real(batches), Real(correct) / Real(train.size())};
    if (on_epoch) on_epoch(e);
  }
  return head;
}

Real classify_accuracy(const SohoModel& model, const ClassifierHead& head, const Vocabulary& vocab,
                       const Dataset& images, std::span<const ClassifySample> samples, ClassifyMode mode, bool use_vd) {
  if (samples.empty()) return 0.0;
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < samples.size(); first += 64) {
    const auto part = samples.subspan(first, std::min<std::size_t>(64, samples.size() - first));
    const Tensor logits = classify_logits(model, head, vocab, images, part, mode, use_vd);
    for (std::size_t s = 0; s < part.size(); ++s) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < head.classes(); ++k)
        if (logits.at(s, k) > logits.at(s, best)) best = k;
      correct += std::int32_t(best) == part[s].label;
    }
  }
  return Real(correct) / Real(samples.size());
}

// ---------------------------------------------------------- VD inspection

RgbImage crop(const RgbImage& image, std::size_t y, std::size_t x, std::size_t size) {
  RgbImage out{size, size, std::vector<std::uint8_t>(size * size * 3, 0)};
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      if (y + r >= image.height || x + c >= image.width) continue;
      const Rgb p = image.pixel(y + r, x + c);
      std::uint8_t* dst = out.data.data() + (r * size + c) * 3;
      dst[0] = p.r;
      dst[1] = p.g;
      dst[2] = p.b;
    }
  }
  return out;
}

std::string patch_label(const RgbImage& patch) {
  std::array<std::size_t, kColors.size()> counts{};
  for (std::size_t y = 0; y < patch.height; ++y) {
    for (std::size_t x = 0; x < patch.width; ++x) {
      const Rgb p = patch.pixel(y, x);
      for (std::size_t k = 0; k < kColors.size(); ++k)
        if (p == palette(kColors[k])) ++counts[k];
    }
  }
  const auto best = std::max_element(counts.begin(), counts.end());
  if (*best == 0) return "background";
  return std::string(name(kColors[std::size_t(best - counts.begin())]));
}

std::vector<IndexSummary> inspect_vd(const SohoModel& model, const Dataset& data, const std::filesystem::path& out,
                                     const InspectOptions& options) {
  const std::size_t k = model.book.k;
  for (auto j : options.indices) {
    if (j >= k) throw UsageError(fmt::format("codebook index {} out of range; k = {}", j, k));
  }
  struct Token {
    std::size_t image, row, col;
  };
  std::vector<std::vector<Token>> members(k);
  std::size_t grid_w = 0;
  {
    NoGradGuard no_grad;
    for (std::size_t first = 0; first < data.size(); first += 32) {
      std::vector<Image> images;
      for (std::size_t i = first; i < std::min(data.size(), first + 32); ++i) images.push_back(data[i].image.to_image());
      const auto features = model.encoder.encode(images, true);
      const auto a = assign(features.features, model.book);
      const std::size_t l = features.tokens_per_image();
      grid_w = features.grid_w;
      for (std::size_t t = 0; t < a.indices.size(); ++t) {
        members[std::size_t(a.indices[t])].push_back({first + t / l, (t % l) / grid_w, (t % l) % grid_w});
      }
    }
  }

  std::vector<std::size_t> chosen = options.indices;
  if (chosen.empty()) {
    std::vector<std::size_t> used;
    for (std::size_t j = 0; j < k; ++j)
      if (!members[j].empty()) used.push_back(j);
    std::stable_sort(used.begin(), used.end(),
                     [&](std::size_t a, std::size_t b) { return members[a].size() > members[b].size(); });
    used.resize(std::min(used.size(), options.top));
    chosen = used;
  }

  const std::size_t s = model.config().downsample;
  std::filesystem::create_directories(out);
  std::ofstream manifest(out / "manifest.tsv");
  manifest << "image\trow\tcol\tindex\tpatch\n";
  std::vector<IndexSummary> summaries;
  for (auto j : chosen) {
    const auto dir = out / fmt::format("idx_{}", j);
    std::filesystem::create_directories(dir);
    IndexSummary sum;
    sum.index = j;
    sum.tokens = members[j].size();
    if (members[j].empty()) {
      manifest << "# idx_" << j << ": no tokens assigned\n";
      sum.majority = "none";
      summaries.push_back(sum);
      continue;
    }
    std::map<std::string, std::size_t> labels;
    for (std::size_t n = 0; n < members[j].size(); ++n) {
      const auto& tok = members[j][n];
      const RgbImage tile = crop(data[tok.image].image, tok.row * s, tok.col * s, s);
      ++labels[patch_label(tile)];
      if (n >= options.max_patches) continue;
      const auto name = fmt::format("patch_{}.ppm", n);
      write_ppm(dir / name, tile);
      manifest << data[tok.image].id << '\t' << tok.row << '\t' << tok.col << '\t' << j << '\t'
               << fmt::format("idx_{}/{}", j, name) << '\n';
      ++sum.dumped;
    }
    const auto top = std::max_element(labels.begin(), labels.end(),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
    sum.majority = top->first;
    sum.purity = Real(top->second) / Real(members[j].size());
    summaries.push_back(sum);
  }
  std::ofstream summary(out / "summary.tsv");
  summary << "index\ttokens\tdumped\tmajority\tpurity\n";
  for (const auto& sum : summaries) {
    summary << sum.index << '\t' << sum.tokens << '\t' << sum.dumped << '\t' << sum.majority << '\t'
            << fmt::format("{:.6f}", sum.purity) << '\n';
  }
  return summaries;
}

}  // namespace soho
