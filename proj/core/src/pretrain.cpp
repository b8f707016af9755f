// SPDX-License-Identifier: Apache-2.0
#include "soho/pretrain.hpp"

#include "soho/error.hpp"
#include "soho/ops.hpp"

namespace soho {

MvmSelection mvm_select(const Assignment& assignment, Rng& rng, std::size_t m_idx) {
  if (assignment.tokens() == 0 || assignment.inverse_map.empty()) {
    throw ContractError("mvm_mask: empty assignment");
  }
  if (m_idx == 0) throw ContractError("mvm_mask: m_idx must be at least 1");
  std::vector<std::int32_t> used;
  used.reserve(assignment.inverse_map.size());
  for (const auto& [j, group] : assignment.inverse_map) used.push_back(j);
  const std::size_t m = std::min(m_idx, used.size());
  for (std::size_t i = 0; i < m; ++i) std::swap(used[i], used[i + rng.below(used.size() - i)]);
  used.resize(m);

  MvmSelection out;
  out.chosen = used;
  out.flags.assign(assignment.tokens(), 0);
  for (auto j : out.chosen) {
    for (auto pos : assignment.inverse_map.at(j)) {
      out.flags[pos] = 1;
      out.labels.emplace(pos, assignment.indices[pos]);
    }
  }
  return out;
}

MvmMasked mvm_mask(const Assignment& assignment, const Tensor& visual_emb, const Tensor& mask_vector, Rng& rng,
                   std::size_t m_idx) {
  if (visual_emb.rank() != 2 || visual_emb.dim(0) != assignment.tokens()) {
    throw DimensionError("mvm_mask: embeddings do not match the assignment");
  }
  auto sel = mvm_select(assignment, rng, m_idx);
  auto masked = mask_rows(visual_emb, sel.flags, mask_vector);
  return {std::move(masked), std::move(sel)};
}

PretrainBatch build_pretrain_batch(const SohoModel& model, const Vocabulary& vocab, std::span<const Image> images,
                                   std::span<const CaptionSet> captions, const PretrainOptions& options, Rng& rng) {
  if (images.empty() || images.size() != captions.size()) {
    throw ContractError("build_pretrain_batch: need one caption set per image");
  }
  for (std::size_t i = 0; i < captions.size(); ++i) {
    for (const auto& neg : captions[i].negatives) {
      for (const auto& pos : captions[i].positives) {
        if (neg == pos) {
          throw SamplingError("build_pretrain_batch: negative caption \"" + neg + "\" of image " + std::to_string(i) +
                              " is one of its positives");
        }
      }
    }
  }
  PretrainBatch batch;
  batch.use_vd = options.use_vd;
  batch.features = model.encoder.encode(images, options.frozen);
  batch.assignment = assign(batch.features.features, model.book);
  const std::size_t l = batch.features.tokens_per_image(), max_len = model.config().max_len;

  for (std::size_t i = 0; i < images.size(); ++i) {
    const Assignment local = batch.assignment.slice(i * l, l);
    for (std::size_t p = 0; p < 4; ++p) {
      PairRecord rec;
      rec.image = i;
      const bool positive = p < 2;
      rec.itm_label = positive ? 1.0 : 0.0;
      const auto& caption = positive ? captions[i].positives[p] : captions[i].negatives[p - 2];
      rec.text = tokenize(caption, vocab, max_len);
      rec.masked_text = rec.text;
      if (positive) {
        auto masked = mlm_mask(rec.text, options.mlm_p, rng, vocab);
        rec.masked_text = std::move(masked.seq);
        rec.mlm_labels = std::move(masked.labels);
        auto sel = mvm_select(local, rng, options.m_idx);
        rec.visual_flags = std::move(sel.flags);
        rec.mvm_labels = std::move(sel.labels);
      } else {
        rec.visual_flags.assign(l, 0);
      }
      batch.pairs.push_back(std::move(rec));
    }
  }
  return batch;
}

PretrainLosses pretrain_loss(const PretrainBatch& batch, const SohoModel& model) {
  const std::size_t l = batch.features.tokens_per_image(), s = batch.pairs.size();
  const Tensor visual = model.visual_tokens(batch.features, batch.assignment, batch.use_vd);

  // Matching sequences for every pair, then masked sequences for positives.
  std::vector<std::size_t> rows, masked_seq(s, 0);
  std::vector<std::uint8_t> flags;
  std::vector<TokenSequence> texts;
  for (const auto& pair : batch.pairs) {
    for (std::size_t p = 0; p < l; ++p) rows.push_back(pair.image * l + p);
    flags.insert(flags.end(), l, 0);
    texts.push_back(pair.text);
  }
  for (std::size_t i = 0; i < s; ++i) {
    const auto& pair = batch.pairs[i];
    if (pair.itm_label < 0.5) continue;
    masked_seq[i] = texts.size();
    for (std::size_t p = 0; p < l; ++p) rows.push_back(pair.image * l + p);
    flags.insert(flags.end(), pair.visual_flags.begin(), pair.visual_flags.end());
    texts.push_back(pair.masked_text);
  }
  const Tensor masked = mask_rows(gather_rows(visual, rows), flags, model.visual_mask);
  const JointInput joint = model.joint_input(masked, batch.features.grid_h, batch.features.grid_w, texts);
  const Tensor hidden = model.forward(joint);

  // One normalized row block: [CLS] rows, then MLM rows, then MVM rows.
  std::vector<std::size_t> head_rows;
  std::vector<Real> itm_targets;
  std::vector<std::int32_t> mlm_targets, mvm_targets;
  for (std::size_t i = 0; i < s; ++i) {
    head_rows.push_back(joint.cls_row(i));
    itm_targets.push_back(batch.pairs[i].itm_label);
  }
  for (std::size_t i = 0; i < s; ++i) {
    for (const auto& [pos, id] : batch.pairs[i].mlm_labels) {
      head_rows.push_back(joint.text_row(masked_seq[i], pos));
      mlm_targets.push_back(id);
    }
  }
  for (std::size_t i = 0; i < s; ++i) {
    for (const auto& [pos, j] : batch.pairs[i].mvm_labels) {
      head_rows.push_back(joint.visual_row(masked_seq[i], pos));
      mvm_targets.push_back(j);
    }
  }
  const Tensor normed = model.head_rows(hidden, head_rows);
  auto block = [&](std::size_t first, std::size_t count) {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
    return gather_rows(normed, idx);
  };

  PretrainLosses out;
  out.itm_pairs = s;
  out.mlm_positions = mlm_targets.size();
  out.mvm_positions = mvm_targets.size();

  const Tensor itm_logits = reshape(model.itm_head(block(0, s)), {s});
  const Tensor itm = bce_with_logits(itm_logits, itm_targets);
  for (std::size_t i = 0; i < s; ++i) out.itm_correct += (itm_logits.at(i) > 0.0) == (itm_targets[i] > 0.5);

  Tensor mlm = Tensor::scalar(0.0), mvm = Tensor::scalar(0.0);
  if (!mlm_targets.empty()) mlm = cross_entropy_logits(model.mlm_head(block(s, mlm_targets.size())), mlm_targets);
  if (!mvm_targets.empty()) {
    mvm = cross_entropy_logits(model.mvm_head(block(s + mlm_targets.size(), mvm_targets.size())), mvm_targets);
  }
  out.mlm = mlm.item();
  out.mvm = mvm.item();
  out.itm = itm.item();
  out.total = add(add(mlm, mvm), itm);
  return out;
}

}  // namespace soho
