// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

/// Closed whole-word vocabulary with fixed reserved ids.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kCls = 1;
  static constexpr std::int32_t kSep = 2;
  static constexpr std::int32_t kMask = 3;
  static constexpr std::int32_t kUnk = 4;
  static constexpr std::int32_t kFirstWord = 5;

  /// `words` excludes the reserved tokens; duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> words);

  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  std::size_t word_count() const { return tokens_.size() - kFirstWord; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line, reserved tokens first, UTF-8.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Lowercases and splits on whitespace and ASCII punctuation (which is dropped).
std::vector<std::string> split_words(std::string_view text);

/// Sorted set of corpus words behind the reserved ids. Throws ConfigError on
/// an empty corpus.
Vocabulary build_vocab(std::span<const std::string> corpus);

struct TokenSequence {
  std::vector<std::int32_t> ids;
  /// 1 for [CLS], words and [SEP]; 0 for padding.
  std::vector<std::uint8_t> pad_mask;

  std::size_t max_len() const { return ids.size(); }
  /// Number of non-padding positions.
  std::size_t length() const;
};

/// [CLS] words... [SEP] [PAD]..., words truncated so [SEP] always fits.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);
/// Words between [CLS] and [SEP] joined by single spaces.
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

struct MaskedText {
  TokenSequence seq;
  /// position -> original id, exactly at the selected positions.
  std::map<std::size_t, std::int32_t> labels;
};

/// BERT-style masking. Each word position is selected with probability p;
/// a selected token becomes [MASK] (80%), a uniformly drawn vocabulary word
/// (10%) or stays as it is (10%). Special tokens are never selected.
/// Rng needs uniform() in [0, 1) and below(n).
template <class Rng>
MaskedText mlm_mask(const TokenSequence& seq, Real p, Rng& rng, const Vocabulary& vocab) {
  MaskedText out{seq, {}};
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const std::int32_t id = seq.ids[i];
    if (id == Vocabulary::kPad || id == Vocabulary::kCls || id == Vocabulary::kSep) continue;
    if (!(rng.uniform() < p)) continue;
    out.labels.emplace(i, id);
    const Real branch = rng.uniform();
    if (branch < 0.8) {
      out.seq.ids[i] = Vocabulary::kMask;
    } else if (branch < 0.9 && vocab.word_count() > 0) {
      out.seq.ids[i] = Vocabulary::kFirstWord + static_cast<std::int32_t>(rng.below(vocab.word_count()));
    }
  }
  return out;
}

}  // namespace soho
