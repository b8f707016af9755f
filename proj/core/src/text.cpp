// SPDX-License-Identifier: Apache-2.0
#include "soho/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "soho/error.hpp"

namespace soho {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> names{"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
  return names;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : tokens_(reserved_tokens()) {
  tokens_.insert(tokens_.end(), std::make_move_iterator(words.begin()), std::make_move_iterator(words.end()));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw ConfigError("vocabulary token '" + tokens_[i] + "' appears twice");
    }
  }
}

std::int32_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || std::size_t(id) >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
  return tokens_[std::size_t(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  std::uint64_t offset = 0;
  while (std::getline(is, line)) {
    lines.push_back(line);
    offset += line.size() + 1;
  }
  const auto& reserved = reserved_tokens();
  if (lines.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), lines.begin())) {
    throw FormatError(path.string(), 0, "vocabulary must start with the reserved tokens");
  }
  return Vocabulary(std::vector<std::string>(lines.begin() + reserved.size(), lines.end()));
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && (std::isspace(u) || std::ispunct(u))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocabulary build_vocab(std::span<const std::string> corpus) {
  if (corpus.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
  std::set<std::string> words;
  for (const auto& caption : corpus)
    for (auto& w : split_words(caption)) words.insert(std::move(w));
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

std::size_t TokenSequence::length() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), std::uint8_t{1}));
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("max_len must be at least 3");
  const auto words = split_words(text);
  const std::size_t n = std::min(words.size(), max_len - 2);
  TokenSequence seq;
  seq.ids.assign(max_len, Vocabulary::kPad);
  seq.pad_mask.assign(max_len, 0);
  seq.ids[0] = Vocabulary::kCls;
  for (std::size_t i = 0; i < n; ++i) seq.ids[i + 1] = vocab.id(words[i]);
  seq.ids[n + 1] = Vocabulary::kSep;
  std::fill_n(seq.pad_mask.begin(), n + 2, std::uint8_t{1});
  return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 1; i < seq.ids.size() && seq.ids[i] != Vocabulary::kSep; ++i) {
    if (!out.empty()) out += ' ';
    out += vocab.token(seq.ids[i]);
  }
  return out;
}

}  // namespace soho
