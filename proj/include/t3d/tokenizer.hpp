// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "t3d/error.hpp"

namespace t3d {

/// Fixed word list. Line number in the vocabulary file is the token id; ids 0, 1
/// and 2 are reserved for padding, the leading summary token and unknown words.
class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kCls = 1;
  static constexpr std::size_t kUnk = 2;
  static constexpr const char* kReserved[3] = {"[PAD]", "[CLS]", "[UNK]"};

  Vocab() = default;

  /// `words` excludes the reserved entries, which are prepended.
  static Vocab from_words(const std::vector<std::string>& words) {
    std::vector<std::string> tokens(std::begin(kReserved), std::end(kReserved));
    for (const auto& w : words) tokens.push_back(w);
    return Vocab(std::move(tokens));
  }

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    require(!tokens_.empty(), Errc::config, "empty vocabulary");
    require(tokens_.size() >= 3 && tokens_[kPad] == kReserved[0] && tokens_[kCls] == kReserved[1] &&
                tokens_[kUnk] == kReserved[2],
            Errc::config, "vocabulary must begin with [PAD], [CLS], [UNK]");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      require(!tokens_[i].empty(), Errc::config, "empty token on vocabulary line " + std::to_string(i));
      require(index_.emplace(tokens_[i], i).second, Errc::config, "duplicate token '" + tokens_[i] + "'");
    }
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), Errc::io, "cannot open vocabulary " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), Errc::io, "cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TokenSequence {
  static constexpr std::size_t cls_position = 0;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;  // 1 = real token

  std::size_t length() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Lowercased words split on whitespace and punctuation.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// [CLS] followed by word ids, truncated at the tail or padded to `max_len`.
inline TokenSequence tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  require(!vocab.empty(), Errc::config, "empty vocabulary");
  require(max_len >= 1, Errc::config, "token length must be at least 1");
  TokenSequence seq;
  seq.ids.assign(max_len, Vocab::kPad);
  seq.mask.assign(max_len, 0);
  seq.ids[0] = Vocab::kCls;
  seq.mask[0] = 1;
  std::size_t pos = 1;
  for (const auto& w : split_words(text)) {
    if (pos == max_len) break;
    seq.ids[pos] = vocab.id(w);
    seq.mask[pos] = 1;
    ++pos;
  }
  return seq;
}

}  // namespace t3d
