// Copyright 2026 The prefixchat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PREFIXCHAT_TOKENIZER_HPP_
#define PREFIXCHAT_TOKENIZER_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace prefixchat {

using TokenId = std::int32_t;

/// Byte-pair vocabulary over UTF-8 code points.
///
/// Text is pre-split into pieces that end at (and include) a space, so the
/// trailing space acts as the end-of-word marker and merges never cross a
/// word boundary. Ids 0..3 are the specials; then the base alphabet in byte
/// order; then one token per merge whose result was not already present.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kNumSpecials = 4;

  using Merge = std::pair<std::string, std::string>;

  Vocabulary();
  Vocabulary(std::vector<std::string> base_symbols, std::vector<Merge> merges);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  /// Id of `symbol`, or kUnk when absent.
  TokenId lookup(std::string_view symbol) const;
  bool contains(std::string_view symbol) const;
  static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kNumSpecials); }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<Merge>& merges() const { return merges_; }
  /// Rank of a merge, or -1.
  int merge_rank(const std::string& left, const std::string& right) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && merges_ == other.merges_;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, TokenId> index_;
  std::map<Merge, int> merge_ranks_;
};

/// Splits UTF-8 text into code-point strings. Invalid lead bytes become
/// single-byte symbols.
std::vector<std::string> utf8_symbols(std::string_view text);

/// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go to
/// the lexicographically smallest pair) until `target_size` tokens exist or
/// no pair occurs twice.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_size);

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);
/// Specials render as empty; throws std::out_of_range("invalid id ...").
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

}  // namespace prefixchat

#endif  // PREFIXCHAT_TOKENIZER_HPP_
